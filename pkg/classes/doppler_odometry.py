import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from classes.exceptions import (InsufficientDataError, InvalidArgumentError, OutOfRangeError,
                                SingularWindowError)
from classes.lie_group import Pose, SE3, symmetrize
from classes.point_cloud import Cloud, Point

logger = logging.getLogger(__name__)

# rows of the body twist penalized by the ground-vehicle kinematic prior: lateral, vertical, roll, pitch
KINEMATIC_ROWS = (1, 2, 3, 4)
ANGULAR_SELECTOR = np.hstack([np.zeros((3, 3)), np.eye(3)])
MIN_RANGE = 1e-9
# below this inlier fraction the prior mean is taken to be stale and no point is gated
MIN_GATED_INLIER_FRACTION = 0.5


def default_kinematic_projection() -> np.ndarray:
    projection = np.zeros((4, 6))
    for row, column in enumerate(KINEMATIC_ROWS):
        projection[row, column] = 1.0
    return projection


@dataclass
class Twist:
    value: np.ndarray
    time: float


@dataclass
class GaussianPrior:
    mean: np.ndarray
    covariance: np.ndarray
    time: float


@dataclass
class VelocityWindow:
    twist_prev: Twist
    twist_curr: Twist
    joint_covariance: np.ndarray

    @property
    def duration(self) -> float:
        return self.twist_curr.time - self.twist_prev.time


@dataclass
class PoseWithCovariance:
    pose: Pose = field(default_factory=Pose.identity)
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    time: float = 0.0


@dataclass
class GyroMeasurement:
    time: float
    angular_velocity: np.ndarray


@dataclass
class OdometryConfig:
    qc: np.ndarray = field(default_factory=lambda: np.diag([0.5, 0.1, 0.1, 0.1, 0.1, 0.5]))
    qz: np.ndarray = field(default_factory=lambda: np.diag([1e-4, 1e-4, 1e-4, 1e-4]))
    r_dop: float = 0.0025
    r_gyro: np.ndarray = field(default_factory=lambda: np.diag([1e-4, 1e-4, 1e-4]))
    integration_steps: int = 10
    kinematic_projection: np.ndarray = field(default_factory=default_kinematic_projection)
    doppler_outlier_sigma: float = 5.0
    cold_start_scale: float = 10.0
    max_condition: float = 1e12

    def validate(self):
        for name in ('qc', 'qz', 'r_gyro'):
            matrix = getattr(self, name)
            if np.min(np.linalg.eigvalsh(symmetrize(matrix))) < -1e-12:
                raise InvalidArgumentError(f"OdometryConfig.{name} must be positive semi-definite")
        if self.r_dop <= 0:
            raise InvalidArgumentError("OdometryConfig.r_dop must be positive")
        if self.integration_steps < 1:
            raise InvalidArgumentError("OdometryConfig.integration_steps must be at least 1")
        return self


@dataclass
class Extrinsics:
    """Sensor-from-robot transform T_{s,r} with its adjoint cached."""
    T_sr: Pose = field(default_factory=Pose.identity)
    adjoint_sr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.adjoint_sr = SE3.adjoint(self.T_sr)

    @property
    def rotation_sr(self) -> np.ndarray:
        return self.T_sr.rotation


@dataclass
class DopplerBiasModel:
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.coefficients)):
            raise InvalidArgumentError("Doppler bias coefficients must be finite")

    @staticmethod
    def features(positions: np.ndarray) -> np.ndarray:
        positions = np.atleast_2d(positions)
        ranges = np.linalg.norm(positions, axis=1)
        elevations = np.arcsin(np.clip(positions[:, 2] / np.maximum(ranges, MIN_RANGE), -1.0, 1.0))
        return np.column_stack([np.ones(len(positions)), ranges, elevations])

    def bias(self, positions: np.ndarray) -> np.ndarray:
        return self.features(positions) @ self.coefficients


@dataclass
class GyroBiasState:
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ema_weight: float = 0.2
    min_update_interval: float = 0.5
    consistency_gate: float = 0.05
    skipped_updates: int = 0
    accepted_updates: int = 0

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=float).reshape(3)
        if not 0.0 < self.ema_weight <= 1.0:
            raise InvalidArgumentError(f"ema_weight must lie in (0, 1], got {self.ema_weight}")


def doppler_jacobian(positions: np.ndarray, extrinsics: Extrinsics) -> np.ndarray:
    """Rows (1/|q|)[q^T 0] Ad(T_sr) for each sensor-frame position, shape (N, 6)."""
    positions = np.atleast_2d(positions)
    directions = positions / np.linalg.norm(positions, axis=1, keepdims=True)
    return directions @ extrinsics.adjoint_sr[:3, :]


def doppler_residual(twist_at_ti, point: Point, extrinsics: Extrinsics, bias_model: DopplerBiasModel) -> float:
    """
    Radial-velocity residual of one Doppler measurement, y - (1/|q|)[q^T 0] Ad(T_sr) w(t_i) - h(psi).

    Parameters:
    :param twist_at_ti: Body twist at the point's timestamp.
    :param point: Measured point in the sensor frame, with its radial velocity.
    :param extrinsics: Sensor-from-robot extrinsics.
    :param bias_model: Linear Doppler bias model.

    Returns:
    :return: Scalar residual in m/s.
    """
    position = np.asarray(point.position, dtype=float)
    if np.linalg.norm(position) < MIN_RANGE:
        raise InvalidArgumentError("Doppler residual is undefined for a zero-range point")
    prediction = doppler_jacobian(position, extrinsics)[0] @ np.asarray(twist_at_ti, dtype=float)
    return float(point.radial_velocity - prediction - bias_model.bias(position)[0])


def gyro_residual(twist_at_tj, gyro, extrinsics: Extrinsics, bias: GyroBiasState) -> np.ndarray:
    """Gyro residual y - R_sr D w(t_j) - b."""
    selector = extrinsics.rotation_sr @ ANGULAR_SELECTOR
    return np.asarray(gyro, dtype=float) - selector @ np.asarray(twist_at_tj, dtype=float) - bias.bias


class DopplerOdometry:
    """
    Correspondence-free Doppler-inertial odometry over a sliding pair of body twists.

    Each call to step() solves the linear MAP problem over (w_{k-1}, w_k), integrates the pose offset from the
    latest vertex with its covariance, and marginalizes w_{k-1} into the prior used by the next window.
    """

    def __init__(self, config: OdometryConfig = None, extrinsics: Extrinsics = None,
                 bias_model: DopplerBiasModel = None, bias_state: GyroBiasState = None):
        self.config = (config or OdometryConfig()).validate()
        self.extrinsics = extrinsics or Extrinsics()
        self.bias_model = bias_model or DopplerBiasModel()
        self.bias_state = bias_state or GyroBiasState()
        self.prior: Optional[GaussianPrior] = None
        self.offset = PoseWithCovariance()
        self.last_window: Optional[VelocityWindow] = None
        self.rejected_doppler = 0
        self.singular_windows = 0

    def reset(self, time: float, twist_prior: Optional[GaussianPrior] = None):
        self.prior = twist_prior or self.cold_start_prior(time)
        self.offset = PoseWithCovariance(time=time)
        self.last_window = None

    def cold_start_prior(self, time: float) -> GaussianPrior:
        return GaussianPrior(np.zeros(6), self.config.cold_start_scale * self.config.qc, time)

    def reset_offset(self):
        """Restarts the pose offset at a newly created vertex."""
        self.offset = PoseWithCovariance(time=self.offset.time)

    def _interpolation_weights(self, times: np.ndarray, t_prev: float, t_curr: float) -> np.ndarray:
        return np.clip((np.asarray(times, dtype=float) - t_prev) / (t_curr - t_prev), 0.0, 1.0)

    def assemble_window(self, doppler_meas: Cloud, gyro_meas: Sequence[GyroMeasurement], prior: GaussianPrior,
                        t_curr: float, doppler_weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Builds the normal equations A x = b of the window cost over x = [w_{k-1}; w_k].

        Parameters:
        :param doppler_meas: Scan in the sensor frame carrying radial velocities and timestamps.
        :param gyro_meas: Gyro samples inside the window.
        :param prior: Gaussian prior on w_{k-1}; its time is t_{k-1}.
        :param t_curr: Window end time t_k.
        :param doppler_weights: Optional 0/1 mask over the non-zero-range points, applied on top of 1/R_dop.

        Returns:
        :return: Tuple (A, b) with A of shape (12, 12).
        """
        config = self.config
        t_prev = prior.time
        if not t_curr > t_prev:
            raise InvalidArgumentError(f"Window times must increase, got {t_prev} -> {t_curr}")
        hessian = np.zeros((12, 12))
        rhs = np.zeros(12)

        prior_information = np.linalg.inv(prior.covariance)
        hessian[:6, :6] += prior_information
        rhs[:6] += prior_information @ prior.mean

        difference = np.hstack([-np.eye(6), np.eye(6)])
        process_information = np.linalg.inv((t_curr - t_prev) * config.qc)
        hessian += difference.T @ process_information @ difference

        kinematic = np.hstack([np.zeros((4, 6)), config.kinematic_projection])
        hessian += kinematic.T @ np.linalg.inv(config.qz) @ kinematic

        positions, measured, alphas = self._doppler_inputs(doppler_meas, t_prev, t_curr)
        if len(positions):
            rows = doppler_jacobian(positions, self.extrinsics)
            jacobian = np.hstack([(1.0 - alphas)[:, None] * rows, alphas[:, None] * rows])
            weights = np.full(len(positions), 1.0 / config.r_dop)
            if doppler_weights is not None:
                weights = weights * doppler_weights
            targets = measured - self.bias_model.bias(positions)
            hessian += jacobian.T @ (weights[:, None] * jacobian)
            rhs += jacobian.T @ (weights * targets)

        gyro_information = np.linalg.inv(config.r_gyro)
        selector = self.extrinsics.rotation_sr @ ANGULAR_SELECTOR
        for sample in gyro_meas:
            alpha = self._interpolation_weights(sample.time, t_prev, t_curr)
            jacobian = np.hstack([(1.0 - alpha) * selector, alpha * selector])
            hessian += jacobian.T @ gyro_information @ jacobian
            rhs += jacobian.T @ gyro_information @ (np.asarray(sample.angular_velocity) - self.bias_state.bias)

        return symmetrize(hessian), rhs

    def _doppler_inputs(self, doppler_meas: Optional[Cloud], t_prev: float, t_curr: float):
        if doppler_meas is None or doppler_meas.is_empty():
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
        positions = doppler_meas.positions
        valid = np.linalg.norm(positions, axis=1) > MIN_RANGE
        alphas = self._interpolation_weights(doppler_meas.timestamps[valid], t_prev, t_curr)
        return positions[valid], doppler_meas.radial_velocities[valid], alphas

    def _solve(self, hessian: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        condition = np.linalg.cond(hessian)
        if not np.isfinite(condition) or condition > self.config.max_condition:
            raise SingularWindowError(f"Velocity window Hessian condition number {condition:.3e} too large")
        return np.linalg.solve(hessian, rhs)

    def solve_velocity_window(self, doppler_meas: Cloud, gyro_meas: Sequence[GyroMeasurement],
                              prev_marginal: Optional[GaussianPrior], t_curr: float
                              ) -> Tuple[VelocityWindow, GaussianPrior]:
        """
        MAP estimate of the twist pair of one window and the marginal prior on w_k for the next window.

        Doppler points whose residual at the prior mean exceeds doppler_outlier_sigma standard deviations receive
        zero weight before the window is solved.

        Parameters:
        :param doppler_meas: Scan with radial velocities, sensor frame.
        :param gyro_meas: Gyro samples within [t_{k-1}, t_k].
        :param prev_marginal: Prior on w_{k-1}; None starts cold at t_k - 0.1 s.
        :param t_curr: End of the window.

        Returns:
        :return: Tuple (VelocityWindow, GaussianPrior on w_k).
        """
        prior = prev_marginal or self.cold_start_prior(t_curr - 0.1)
        weights = self.doppler_inlier_weights(doppler_meas, prior)
        hessian, rhs = self.assemble_window(doppler_meas, gyro_meas, prior, t_curr, weights)
        solution = self._solve(hessian, rhs)

        covariance = symmetrize(np.linalg.inv(hessian))
        window = VelocityWindow(Twist(solution[:6], prior.time), Twist(solution[6:], t_curr), covariance)
        return window, self.marginalize(hessian, rhs, t_curr)

    def doppler_inlier_weights(self, doppler_meas: Optional[Cloud], prior: GaussianPrior) -> Optional[np.ndarray]:
        """
        Zero for valid Doppler points whose residual at the prior mean is beyond the outlier gate, else one.

        Returns:
        :return: 0/1 weights over the non-zero-range points, or None when nothing is gated. A prior mean that most
            points disagree with (a cold start while moving) gates nothing.
        """
        if doppler_meas is None or doppler_meas.is_empty():
            return None
        valid = np.linalg.norm(doppler_meas.positions, axis=1) > MIN_RANGE
        positions, measured = doppler_meas.positions[valid], doppler_meas.radial_velocities[valid]
        if len(positions) == 0:
            return None
        predicted = doppler_jacobian(positions, self.extrinsics) @ prior.mean
        residuals = measured - predicted - self.bias_model.bias(positions)
        inliers = np.abs(residuals) <= self.config.doppler_outlier_sigma * np.sqrt(self.config.r_dop)
        if inliers.mean() < MIN_GATED_INLIER_FRACTION:
            logger.debug(f"Prior mean disagrees with {int((~inliers).sum())} of {len(inliers)} Doppler points; "
                         f"keeping all of them")
            return None
        self.rejected_doppler += int((~inliers).sum())
        return inliers.astype(float)

    @staticmethod
    def marginalize(hessian: np.ndarray, rhs: np.ndarray, time: float) -> GaussianPrior:
        """Schur complement of the w_{k-1} block, giving the Gaussian prior on w_k."""
        a_pp, a_pc = hessian[:6, :6], hessian[:6, 6:]
        a_cp, a_cc = hessian[6:, :6], hessian[6:, 6:]
        elimination = a_cp @ np.linalg.inv(a_pp)
        information = symmetrize(a_cc - elimination @ a_pc)
        vector = rhs[6:] - elimination @ rhs[:6]
        covariance = symmetrize(np.linalg.inv(information))
        return GaussianPrior(covariance @ vector, covariance, time)

    def _alpha(self, window: VelocityWindow, tau: float) -> float:
        t_prev, t_curr = window.twist_prev.time, window.twist_curr.time
        if tau < t_prev or tau > t_curr:
            raise OutOfRangeError(f"Query time {tau} outside window [{t_prev}, {t_curr}]")
        return (tau - t_prev) / (t_curr - t_prev)

    def interpolate_velocity(self, window: VelocityWindow, tau: float) -> np.ndarray:
        alpha = self._alpha(window, tau)
        return (1.0 - alpha) * window.twist_prev.value + alpha * window.twist_curr.value

    def interpolate_velocity_covariance(self, window: VelocityWindow, tau: float) -> np.ndarray:
        alpha = self._alpha(window, tau)
        mixing = np.hstack([(1.0 - alpha) * np.eye(6), alpha * np.eye(6)])
        process = (1.0 - alpha) * (tau - window.twist_prev.time) * self.config.qc
        return symmetrize(mixing @ window.joint_covariance @ mixing.T + process)

    def integrate_pose_with_covariance(self, window: VelocityWindow, prev: PoseWithCovariance
                                       ) -> PoseWithCovariance:
        """
        Numerically integrates the interpolated twist over the window in S steps, propagating the left-perturbation
        covariance with the per-step velocity uncertainty.

        Parameters:
        :param window: Solved velocity window.
        :param prev: Pose and covariance at t_{k-1}.

        Returns:
        :return: PoseWithCovariance at t_k.
        """
        steps = self.config.integration_steps
        dt = window.duration / steps
        pose = prev.pose
        covariance = np.array(prev.covariance, dtype=float)
        for step in range(1, steps + 1):
            tau = min(window.twist_prev.time + step * dt, window.twist_curr.time)
            phi = dt * self.interpolate_velocity(window, tau)
            velocity_covariance = self.interpolate_velocity_covariance(window, tau)
            increment = SE3.exp_map(phi)
            jacobian = SE3.left_jacobian(phi)
            transport = SE3.adjoint(increment)
            pose = increment @ pose
            covariance = symmetrize(dt * dt * jacobian @ velocity_covariance @ jacobian.T
                                    + transport @ covariance @ transport.T)
        return PoseWithCovariance(pose, covariance, window.twist_curr.time)

    def _hold_window(self, t_curr: float) -> Tuple[VelocityWindow, GaussianPrior]:
        prior = self.prior or self.cold_start_prior(t_curr - 0.1)
        grown = prior.covariance + (t_curr - prior.time) * self.config.qc
        joint = np.block([[prior.covariance, prior.covariance], [prior.covariance, grown]])
        window = VelocityWindow(Twist(prior.mean, prior.time), Twist(prior.mean, t_curr), joint)
        return window, GaussianPrior(prior.mean, grown, t_curr)

    def step(self, scan: Cloud, gyro_meas: Sequence[GyroMeasurement], t_curr: float) -> PoseWithCovariance:
        """
        Processes one frame and returns the updated offset T_{k,v} from the latest vertex.
        """
        try:
            window, self.prior = self.solve_velocity_window(scan, gyro_meas, self.prior, t_curr)
        except SingularWindowError as e:
            self.singular_windows += 1
            logger.warning(f"An error occurred: {e}; holding previous twist")
            window, self.prior = self._hold_window(t_curr)
        self.last_window = window
        self.offset = self.integrate_pose_with_covariance(window, self.offset)
        return self.offset

    def current_twist(self) -> np.ndarray:
        return np.zeros(6) if self.prior is None else self.prior.mean


def calibrate_gyro_bias_static(gyro_stream: Sequence[GyroMeasurement], duration: float,
                               minimum_duration: float = 0.0) -> np.ndarray:
    """
    Mean gyro reading over the first `duration` seconds of a stationary stream.

    Parameters:
    :param gyro_stream: Time-ordered gyro samples.
    :param duration: Averaging window in seconds from the first sample.
    :param minimum_duration: Smallest acceptable averaging window.

    Returns:
    :return: Bias 3-vector in rad/s.
    """
    if duration < minimum_duration:
        raise InvalidArgumentError(f"Static calibration needs at least {minimum_duration} s, got {duration} s")
    if not gyro_stream:
        raise InsufficientDataError("Static gyro calibration received no samples")
    start = gyro_stream[0].time
    samples = [sample.angular_velocity for sample in gyro_stream if sample.time - start <= duration]
    if len(samples) < 10:
        raise InsufficientDataError(f"Static gyro calibration needs at least 10 samples, got {len(samples)}")
    return np.mean(np.asarray(samples, dtype=float), axis=0)


def update_gyro_bias_online(bias: GyroBiasState, pose_t: Pose, pose_prev: Pose, dt: float, gyro_mean,
                            rotation_sr: Optional[np.ndarray] = None) -> GyroBiasState:
    """
    Exponential-moving-average correction of the gyro bias from the rotation implied by two localized poses.

    Parameters:
    :param bias: Current bias state.
    :param pose_t: Localized pose T_{t,ref}.
    :param pose_prev: Localized pose T_{t-dt,ref}.
    :param dt: Time between the two poses in seconds.
    :param gyro_mean: Mean gyro reading over the interval.
    :param rotation_sr: Sensor-from-robot rotation; identity when omitted.

    Returns:
    :return: Updated GyroBiasState. Skipped and gated updates only bump their counters.
    """
    if dt <= bias.min_update_interval:
        return replace(bias, skipped_updates=bias.skipped_updates + 1)
    rotation_sr = np.eye(3) if rotation_sr is None else np.asarray(rotation_sr, dtype=float)
    implied_rate = SE3.log_map(pose_t @ pose_prev.inverse())[3:] / dt
    candidate = np.asarray(gyro_mean, dtype=float) - rotation_sr @ implied_rate
    if np.linalg.norm(candidate - bias.bias) > bias.consistency_gate:
        logger.debug(f"Gyro bias candidate {candidate} rejected by consistency gate")
        return replace(bias, skipped_updates=bias.skipped_updates + 1)
    updated = (1.0 - bias.ema_weight) * bias.bias + bias.ema_weight * candidate
    return replace(bias, bias=updated, accepted_updates=bias.accepted_updates + 1)


def mean_gyro(gyro_meas: List[GyroMeasurement]) -> np.ndarray:
    if not gyro_meas:
        return np.zeros(3)
    return np.mean([sample.angular_velocity for sample in gyro_meas], axis=0)
