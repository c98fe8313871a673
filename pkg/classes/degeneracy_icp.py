"""
Degeneracy-aware scan-to-submap localization.

A scan in the sensor frame is registered against a submap with noise-weighted point-to-plane Gauss-Newton. Each
iteration block-scales the Hessian so translation and rotation are numerically comparable, flags eigen-directions
whose eigenvalue ratio to the largest reaches gamma, and only updates the well-conditioned directions. The
registration result is fused with the odometry prior through a Cauchy-robust Gauss-Newton over T_{k,m}.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from classes.doppler_odometry import PoseWithCovariance
from classes.exceptions import (InvalidArgumentError, LocalizationUnavailableError, ScalingFailureError,
                                StepFailureError)
from classes.lie_group import Pose, SE3, symmetrize
from classes.point_cloud import Cloud, Point

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
SCALE_FLOOR = 1e-6
BLOCK_JITTER = 1e-12
PRIOR_FLOOR = 1e-12


@dataclass
class AssociationConfig:
    knn_k: int = 8
    beta: float = 1.0
    sample_cap: int = 1000
    distance_gate: float = 1.0
    residual_gate: float = 0.3
    curvature_association: bool = True
    seed: int = 0

    def validate(self):
        if self.knn_k < 1 or self.beta < 0 or self.distance_gate <= 0 or self.residual_gate <= 0:
            raise InvalidArgumentError("AssociationConfig requires knn_k >= 1, beta >= 0 and positive gates")
        return self


@dataclass
class NormalizationScales:
    eta_d: float
    eta_kappa: float


@dataclass
class NoiseConfig:
    range_std: float = 0.02
    bearing_std: float = 0.002
    sigma_m: float = 0.02
    sigma_n: float = 0.05


@dataclass
class DegeneracyConfig:
    gamma: float = 80.0
    epsilon: float = 1e-6
    max_iterations: int = 15
    convergence_tol: float = 1e-4
    coarse_tol: float = 1e-2
    degeneracy_aware: bool = True

    def validate(self):
        if not self.gamma > 1 or not self.epsilon > 0:
            raise InvalidArgumentError("DegeneracyConfig requires gamma > 1 and epsilon > 0")
        return self


@dataclass
class FusionConfig:
    cauchy_c: float = 0.1
    max_iterations: int = 20
    tolerance: float = 1e-10
    outlier_gate_t: float = 0.5
    outlier_gate_r: float = 0.1
    min_pairs: int = 10


@dataclass
class DegeneracyReport:
    ell: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate_mask: np.ndarray
    lambda_thresh: float

    @property
    def num_degenerate(self) -> int:
        return int(np.sum(self.degenerate_mask))

    @property
    def well_conditioned(self) -> np.ndarray:
        return self.eigenvectors[:, ~self.degenerate_mask]

    @property
    def degenerate(self) -> np.ndarray:
        return self.eigenvectors[:, self.degenerate_mask]

    @property
    def zeroed_well_conditioned(self) -> np.ndarray:
        """Eigenvector matrix with the degenerate columns set to zero."""
        out = self.eigenvectors.copy()
        out[:, self.degenerate_mask] = 0.0
        return out


@dataclass
class Correspondence:
    scan_point: np.ndarray
    map_point: np.ndarray
    normal: np.ndarray


@dataclass
class CorrespondenceSet:
    """Matched pairs: scan points in the sensor frame, map points and unit normals in the map frame."""
    scan_points: np.ndarray
    map_points: np.ndarray
    normals: np.ndarray
    scan_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    map_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.scan_points)

    @classmethod
    def from_pairs(cls, pairs) -> 'CorrespondenceSet':
        return cls(np.array([pair.scan_point for pair in pairs], dtype=float).reshape(-1, 3),
                   np.array([pair.map_point for pair in pairs], dtype=float).reshape(-1, 3),
                   np.array([pair.normal for pair in pairs], dtype=float).reshape(-1, 3),
                   np.arange(len(pairs)), np.arange(len(pairs)))

    def select(self, mask) -> 'CorrespondenceSet':
        return CorrespondenceSet(self.scan_points[mask], self.map_points[mask], self.normals[mask],
                                 self.scan_indices[mask], self.map_indices[mask])


@dataclass
class LocalizationResult:
    pose: Pose
    covariance: np.ndarray
    report: Optional[DegeneracyReport]
    fused_pose: PoseWithCovariance
    accepted: bool
    fused_map_pose: Optional[PoseWithCovariance] = None
    iterations: int = 0
    num_pairs: int = 0
    available: bool = True


def reject_outlier(fused: Pose, odom: Pose, gates: Tuple[float, float]) -> bool:
    """
    Post-alignment consistency check on T_diff = fused * odom^-1.

    Parameters:
    :param fused: Fused pose estimate.
    :param odom: Odometry (prior) pose estimate.
    :param gates: (translation gate in m, rotation gate in rad); both bounds are inclusive.

    Returns:
    :return: True when the fused estimate is accepted.
    """
    difference = SE3.log_map(fused @ odom.inverse())
    return bool(np.linalg.norm(difference[:3]) <= gates[0] and np.linalg.norm(difference[3:]) <= gates[1])


class DegeneracyAwareIcp:
    def __init__(self, association: AssociationConfig = None, noise: NoiseConfig = None,
                 degeneracy: DegeneracyConfig = None, fusion: FusionConfig = None, seed: Optional[int] = None):
        self.association = (association or AssociationConfig()).validate()
        self.noise = noise or NoiseConfig()
        self.degeneracy = (degeneracy or DegeneracyConfig()).validate()
        self.fusion = fusion or FusionConfig()
        self.seed = self.association.seed if seed is None else seed
        self.scaling_fallbacks = 0

    # association -----------------------------------------------------------------------------------------

    def compute_normalization_scales(self, submap: Cloud, seed: Optional[int] = None) -> NormalizationScales:
        """
        Median nearest-neighbour distance and median |curvature| over a seeded sample of map points.

        Parameters:
        :param submap: Map cloud with at least two points and a curvature column.
        :param seed: PRNG seed; the instance seed when omitted.

        Returns:
        :return: NormalizationScales, each clamped below at 1e-6.
        """
        n_points = len(submap)
        if n_points < 2:
            raise InvalidArgumentError("Normalization needs at least two map points")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        cap = self.association.sample_cap
        sample = np.arange(n_points) if n_points <= cap else np.sort(rng.choice(n_points, size=cap, replace=False))
        distances, _ = submap.tree.query(submap.positions[sample], k=2)
        eta_d = max(float(np.median(distances[:, 1])), SCALE_FLOOR)
        curvatures = submap.curvatures if submap.has_curvature() else np.zeros(n_points)
        eta_kappa = max(float(np.median(np.abs(curvatures[sample]))), SCALE_FLOOR)
        return NormalizationScales(eta_d, eta_kappa)

    def associate_all(self, positions: np.ndarray, curvatures: Optional[np.ndarray], submap: Cloud,
                      scales: NormalizationScales) -> Tuple[np.ndarray, np.ndarray]:
        """
        Vectorized association of map-frame scan positions to submap points.

        Returns:
        :return: (scan indices, map indices) of the points that found a match within distance_gate.
        """
        if len(positions) == 0 or submap.is_empty():
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        k_eff = min(self.association.knn_k, len(submap))
        distances, indices = submap.tree.query(positions, k=k_eff)
        distances = distances.reshape(len(positions), k_eff)
        indices = indices.reshape(len(positions), k_eff)
        gated = distances[:, 0] <= self.association.distance_gate

        if self.association.curvature_association and k_eff > 1:
            map_curvatures = submap.curvatures if submap.has_curvature() else np.zeros(len(submap))
            scan_curvatures = np.zeros(len(positions)) if curvatures is None else curvatures
            scores = (np.abs(scan_curvatures[:, None] - map_curvatures[indices]) / scales.eta_kappa
                      + self.association.beta * distances / scales.eta_d)
            order = np.lexsort((indices, distances, scores), axis=-1)
            best = indices[np.arange(len(positions)), order[:, 0]]
        else:
            best = indices[:, 0]
        scan_indices = np.flatnonzero(gated)
        return scan_indices, best[gated]

    def associate(self, scan_point: Point, submap: Cloud, scales: NormalizationScales) -> Optional[int]:
        """Best map index for one scan point already expressed in the map frame, or None past the gate."""
        curvature = None if scan_point.curvature is None else np.array([scan_point.curvature])
        scan_indices, map_indices = self.associate_all(np.asarray(scan_point.position, float)[None, :], curvature,
                                                       submap, scales)
        return int(map_indices[0]) if len(scan_indices) else None

    def filter_correspondences(self, pairs: CorrespondenceSet, current_pose: Pose,
                               residual_gating: bool = False) -> CorrespondenceSet:
        """
        Drops pairs farther apart than distance_gate and, once residual gating is enabled, pairs whose
        point-to-plane residual exceeds residual_gate.
        """
        if len(pairs) == 0:
            return pairs
        offsets = current_pose.transform_points(pairs.scan_points) - pairs.map_points
        keep = np.linalg.norm(offsets, axis=1) <= self.association.distance_gate
        if residual_gating:
            residuals = np.einsum('ni,ni->n', pairs.normals, offsets)
            keep &= np.abs(residuals) <= self.association.residual_gate
        return pairs.select(keep)

    def correspondences(self, scan: Cloud, submap: Cloud, pose: Pose, scales: NormalizationScales
                        ) -> CorrespondenceSet:
        positions = pose.transform_points(scan.positions)
        scan_indices, map_indices = self.associate_all(positions, scan.curvatures, submap, scales)
        return CorrespondenceSet(scan.positions[scan_indices], submap.positions[map_indices],
                                 submap.normals[map_indices], scan_indices, map_indices)

    # weighted point-to-plane -----------------------------------------------------------------------------

    def residual_variances(self, pairs: CorrespondenceSet, pose: Pose) -> np.ndarray:
        noise = self.noise
        ranges = np.linalg.norm(pairs.scan_points, axis=1)
        beams = pairs.scan_points / np.maximum(ranges, 1e-12)[:, None]
        sensor_normals = pairs.normals @ pose.rotation
        along_beam = np.einsum('ni,ni->n', sensor_normals, beams) ** 2
        scan_term = noise.range_std ** 2 * along_beam + (ranges * noise.bearing_std) ** 2 * (1.0 - along_beam)

        offsets = pose.transform_points(pairs.scan_points) - pairs.map_points
        normal_term = noise.sigma_n ** 2 * (np.sum(offsets ** 2, axis=1)
                                            - np.einsum('ni,ni->n', pairs.normals, offsets) ** 2)
        variances = scan_term + noise.sigma_m ** 2 + normal_term
        return np.maximum(variances, VARIANCE_FLOOR)

    def residual_variance(self, pair: Correspondence, pose: Pose) -> float:
        return float(self.residual_variances(CorrespondenceSet.from_pairs([pair]), pose)[0])

    @staticmethod
    def residuals_and_jacobians(pairs: CorrespondenceSet, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        """Point-to-plane residuals n.(T p - q) and their Jacobians under left perturbation of T."""
        moved = pose.transform_points(pairs.scan_points)
        residuals = np.einsum('ni,ni->n', pairs.normals, moved - pairs.map_points)
        jacobians = np.hstack([pairs.normals, np.cross(moved, pairs.normals)])
        return residuals, jacobians

    def build_normal_equations(self, pairs: CorrespondenceSet, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gauss-Newton system H xi = b with H = J^T I J and b = -J^T I r, weighting each pair by its inverse
        residual variance.
        """
        if len(pairs) == 0:
            raise InvalidArgumentError("build_normal_equations needs at least one pair")
        residuals, jacobians = self.residuals_and_jacobians(pairs, pose)
        weights = 1.0 / self.residual_variances(pairs, pose)
        hessian = jacobians.T @ (weights[:, None] * jacobians)
        gradient = -jacobians.T @ (weights * residuals)
        return symmetrize(hessian), gradient

    # degeneracy handling ---------------------------------------------------------------------------------

    @staticmethod
    def schur_marginals(hessian: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Marginal information of the translation and rotation blocks."""
        h_tt, h_tr = hessian[:3, :3], hessian[:3, 3:]
        h_rt, h_rr = hessian[3:, :3], hessian[3:, 3:]
        if np.linalg.cond(h_rr) > 1.0 / BLOCK_JITTER:
            h_rr = h_rr + BLOCK_JITTER * np.eye(3)
        if np.linalg.cond(h_tt) > 1.0 / BLOCK_JITTER:
            h_tt = h_tt + BLOCK_JITTER * np.eye(3)
        translation = symmetrize(h_tt - h_tr @ np.linalg.solve(h_rr, h_rt))
        rotation = symmetrize(h_rr - h_rt @ np.linalg.solve(h_tt, h_tr))
        return translation, rotation

    def _scaling_factor(self, hessian: np.ndarray) -> float:
        translation, rotation = self.schur_marginals(hessian)
        ratio = np.max(np.linalg.eigvalsh(rotation)) / np.max(np.linalg.eigvalsh(translation))
        ell = np.sqrt(ratio) if ratio > 0 else np.nan
        if not np.isfinite(ell) or ell <= 0:
            raise ScalingFailureError(f"Block scaling factor is not finite (ratio {ratio})")
        return float(ell)

    def compute_block_scaling(self, hessian: np.ndarray) -> Tuple[float, np.ndarray]:
        """
        Scaling factor ell = sqrt(lambda_max(H_rot^marg) / lambda_max(H_trans^marg)) and S = blkdiag(I, ell I).

        Parameters:
        :param hessian: Symmetric 6x6 Gauss-Newton Hessian.

        Returns:
        :return: Tuple (ell, S). A non-finite factor falls back to ell = 1 with a warning.
        """
        try:
            with np.errstate(divide='ignore', invalid='ignore'):
                ell = self._scaling_factor(hessian)
        except (ScalingFailureError, np.linalg.LinAlgError) as e:
            self.scaling_fallbacks += 1
            logger.warning(f"An error occurred: {e}; falling back to unit scaling")
            ell = 1.0
        return ell, np.diag([1.0, 1.0, 1.0, ell, ell, ell])

    def detect_degeneracy(self, scaled_hessian: np.ndarray, config: DegeneracyConfig = None,
                          ell: float = 1.0) -> DegeneracyReport:
        """
        Eigen-decomposition of the scaled Hessian in descending order; direction i is degenerate iff
        lambda_max / lambda_i >= gamma, i.e. lambda_i <= lambda_max / gamma.
        """
        config = config or self.degeneracy
        eigenvalues, eigenvectors = np.linalg.eigh(symmetrize(scaled_hessian))
        eigenvalues = eigenvalues[::-1]
        eigenvectors = eigenvectors[:, ::-1]
        lambda_max = eigenvalues[0]
        if lambda_max <= 0:
            mask = np.ones(6, dtype=bool)
            lambda_thresh = 0.0
        else:
            lambda_thresh = lambda_max / config.gamma
            mask = eigenvalues <= lambda_thresh
        return DegeneracyReport(ell, eigenvalues, eigenvectors, mask, float(lambda_thresh))

    @staticmethod
    def solve_remapped(hessian: np.ndarray, gradient: np.ndarray, scaling: np.ndarray, report: DegeneracyReport,
                       T_bar: Pose) -> Tuple[Pose, np.ndarray]:
        """
        Solves the scaled system restricted to the well-conditioned eigen-directions, unscales the step and
        applies it on the left of T_bar.

        Parameters:
        :param hessian: Unscaled Hessian H (only used to check consistency with the report).
        :param gradient: Unscaled right-hand side b.
        :param scaling: Block scaling matrix S.
        :param report: DegeneracyReport of S^-T H S^-1.
        :param T_bar: Current pose estimate.

        Returns:
        :return: Tuple (updated pose, applied 6-vector update).
        """
        if hessian.shape != (6, 6):
            raise InvalidArgumentError("solve_remapped expects a 6x6 Hessian")
        scaling_inv = np.linalg.inv(scaling)
        scaled_gradient = scaling_inv.T @ gradient
        keep = ~report.degenerate_mask
        values = report.eigenvalues[keep]
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise StepFailureError("Well-conditioned eigenvalues must be positive and finite")
        basis = report.eigenvectors[:, keep]
        scaled_step = basis @ ((basis.T @ scaled_gradient) / values)
        update = scaling_inv @ scaled_step
        if not np.all(np.isfinite(update)):
            raise StepFailureError("Remapped update is not finite")
        return SE3.exp_map(update) @ T_bar, update

    @staticmethod
    def remapped_covariance(report: DegeneracyReport, scaling: np.ndarray, epsilon: float) -> np.ndarray:
        """
        Covariance of the remapped solution: V_c L_c^-1 V_c^T + V_d (1/eps) V_d^T in scaled coordinates, mapped
        back through xi = S^-1 xi_scaled, i.e. S^-1 P S^-T. This congruence keeps the result symmetric positive
        semi-definite, which S^-1 P S would not.
        """
        keep = ~report.degenerate_mask
        well = report.eigenvectors[:, keep]
        degenerate = report.eigenvectors[:, ~keep]
        scaled = well @ np.diag(1.0 / report.eigenvalues[keep]) @ well.T + degenerate @ degenerate.T / epsilon
        scaling_inv = np.linalg.inv(scaling)
        return symmetrize(scaling_inv @ scaled @ scaling_inv.T)

    # registration and fusion -----------------------------------------------------------------------------

    def register(self, scan: Cloud, submap: Cloud, initial: Pose):
        """
        Iterated association and remapped Gauss-Newton from an initial T_{m,s}.

        Returns:
        :return: Tuple (T_{m,s}, covariance, report, iterations, number of pairs in the last iteration).
        """
        if not submap.has_normals():
            raise InvalidArgumentError("The submap needs normals for point-to-plane registration")
        config = self.degeneracy
        scales = self.compute_normalization_scales(submap)
        pose = initial
        residual_gating = False
        report = None
        hessian = np.zeros((6, 6))
        scaling = np.eye(6)
        n_pairs = 0
        iterations = 0
        for iterations in range(1, config.max_iterations + 1):
            pairs = self.correspondences(scan, submap, pose, scales)
            pairs = self.filter_correspondences(pairs, pose, residual_gating)
            n_pairs = len(pairs)
            if n_pairs < self.fusion.min_pairs:
                raise LocalizationUnavailableError(f"Only {n_pairs} correspondences survived gating")
            hessian, gradient = self.build_normal_equations(pairs, pose)
            if config.degeneracy_aware:
                ell, scaling = self.compute_block_scaling(hessian)
                scaling_inv = np.linalg.inv(scaling)
                report = self.detect_degeneracy(scaling_inv.T @ hessian @ scaling_inv, config, ell)
            else:
                scaling = np.eye(6)
                report = self.detect_degeneracy(hessian, DegeneracyConfig(gamma=np.inf), 1.0)
            pose, update = self.solve_remapped(hessian, gradient, scaling, report, pose)
            step = np.linalg.norm(update)
            if step < config.convergence_tol:
                break
            if step < config.coarse_tol:
                residual_gating = True

        if config.degeneracy_aware:
            covariance = self.remapped_covariance(report, scaling, config.epsilon)
        else:
            covariance = symmetrize(np.linalg.inv(hessian + config.epsilon * np.eye(6)))
        return pose, covariance, report, iterations, n_pairs

    def fuse(self, prior: PoseWithCovariance, registered: Pose, covariance: np.ndarray, T_sk: Pose
             ) -> PoseWithCovariance:
        """
        Minimizes 1/2 e_prior^T Q^-1 e_prior + rho(e_icp) over T_{k,m} with a Cauchy rho, starting from the pose
        implied by the registration.

        Parameters:
        :param prior: Odometry-compounded prior T_{k,m} with covariance Q.
        :param registered: Registered T_{m,s}.
        :param covariance: Registration covariance.
        :param T_sk: Sensor-from-robot extrinsic T_{s,k}.

        Returns:
        :return: Fused T_{k,m} with covariance from the final Gauss-Newton Hessian.
        """
        c_squared = self.fusion.cauchy_c ** 2
        prior_information = np.linalg.inv(symmetrize(prior.covariance) + PRIOR_FLOOR * np.eye(6))
        whitening = np.linalg.cholesky(np.linalg.inv(symmetrize(covariance))).T
        registered_inv = registered.inverse()
        transport = SE3.adjoint(T_sk)

        pose = (T_sk.inverse() @ registered_inv)
        information = prior_information
        for _ in range(self.fusion.max_iterations):
            prior_error = SE3.log_map(prior.pose @ pose.inverse())
            prior_jacobian = -SE3.right_jacobian_inverse(prior_error)
            current_ms = (T_sk @ pose).inverse()
            icp_error = SE3.log_map(registered_inv @ current_ms)
            icp_jacobian = -SE3.right_jacobian_inverse(icp_error) @ transport
            white_error = whitening @ icp_error
            white_jacobian = whitening @ icp_jacobian
            weight = 1.0 / (1.0 + white_error @ white_error / c_squared)

            information = symmetrize(prior_jacobian.T @ prior_information @ prior_jacobian
                                     + weight * white_jacobian.T @ white_jacobian)
            gradient = prior_jacobian.T @ prior_information @ prior_error + weight * white_jacobian.T @ white_error
            step = -np.linalg.solve(information, gradient)
            pose = SE3.exp_map(step) @ pose
            if np.linalg.norm(step) < self.fusion.tolerance:
                break
        return PoseWithCovariance(pose, symmetrize(np.linalg.inv(information)), prior.time)

    def localize(self, scan: Cloud, submap: Cloud, prior: PoseWithCovariance, T_sk: Pose,
                 vertex_from_map: Optional[Pose] = None) -> LocalizationResult:
        """
        Registers a preprocessed scan against a submap, fuses the result with the prior and checks consistency.

        Parameters:
        :param scan: Scan in the sensor frame, with curvatures for curvature-aware association.
        :param submap: Teach submap with normals and curvatures.
        :param prior: Prior T_{k,m} with covariance.
        :param T_sk: Sensor-from-robot extrinsic T_{s,k}.
        :param vertex_from_map: T_{v,m} of the current repeat vertex; the fused pose is returned relative to v
                                when given, relative to m otherwise.

        Returns:
        :return: LocalizationResult. When fewer than min_pairs correspondences survive, accepted is False and the
                 fused pose is the prior.
        """
        initial = (T_sk @ prior.pose).inverse()
        to_vertex = Pose.identity() if vertex_from_map is None else vertex_from_map.inverse()
        try:
            registered, covariance, report, iterations, n_pairs = self.register(scan, submap, initial)
        except (LocalizationUnavailableError, StepFailureError) as e:
            logger.debug(f"Localization unavailable: {e}")
            fallback = PoseWithCovariance(prior.pose @ to_vertex, prior.covariance, prior.time)
            return LocalizationResult(initial, np.eye(6) / self.degeneracy.epsilon, None, fallback, False,
                                      prior, 0, 0, False)

        fused = self.fuse(prior, registered, covariance, T_sk)
        accepted = reject_outlier(fused.pose, prior.pose, (self.fusion.outlier_gate_t, self.fusion.outlier_gate_r))
        fused_vertex = PoseWithCovariance(fused.pose @ to_vertex, fused.covariance, fused.time)
        return LocalizationResult(registered, covariance, report, fused_vertex, accepted, fused, iterations, n_pairs)
