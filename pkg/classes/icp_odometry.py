import logging
from dataclasses import replace
from typing import Optional

import numpy as np

from classes.degeneracy_icp import AssociationConfig, DegeneracyAwareIcp, DegeneracyConfig, FusionConfig, NoiseConfig
from classes.doppler_odometry import Extrinsics, PoseWithCovariance
from classes.exceptions import LocalizationUnavailableError, StepFailureError
from classes.lie_group import Pose, SE3, symmetrize
from classes.pose_graph import compose_with_covariance
from classes.point_cloud import Cloud

logger = logging.getLogger(__name__)


class IcpOdometry:
    """
    Frame-to-frame point-to-plane odometry baseline.

    Each preprocessed scan is registered against the previous one with a constant-velocity initial guess and no
    degeneracy handling. The increment covariance is the inverse Gauss-Newton Hessian.
    """

    def __init__(self, extrinsics: Extrinsics = None, noise: NoiseConfig = None,
                 association: AssociationConfig = None, max_iterations: int = 15,
                 fallback_variance: float = 1.0):
        association = association or AssociationConfig()
        association = replace(association, curvature_association=False)
        degeneracy = DegeneracyConfig(max_iterations=max_iterations, degeneracy_aware=False)
        self.registration = DegeneracyAwareIcp(association, noise, degeneracy, FusionConfig())
        self.extrinsics = extrinsics or Extrinsics()
        self.fallback_variance = fallback_variance
        self.previous_scan: Optional[Cloud] = None
        self.last_increment = PoseWithCovariance()
        self.offset = PoseWithCovariance()
        self.failed_registrations = 0

    def reset(self, time: float):
        self.previous_scan = None
        self.last_increment = PoseWithCovariance(time=time)
        self.offset = PoseWithCovariance(time=time)

    def reset_offset(self):
        self.offset = PoseWithCovariance(time=self.offset.time)

    def _robot_increment(self, sensor_increment: Pose, covariance: np.ndarray, time: float) -> PoseWithCovariance:
        """Maps T_{s_{k-1}, s_k} and its covariance to the robot increment T_{r_k, r_{k-1}}."""
        T_sr = self.extrinsics.T_sr
        inverse = sensor_increment.inverse()
        transport = SE3.adjoint(T_sr.inverse()) @ SE3.adjoint(inverse)
        pose = T_sr.inverse() @ inverse @ T_sr
        return PoseWithCovariance(pose, symmetrize(transport @ covariance @ transport.T), time)

    def step(self, scan: Cloud, t_curr: float) -> PoseWithCovariance:
        """
        Registers the scan against the previous one and returns the updated offset T_{k,v}.

        Parameters:
        :param scan: Preprocessed scan in the sensor frame with normals.
        :param t_curr: Scan time.

        Returns:
        :return: PoseWithCovariance of the offset from the latest vertex.
        """
        if self.previous_scan is None:
            self.previous_scan = scan
            self.offset = PoseWithCovariance(self.offset.pose, self.offset.covariance, t_curr)
            return self.offset

        T_sr = self.extrinsics.T_sr
        guess = T_sr @ self.last_increment.pose.inverse() @ T_sr.inverse()
        try:
            registered, covariance, _, _, _ = self.registration.register(scan, self.previous_scan, guess)
            increment = self._robot_increment(registered, covariance, t_curr)
        except (LocalizationUnavailableError, StepFailureError) as e:
            self.failed_registrations += 1
            logger.warning(f"An error occurred: {e}; using constant-velocity increment")
            increment = PoseWithCovariance(self.last_increment.pose, self.fallback_variance * np.eye(6), t_curr)

        self.last_increment = increment
        self.previous_scan = scan
        self.offset = compose_with_covariance(increment, self.offset)
        self.offset.time = t_curr
        return self.offset
