import copy
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np
import yaml

from classes.degeneracy_icp import AssociationConfig, DegeneracyConfig, FusionConfig, NoiseConfig
from classes.doppler_odometry import DopplerBiasModel, Extrinsics, GyroBiasState, OdometryConfig
from classes.exceptions import ConfigurationError
from classes.lidar_simulator import SensorSpec
from classes.lie_group import Pose, SE3
from classes.point_cloud import CurvatureConfig
from classes.pose_graph import MapConfig

logger = logging.getLogger(__name__)

CONFIG_ENVIRONMENT_VARIABLE = 'DTR_CONFIG'
DEFAULT_EXTRINSIC_TRANSLATION = [0.5, 0.0, 1.5]
# sensor pitched down by half the vertical field of view so the top beam row is level
DEFAULT_EXTRINSIC_RPY = [0.0, 0.1676, 0.0]

KNOWN_GROUPS = {
    'cloud': {'knn_k', 'flat_threshold', 'cluster_radius', 'min_cluster_size', 'coarse_voxel', 'fine_voxel',
              'uniform_voxel'},
    'odometry': {'qc_diag', 'qz_diag', 'r_dop', 'r_gyro_diag', 'integration_steps', 'doppler_outlier_sigma',
                 'cold_start_scale', 'max_condition', 'doppler_bias', 'gyro_bias'},
    'mapping': {'translation_threshold', 'rotation_threshold', 'frames_per_submap'},
    'daicp': {'knn_k', 'beta', 'sample_cap', 'distance_gate', 'residual_gate', 'gamma', 'epsilon',
              'max_iterations', 'convergence_tol', 'coarse_tol', 'cauchy_c', 'fusion_max_iterations',
              'outlier_gate_t', 'outlier_gate_r', 'min_pairs', 'seed'},
    'noise': {'range_std', 'bearing_std', 'sigma_m', 'sigma_n'},
    'sensor': {'horizontal_fov', 'vertical_fov', 'max_range', 'rate', 'rows', 'cols', 'range_noise_std',
               'doppler_noise_std'},
    'tracker': {'lookahead', 'speed', 'max_accel', 'max_yaw_rate', 'lateral_failure', 'max_consecutive_rejections',
                'stationary_time', 'gt_substeps', 'goal_tolerance', 'frame_limit_factor', 'gyro_rate'},
    'extrinsics': {'translation', 'rpy'},
}
NESTED_KEYS = {
    ('odometry', 'gyro_bias'): {'zeta', 'gate', 'min_interval'},
    ('odometry', 'doppler_bias'): {'coeffs'},
}


@dataclass
class TrackerConfig:
    lookahead: float = 2.0
    speed: float = 1.0
    max_accel: float = 0.5
    max_yaw_rate: float = 0.8
    lateral_failure: float = 5.0
    max_consecutive_rejections: int = 20
    stationary_time: float = 3.0
    gt_substeps: int = 10
    goal_tolerance: float = 0.5
    frame_limit_factor: float = 3.0
    gyro_rate: float = 100.0

    def validate(self):
        if self.lookahead <= 0 or self.speed <= 0 or self.max_accel <= 0 or self.max_yaw_rate <= 0:
            raise ConfigurationError("Tracker lookahead, speed, acceleration and yaw-rate limits must be positive")
        if self.stationary_time < 1.0:
            raise ConfigurationError("The stationary start must last at least 1 s for gyro calibration")
        return self


def rotation_from_rpy(rpy) -> np.ndarray:
    roll, pitch, yaw = np.asarray(rpy, dtype=float).reshape(3)
    return SE3.so3_exp([0.0, 0.0, yaw]) @ SE3.so3_exp([0.0, pitch, 0.0]) @ SE3.so3_exp([roll, 0.0, 0.0])


def extrinsics_from(translation, rpy) -> Extrinsics:
    """Builds T_sr from the sensor mounting T_rs given as a translation and roll/pitch/yaw in the robot frame."""
    robot_from_sensor = Pose(rotation_from_rpy(rpy), np.asarray(translation, dtype=float))
    return Extrinsics(robot_from_sensor.inverse())


@dataclass
class PipelineConfig:
    cloud: CurvatureConfig = field(default_factory=CurvatureConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    doppler_bias: DopplerBiasModel = field(default_factory=DopplerBiasModel)
    gyro_bias: GyroBiasState = field(default_factory=GyroBiasState)
    mapping: MapConfig = field(default_factory=MapConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    degeneracy: DegeneracyConfig = field(default_factory=DegeneracyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    extrinsics: Extrinsics = field(default_factory=lambda: extrinsics_from(DEFAULT_EXTRINSIC_TRANSLATION,
                                                                           DEFAULT_EXTRINSIC_RPY))

    def with_gamma(self, gamma: Optional[float]) -> 'PipelineConfig':
        if gamma is None:
            return self
        updated = copy.copy(self)
        updated.degeneracy = replace(self.degeneracy, gamma=float(gamma)).validate()
        return updated


class ConfigManager:
    """
    Loads pipeline settings from YAML. Values missing from the file keep their built-in defaults.
    """

    def __init__(self, environment: Optional[Dict[str, str]] = None):
        self.environment = os.environ if environment is None else environment

    def resolve_path(self, path: Optional[str]) -> Optional[str]:
        return path or self.environment.get(CONFIG_ENVIRONMENT_VARIABLE)

    @staticmethod
    def _check_keys(data: Dict[str, Any]):
        for group, values in data.items():
            if group not in KNOWN_GROUPS:
                logger.warning(f"Ignoring unknown configuration group '{group}'")
                continue
            if values is not None and not isinstance(values, dict):
                raise ConfigurationError(f"Configuration group '{group}' must be a mapping")
            for key, value in (values or {}).items():
                if key not in KNOWN_GROUPS[group]:
                    logger.warning(f"Ignoring unknown configuration key '{group}.{key}'")
                elif (group, key) in NESTED_KEYS:
                    if not isinstance(value, dict):
                        raise ConfigurationError(f"'{group}.{key}' must be a mapping of "
                                                 f"{sorted(NESTED_KEYS[(group, key)])}")
                    for nested in value:
                        if nested not in NESTED_KEYS[(group, key)]:
                            logger.warning(f"Ignoring unknown configuration key '{group}.{key}.{nested}'")

    def load_config(self, path: Optional[str] = None) -> PipelineConfig:
        """
        Parameters:
        :param path: YAML file; falls back to $DTR_CONFIG, then to the defaults.

        Returns:
        :return: A validated PipelineConfig.
        """
        path = self.resolve_path(path)
        if path is None:
            return self.from_dict({})
        if not os.path.exists(path):
            raise ConfigurationError(f"Configuration file {path} does not exist")
        try:
            with open(path) as handle:
                data = yaml.safe_load(handle) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Could not parse configuration file {path}: {e}") from e
        logger.info(f"Loaded configuration from {path}")
        return self.from_dict(data)

    def from_dict(self, data: Dict[str, Any]) -> PipelineConfig:
        if not isinstance(data, dict):
            raise ConfigurationError("The configuration root must be a mapping")
        self._check_keys(data)
        cloud = data.get('cloud') or {}
        odometry = data.get('odometry') or {}
        gyro_bias = odometry.get('gyro_bias') or {}
        doppler_bias = odometry.get('doppler_bias') or {}
        mapping = data.get('mapping') or {}
        daicp = data.get('daicp') or {}
        noise = data.get('noise') or {}
        sensor = data.get('sensor') or {}
        tracker = data.get('tracker') or {}
        extrinsics = data.get('extrinsics') or {}

        defaults = PipelineConfig()
        try:
            odometry_defaults = defaults.odometry
            config = PipelineConfig(
                cloud=CurvatureConfig(
                    knn_k=int(cloud.get('knn_k', defaults.cloud.knn_k)),
                    flat_threshold=float(cloud.get('flat_threshold', defaults.cloud.flat_threshold)),
                    cluster_radius=float(cloud.get('cluster_radius', defaults.cloud.cluster_radius)),
                    min_cluster_size=int(cloud.get('min_cluster_size', defaults.cloud.min_cluster_size)),
                    coarse_voxel=float(cloud.get('coarse_voxel', defaults.cloud.coarse_voxel)),
                    fine_voxel=float(cloud.get('fine_voxel', defaults.cloud.fine_voxel)),
                    uniform_voxel=float(cloud.get('uniform_voxel', defaults.cloud.uniform_voxel)),
                ).validate(),
                odometry=OdometryConfig(
                    qc=np.diag(odometry.get('qc_diag', np.diag(odometry_defaults.qc))).astype(float),
                    qz=np.diag(odometry.get('qz_diag', np.diag(odometry_defaults.qz))).astype(float),
                    r_dop=float(odometry.get('r_dop', odometry_defaults.r_dop)),
                    r_gyro=np.diag(odometry.get('r_gyro_diag', np.diag(odometry_defaults.r_gyro))).astype(float),
                    integration_steps=int(odometry.get('integration_steps', odometry_defaults.integration_steps)),
                    doppler_outlier_sigma=float(odometry.get('doppler_outlier_sigma',
                                                             odometry_defaults.doppler_outlier_sigma)),
                    cold_start_scale=float(odometry.get('cold_start_scale', odometry_defaults.cold_start_scale)),
                    max_condition=float(odometry.get('max_condition', odometry_defaults.max_condition)),
                ).validate(),
                doppler_bias=DopplerBiasModel(doppler_bias.get('coeffs', defaults.doppler_bias.coefficients)),
                gyro_bias=GyroBiasState(
                    ema_weight=float(gyro_bias.get('zeta', defaults.gyro_bias.ema_weight)),
                    min_update_interval=float(gyro_bias.get('min_interval', defaults.gyro_bias.min_update_interval)),
                    consistency_gate=float(gyro_bias.get('gate', defaults.gyro_bias.consistency_gate)),
                ),
                mapping=MapConfig(
                    translation_threshold=float(mapping.get('translation_threshold',
                                                            defaults.mapping.translation_threshold)),
                    rotation_threshold=float(mapping.get('rotation_threshold', defaults.mapping.rotation_threshold)),
                    frames_per_submap=int(mapping.get('frames_per_submap', defaults.mapping.frames_per_submap)),
                ).validate(),
                association=AssociationConfig(
                    knn_k=int(daicp.get('knn_k', defaults.association.knn_k)),
                    beta=float(daicp.get('beta', defaults.association.beta)),
                    sample_cap=int(daicp.get('sample_cap', defaults.association.sample_cap)),
                    distance_gate=float(daicp.get('distance_gate', defaults.association.distance_gate)),
                    residual_gate=float(daicp.get('residual_gate', defaults.association.residual_gate)),
                    seed=int(daicp.get('seed', defaults.association.seed)),
                ).validate(),
                noise=NoiseConfig(
                    range_std=float(noise.get('range_std', defaults.noise.range_std)),
                    bearing_std=float(noise.get('bearing_std', defaults.noise.bearing_std)),
                    sigma_m=float(noise.get('sigma_m', defaults.noise.sigma_m)),
                    sigma_n=float(noise.get('sigma_n', defaults.noise.sigma_n)),
                ),
                degeneracy=DegeneracyConfig(
                    gamma=float(daicp.get('gamma', defaults.degeneracy.gamma)),
                    epsilon=float(daicp.get('epsilon', defaults.degeneracy.epsilon)),
                    max_iterations=int(daicp.get('max_iterations', defaults.degeneracy.max_iterations)),
                    convergence_tol=float(daicp.get('convergence_tol', defaults.degeneracy.convergence_tol)),
                    coarse_tol=float(daicp.get('coarse_tol', defaults.degeneracy.coarse_tol)),
                ).validate(),
                fusion=FusionConfig(
                    cauchy_c=float(daicp.get('cauchy_c', defaults.fusion.cauchy_c)),
                    max_iterations=int(daicp.get('fusion_max_iterations', defaults.fusion.max_iterations)),
                    outlier_gate_t=float(daicp.get('outlier_gate_t', defaults.fusion.outlier_gate_t)),
                    outlier_gate_r=float(daicp.get('outlier_gate_r', defaults.fusion.outlier_gate_r)),
                    min_pairs=int(daicp.get('min_pairs', defaults.fusion.min_pairs)),
                ),
                sensor=SensorSpec(**{key: sensor.get(key, getattr(defaults.sensor, key))
                                     for key in KNOWN_GROUPS['sensor']}).validate(),
                tracker=TrackerConfig(**{key: tracker.get(key, getattr(defaults.tracker, key))
                                         for key in KNOWN_GROUPS['tracker']}).validate(),
                extrinsics=extrinsics_from(extrinsics.get('translation', DEFAULT_EXTRINSIC_TRANSLATION),
                                           extrinsics.get('rpy', DEFAULT_EXTRINSIC_RPY)),
            )
        except ConfigurationError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"Invalid configuration: {e}") from e
        return config
