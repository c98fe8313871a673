"""
Closed-loop teach and repeat runs in a simulated world.

The teach pass drives the route with a ground-truth pure-pursuit tracker, runs odometry, and builds the teach
graph with one submap per vertex. The repeat pass steers from the pipeline's own estimate of where the robot is
relative to the taught path, so estimation errors feed back into the driven trajectory.
"""
import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d
from scipy.spatial import cKDTree
from tqdm import tqdm

from classes.cloud_processor import CloudProcessor
from classes.config_manager import PipelineConfig, TrackerConfig
from classes.degeneracy_icp import DegeneracyAwareIcp, LocalizationResult
from classes.doppler_odometry import (DopplerOdometry, GyroBiasState, GyroMeasurement, PoseWithCovariance,
                                      calibrate_gyro_bias_static, mean_gyro, update_gyro_bias_online)
from classes.exceptions import InvalidArgumentError, TeachRepeatError
from classes.graph_store_manager import BAR_FORMAT, GraphStoreManager
from classes.icp_odometry import IcpOdometry
from classes.lidar_simulator import (LinearTwistProfile, TrajectorySpec, World, generate_gyro, generate_scan)
from classes.lie_group import Pose, SE3
from classes.pose_graph import SpatialEdge, TeachRepeatGraph, accumulate_submap, maybe_create_vertex

logger = logging.getLogger(__name__)

COMPLETED = 'Completed'
FAILED = 'Failed'
PATH_SPACING = 0.1
MIN_PATH_STEP = 1e-3
ANCHOR_COVARIANCE = 1e-6
ORACLE_COVARIANCE = 1e-8
DEGENERACY_COLUMNS = (['frame', 'ell'] + [f"lam{i}" for i in range(1, 7)] + ['ndegen', 'accepted']
                      + ['time', 'teach_vertex', 'num_pairs'])
GT_COLUMNS = ['pass', 'frame', 'time', 'x', 'y', 'yaw']
EST_COLUMNS = GT_COLUMNS + ['teach_vertex', 'accepted']
EVENT_COLUMNS = ['pass', 'frame', 'time', 'event', 'detail']


@dataclass(frozen=True)
class VariantSpec:
    id: int
    name: str
    preprocessing: str
    odometry: str
    localization: str

    def __post_init__(self):
        if self.preprocessing not in ('curvature', 'uniform'):
            raise InvalidArgumentError(f"Unknown preprocessing '{self.preprocessing}'")
        if self.odometry not in ('doppler', 'icp'):
            raise InvalidArgumentError(f"Unknown odometry '{self.odometry}'")
        if self.localization not in ('da-icp', 'plain-icp', 'oracle'):
            raise InvalidArgumentError(f"Unknown localization '{self.localization}'")

    @property
    def is_oracle(self) -> bool:
        return self.localization == 'oracle'

    @property
    def degeneracy_aware(self) -> bool:
        return self.localization == 'da-icp'

    @property
    def curvature_association(self) -> bool:
        return self.preprocessing == 'curvature'


VARIANT_PRESETS = {
    0: VariantSpec(0, 'oracle', 'curvature', 'doppler', 'oracle'),
    1: VariantSpec(1, 'curvature-doppler-daicp', 'curvature', 'doppler', 'da-icp'),
    2: VariantSpec(2, 'curvature-doppler-icp', 'curvature', 'doppler', 'plain-icp'),
    3: VariantSpec(3, 'uniform-doppler-icp', 'uniform', 'doppler', 'plain-icp'),
    4: VariantSpec(4, 'uniform-icpodom-icp', 'uniform', 'icp', 'plain-icp'),
}


def variant_preset(variant_id: int) -> VariantSpec:
    if variant_id not in VARIANT_PRESETS:
        raise InvalidArgumentError(f"Unknown pipeline variant {variant_id}; expected one of {sorted(VARIANT_PRESETS)}")
    return VARIANT_PRESETS[variant_id]


def planar_pose(position, heading: float) -> Pose:
    """T_{w,r} of a robot at `position` with yaw `heading`."""
    position = np.asarray(position, dtype=float)
    translation = np.array([position[0], position[1], position[2] if len(position) > 2 else 0.0])
    return Pose(SE3.so3_exp([0.0, 0.0, heading]), translation)


def position_and_heading(world_from_robot: Pose) -> Tuple[np.ndarray, float]:
    rotation = world_from_robot.rotation
    return world_from_robot.translation[:2].copy(), float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def body_twist(speed: float, yaw_rate: float) -> np.ndarray:
    """Twist w with T_{r,w}(t + dt) = exp(dt w^) T_{r,w}(t) for forward speed and yaw rate."""
    return -np.array([speed, 0.0, 0.0, 0.0, 0.0, yaw_rate])


class ReferencePath:
    """
    Planar path with arclength, heading and smoothed curvature per sample.
    """

    def __init__(self, positions, smoothing: int = 5):
        positions = np.asarray(positions, dtype=float)[:, :2]
        kept = [positions[0]]
        for position in positions[1:]:
            if np.linalg.norm(position - kept[-1]) > MIN_PATH_STEP:
                kept.append(position)
        if len(kept) < 2:
            raise InvalidArgumentError("A reference path needs at least two distinct samples")
        self.positions = np.array(kept)
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        self.arclength = np.concatenate([[0.0], np.cumsum(steps)])
        gradient = np.gradient(self.positions, axis=0)
        self.headings = np.unwrap(np.arctan2(gradient[:, 1], gradient[:, 0]))
        if len(self.positions) > 2:
            curvature = np.gradient(self.headings, self.arclength)
            self.curvatures = uniform_filter1d(curvature, size=min(smoothing, len(curvature)), mode='nearest')
        else:
            self.curvatures = np.zeros(len(self.positions))

    @classmethod
    def from_polyline(cls, vertices, spacing: float = PATH_SPACING) -> 'ReferencePath':
        vertices = np.asarray(vertices, dtype=float)[:, :2]
        samples = [vertices[0]]
        for start, end in zip(vertices[:-1], vertices[1:]):
            count = max(int(np.ceil(np.linalg.norm(end - start) / spacing)), 1)
            samples.extend(start + (end - start) * (i / count) for i in range(1, count + 1))
        return cls(np.array(samples), smoothing=1)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def nearest(self, position, hint: int = 0, back: int = 20, ahead: int = 200) -> int:
        lower = max(hint - back, 0)
        upper = min(hint + ahead, len(self.positions))
        distances = np.linalg.norm(self.positions[lower:upper] - np.asarray(position)[:2], axis=1)
        return lower + int(np.argmin(distances))

    def point_at(self, arclength: float) -> np.ndarray:
        arclength = float(np.clip(arclength, 0.0, self.length))
        return np.array([np.interp(arclength, self.arclength, self.positions[:, 0]),
                         np.interp(arclength, self.arclength, self.positions[:, 1])])


class PathTracker:
    """
    Pure pursuit toward the path point one lookahead ahead of the nearest sample. With feedforward enabled the path
    curvature is added and the pure-pursuit term is taken relative to what it would be on the path, so the tracker
    holds a curved path exactly when it starts on it.
    """

    def __init__(self, path: ReferencePath, config: TrackerConfig, feedforward: bool = True):
        self.path = path
        self.config = config
        self.feedforward = feedforward
        self.index = 0

    @staticmethod
    def _lateral(offset: np.ndarray, heading: float) -> float:
        return float(-np.sin(heading) * offset[0] + np.cos(heading) * offset[1])

    def remaining(self) -> float:
        return self.path.length - float(self.path.arclength[self.index])

    def command(self, position, heading: float) -> Tuple[float, bool]:
        """
        Returns:
        :return: Tuple (commanded path curvature, goal reached).
        """
        path = self.path
        self.index = path.nearest(position, self.index)
        done = self.remaining() < self.config.goal_tolerance
        target = path.point_at(path.arclength[self.index] + self.config.lookahead)
        offset = target - np.asarray(position)[:2]
        distance_squared = max(float(offset @ offset), 1e-6)
        curvature = 2.0 * self._lateral(offset, heading) / distance_squared
        if self.feedforward:
            reference = target - path.positions[self.index]
            reference_squared = max(float(reference @ reference), 1e-6)
            curvature += path.curvatures[self.index] - 2.0 * self._lateral(
                reference, path.headings[self.index]) / reference_squared
        return curvature, done


class GroundTruthVehicle:
    """Planar vehicle whose body twist varies linearly between frames."""

    def __init__(self, world_from_robot: Pose, time: float = 0.0):
        self.robot_from_world = world_from_robot.inverse()
        self.twist = np.zeros(6)
        self.time = time

    @property
    def world_from_robot(self) -> Pose:
        return self.robot_from_world.inverse()

    def advance(self, target_twist: np.ndarray, period: float, substeps: int) -> LinearTwistProfile:
        profile = LinearTwistProfile(self.time, self.time + period, self.twist, target_twist)
        step = period / substeps
        midpoints = self.time + (np.arange(substeps) + 0.5) * step
        for twist in profile.at_times(midpoints):
            self.robot_from_world = SE3.exp_map(step * twist) @ self.robot_from_world
        self.twist = np.asarray(target_twist, dtype=float)
        self.time += period
        return profile


@dataclass
class TeachResult:
    graph: TeachRepeatGraph
    vertex_truth: List[Pose]
    path_samples: List[Tuple[int, np.ndarray]]
    truth_path: np.ndarray
    frames: int


def _read_table(directory: str, name: str, columns: List[str]) -> pd.DataFrame:
    try:
        return pd.read_csv(os.path.join(directory, name))
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)


@dataclass
class RunRecord:
    variant: VariantSpec
    world: str
    seed: int
    status: str = COMPLETED
    reason: str = ''
    gt: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=GT_COLUMNS))
    est: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=EST_COLUMNS))
    degeneracy: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=DEGENERACY_COLUMNS))
    events: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=EVENT_COLUMNS))
    graph: Optional[TeachRepeatGraph] = None
    gamma: float = 80.0

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def save(self, directory: str, show_progress: bool = False) -> str:
        """
        Writes gt.csv, est.csv, degeneracy.csv, events.csv, run.json and the graph directory.
        """
        os.makedirs(directory, exist_ok=True)
        self.gt.to_csv(os.path.join(directory, 'gt.csv'), index=False, float_format='%.17g')
        self.est.to_csv(os.path.join(directory, 'est.csv'), index=False, float_format='%.17g')
        self.degeneracy.to_csv(os.path.join(directory, 'degeneracy.csv'), index=False, float_format='%.17g')
        self.events.to_csv(os.path.join(directory, 'events.csv'), index=False)
        summary = {'variant': self.variant.id, 'variant_name': self.variant.name, 'world': self.world,
                   'seed': self.seed, 'status': self.status, 'reason': self.reason, 'gamma': self.gamma}
        with open(os.path.join(directory, 'run.json'), 'w') as handle:
            json.dump(summary, handle, indent=1)
        if self.graph is not None:
            GraphStoreManager(show_progress).save_graph(self.graph, os.path.join(directory, 'graph'))
        return directory

    @classmethod
    def load(cls, directory: str, with_graph: bool = True) -> 'RunRecord':
        with open(os.path.join(directory, 'run.json')) as handle:
            summary = json.load(handle)
        graph_directory = os.path.join(directory, 'graph')
        graph = None
        if with_graph and os.path.exists(graph_directory):
            graph = GraphStoreManager(show_progress=False).load_graph(graph_directory)
        return cls(variant_preset(int(summary['variant'])), summary['world'], int(summary['seed']),
                   summary['status'], summary.get('reason', ''),
                   _read_table(directory, 'gt.csv', GT_COLUMNS), _read_table(directory, 'est.csv', EST_COLUMNS),
                   _read_table(directory, 'degeneracy.csv', DEGENERACY_COLUMNS),
                   _read_table(directory, 'events.csv', EVENT_COLUMNS), graph, float(summary.get('gamma', 80.0)))


class RunFailure(TeachRepeatError):
    pass


class ClosedLoopRunner:
    """
    Executes one teach pass and one repeat pass of a pipeline variant in a simulated world.
    """

    def __init__(self, world: World, route: TrajectorySpec, variant: VariantSpec, config: PipelineConfig = None,
                 seed: int = 0, show_progress: bool = False):
        self.world = world
        self.route = route
        self.variant = variant
        self.config = config or PipelineConfig()
        self.seed = seed
        self.show_progress = show_progress
        self.processor = CloudProcessor(self.config.cloud)
        self.period = self.config.sensor.period
        self.gt_rows = []
        self.est_rows = []
        self.event_rows = []
        self.degeneracy_rows = []

    # sensing ---------------------------------------------------------------------------------------------

    def _start_pose(self) -> Pose:
        position, heading = self.route.waypoints[0]
        return planar_pose(position, heading)

    def _sense(self, vehicle: GroundTruthVehicle, profile: LinearTwistProfile, pass_id: int, frame: int):
        world_from_sensor = vehicle.world_from_robot @ self.config.extrinsics.T_sr.inverse()
        scan = generate_scan(self.world, world_from_sensor, profile, self.config.sensor, self.config.extrinsics,
                             self.config.doppler_bias, seed=[self.seed, pass_id, frame], time=vehicle.time)
        gyro = self._gyro(profile, pass_id, vehicle.time - self.period, vehicle.time)
        return scan, gyro

    def _gyro(self, profile, pass_id: int, start: float, end: float) -> List[GyroMeasurement]:
        return generate_gyro(profile, self.route, self.config.extrinsics, seed=self.seed * 10 + pass_id,
                             start=start, end=end, rate=self.config.tracker.gyro_rate)

    def _drive(self, vehicle: GroundTruthVehicle, speed: float, yaw_rate: float) -> LinearTwistProfile:
        tracker = self.config.tracker
        yaw_rate = float(np.clip(yaw_rate, -tracker.max_yaw_rate, tracker.max_yaw_rate))
        return vehicle.advance(body_twist(speed, yaw_rate), self.period, tracker.gt_substeps)

    def _speed(self, current: float, tracker: PathTracker, done: bool) -> float:
        """Next forward speed: acceleration-limited, braking so the robot stops near the goal."""
        config = self.config.tracker
        if done:
            target = 0.0
        else:
            braking = np.sqrt(2.0 * config.max_accel * max(tracker.remaining() - config.goal_tolerance, 0.0))
            target = min(config.speed, max(braking, 0.1))
        limit = config.max_accel * self.period
        return float(np.clip(target, current - limit, current + limit))

    def _stationary_start(self, vehicle: GroundTruthVehicle, pass_id: int) -> np.ndarray:
        samples = []
        for _ in range(int(round(self.config.tracker.stationary_time / self.period))):
            profile = self._drive(vehicle, 0.0, 0.0)
            samples.extend(self._gyro(profile, pass_id, vehicle.time - self.period, vehicle.time))
        bias = calibrate_gyro_bias_static(samples, self.config.tracker.stationary_time, minimum_duration=1.0)
        logger.debug(f"Static gyro bias estimate {bias}")
        return bias

    def _make_odometry(self, bias: np.ndarray, time: float):
        config = self.config
        if self.variant.odometry == 'icp':
            odometry = IcpOdometry(config.extrinsics, config.noise, config.association)
            odometry.reset(time)
            return odometry
        state = GyroBiasState(bias, config.gyro_bias.ema_weight, config.gyro_bias.min_update_interval,
                              config.gyro_bias.consistency_gate)
        odometry = DopplerOdometry(config.odometry, config.extrinsics, config.doppler_bias, state)
        odometry.reset(time)
        return odometry

    def _odometry_step(self, odometry, scan, gyro, time: float) -> PoseWithCovariance:
        if isinstance(odometry, IcpOdometry):
            return odometry.step(self.processor.preprocess(scan, self.variant.preprocessing), time)
        return odometry.step(scan, gyro, time)

    # recording -------------------------------------------------------------------------------------------

    def _event(self, pass_name: str, frame: int, time: float, event: str, detail: str = ''):
        self.event_rows.append({'pass': pass_name, 'frame': frame, 'time': time, 'event': event, 'detail': detail})

    def _record(self, pass_name: str, frame: int, vehicle: GroundTruthVehicle, estimate: Optional[Pose],
                teach_vertex: int = -1, accepted: bool = True):
        position, heading = position_and_heading(vehicle.world_from_robot)
        self.gt_rows.append({'pass': pass_name, 'frame': frame, 'time': vehicle.time, 'x': position[0],
                             'y': position[1], 'yaw': heading})
        if estimate is not None:
            est_position, est_heading = position_and_heading(estimate.inverse())
            self.est_rows.append({'pass': pass_name, 'frame': frame, 'time': vehicle.time, 'x': est_position[0],
                                  'y': est_position[1], 'yaw': est_heading, 'teach_vertex': teach_vertex,
                                  'accepted': accepted})

    def _record_degeneracy(self, frame: int, time: float, teach_vertex: int, result: Optional[LocalizationResult],
                           accepted: bool):
        row = {'frame': frame, 'time': time, 'teach_vertex': teach_vertex, 'ell': np.nan, 'ndegen': 0,
               'num_pairs': 0, 'accepted': accepted}
        for i in range(6):
            row[f"lam{i + 1}"] = np.nan
        if result is not None and result.report is not None:
            row['ell'] = result.report.ell
            row['ndegen'] = result.report.num_degenerate
            row['num_pairs'] = result.num_pairs
            for i, value in enumerate(result.report.eigenvalues):
                row[f"lam{i + 1}"] = value
        self.degeneracy_rows.append(row)

    # teach -----------------------------------------------------------------------------------------------

    def _frame_limit(self, length: float) -> int:
        tracker = self.config.tracker
        return int(np.ceil(tracker.frame_limit_factor * (length / tracker.speed + 10.0) / self.period))

    def run_teach(self) -> TeachResult:
        """
        Drives the route once with ground-truth steering and builds the teach graph from odometry.

        Returns:
        :return: TeachResult with the graph, ground-truth vertex poses and the estimated path samples.
        """
        config = self.config
        vehicle = GroundTruthVehicle(self._start_pose())
        bias = self._stationary_start(vehicle, pass_id=0)
        odometry = self._make_odometry(bias, vehicle.time)
        path = ReferencePath.from_polyline(self.route.polyline())
        tracker = PathTracker(path, config.tracker, feedforward=False)
        robot_from_sensor = config.extrinsics.T_sr.inverse()

        graph = TeachRepeatGraph()
        buffer = deque(maxlen=config.mapping.frames_per_submap)
        vertex_from_origin = Pose.identity()
        vertex_truth = []
        samples = []
        truth = []

        def add_vertex(edge: PoseWithCovariance, frame_pose: Pose, time: float):
            frames = [(cloud, frame_pose @ pose.inverse() @ robot_from_sensor) for cloud, pose in buffer]
            submap = accumulate_submap(frames, config.cloud, self.processor,
                                       frame_id=f"teach_{len(graph.teach_vertices)}")
            graph.add_teach_vertex(edge.pose, edge.covariance, submap, time)
            vertex_truth.append(vehicle.robot_from_world)

        frame = 0
        scan, _ = self._sense(vehicle, self._drive(vehicle, 0.0, 0.0), 0, frame)
        odometry.reset(vehicle.time)
        buffer.append((self.processor.downsample_uniform(scan, config.cloud.fine_voxel), Pose.identity()))
        add_vertex(PoseWithCovariance(), Pose.identity(), vehicle.time)
        self._event('teach', frame, vehicle.time, 'vertex_created', 'teach 0')
        if isinstance(odometry, IcpOdometry):
            odometry.step(self.processor.preprocess(scan, self.variant.preprocessing), vehicle.time)

        limit = self._frame_limit(path.length)
        speed = 0.0
        progress = tqdm(total=limit, desc="Teach", bar_format=BAR_FORMAT, disable=not self.show_progress)
        while True:
            position, heading = position_and_heading(vehicle.world_from_robot)
            truth.append(position)
            curvature, done = tracker.command(position, heading)
            speed = self._speed(speed, tracker, done)
            if done and speed == 0.0:
                break
            frame += 1
            progress.update(1)
            if frame > limit:
                progress.close()
                raise RunFailure(f"Teach pass did not reach the goal within {limit} frames")
            profile = self._drive(vehicle, speed, speed * curvature)
            scan, gyro = self._sense(vehicle, profile, 0, frame)
            offset = self._odometry_step(odometry, scan, gyro, vehicle.time)
            frame_pose = offset.pose @ vertex_from_origin
            buffer.append((self.processor.downsample_uniform(scan, config.cloud.fine_voxel), frame_pose))
            samples.append((len(graph.teach_vertices) - 1, offset.pose.inverse().translation))
            self._record('teach', frame, vehicle, frame_pose)
            if maybe_create_vertex(offset.pose, config.mapping):
                add_vertex(offset, frame_pose, vehicle.time)
                vertex_from_origin = frame_pose
                odometry.reset_offset()
                self._event('teach', frame, vehicle.time, 'vertex_created', f"teach {len(graph.teach_vertices) - 1}")
        progress.close()

        if np.linalg.norm(odometry.offset.pose.translation) > 0.5 * config.mapping.translation_threshold:
            add_vertex(odometry.offset, odometry.offset.pose @ vertex_from_origin, vehicle.time)
            self._event('teach', frame, vehicle.time, 'vertex_created', f"teach {len(graph.teach_vertices) - 1}")
        logger.info(f"Teach pass finished after {frame} frames with {len(graph.teach_vertices)} vertices")
        return TeachResult(graph, vertex_truth, samples, np.array(truth), frame)

    # repeat ----------------------------------------------------------------------------------------------

    def reference_path(self, teach: TeachResult) -> ReferencePath:
        """The path the repeat pass follows, in the frame of the first teach vertex."""
        if self.variant.is_oracle:
            world_positions = np.column_stack([teach.truth_path, np.zeros(len(teach.truth_path))])
            return ReferencePath(teach.vertex_truth[0].transform_points(world_positions))
        positions = [np.zeros(3)]
        roots = {}
        for vertex_id, position in teach.path_samples:
            if vertex_id not in roots:
                roots[vertex_id] = teach.graph.teach_vertex_in_root(vertex_id)
            positions.append(roots[vertex_id].transform_points(position[None, :])[0])
        return ReferencePath(np.array(positions))

    def _localizer(self) -> DegeneracyAwareIcp:
        config = self.config
        association = replace(config.association, curvature_association=self.variant.curvature_association)
        degeneracy = replace(config.degeneracy, degeneracy_aware=self.variant.degeneracy_aware)
        return DegeneracyAwareIcp(association, config.noise, degeneracy, config.fusion)

    @staticmethod
    def _candidates(last_match: int, count: int) -> List[int]:
        return [m for m in range(last_match - 1, last_match + 3) if 0 <= m < count]

    def _oracle_localization(self, teach: TeachResult, vehicle: GroundTruthVehicle, last_match: int
                             ) -> Tuple[int, PoseWithCovariance]:
        candidates = self._candidates(last_match, len(teach.vertex_truth))
        relative = [vehicle.robot_from_world @ teach.vertex_truth[m].inverse() for m in candidates]
        best = int(np.argmin([np.linalg.norm(pose.translation) for pose in relative]))
        return candidates[best], PoseWithCovariance(relative[best], ORACLE_COVARIANCE * np.eye(6), vehicle.time)

    def run_repeat(self, teach: TeachResult) -> Tuple[str, str]:
        """
        Re-drives the taught route while localizing against the teach submaps.

        Returns:
        :return: Tuple (status, reason).
        """
        config = self.config
        graph = teach.graph
        vehicle = GroundTruthVehicle(self._start_pose())
        bias = self._stationary_start(vehicle, pass_id=1)
        odometry = self._make_odometry(bias, vehicle.time)
        localizer = self._localizer()
        tracker = PathTracker(self.reference_path(teach), config.tracker, feedforward=True)
        truth_tree = cKDTree(teach.truth_path)
        root_from_world = teach.vertex_truth[0]

        graph.add_repeat_vertex(Pose.identity(), np.zeros((6, 6)),
                                SpatialEdge(0, Pose.identity(), ANCHOR_COVARIANCE * np.eye(6)), vehicle.time)
        if isinstance(odometry, IcpOdometry):
            scan, _ = self._sense(vehicle, self._drive(vehicle, 0.0, 0.0), 1, 0)
            odometry.step(self.processor.preprocess(scan, self.variant.preprocessing), vehicle.time)
            odometry.reset_offset()

        estimate = Pose.identity()
        last_match = 0
        rejections = 0
        last_accepted = None
        gyro_since_accepted = []
        speed = 0.0
        frame = 0
        limit = max(int(config.tracker.frame_limit_factor * teach.frames), self._frame_limit(tracker.path.length))
        progress = tqdm(total=limit, desc="Repeat", bar_format=BAR_FORMAT, disable=not self.show_progress)
        try:
            while True:
                position, heading = position_and_heading(estimate.inverse())
                curvature, done = tracker.command(position, heading)
                speed = self._speed(speed, tracker, done)
                if done and speed == 0.0:
                    return COMPLETED, ''
                frame += 1
                progress.update(1)
                if frame > limit:
                    return FAILED, f"goal not reached within {limit} frames"

                profile = self._drive(vehicle, speed, speed * curvature)
                scan, gyro = self._sense(vehicle, profile, 1, frame)
                gyro_since_accepted.extend(gyro)
                offset = self._odometry_step(odometry, scan, gyro, vehicle.time)
                vertex_id = len(graph.repeat_vertices) - 1

                result = None
                if self.variant.is_oracle:
                    match, localized = self._oracle_localization(teach, vehicle, last_match)
                    accepted = True
                else:
                    match, prior = graph.nearest_teach_vertex(vertex_id, offset,
                                                              self._candidates(last_match, len(graph.teach_vertices)))
                    scan_features = self.processor.preprocess(scan, self.variant.preprocessing)
                    result = localizer.localize(scan_features, graph.teach_vertices[match].submap, prior,
                                                config.extrinsics.T_sr, graph.vertex_from_teach(vertex_id, match).pose)
                    accepted = result.accepted
                    localized = result.fused_map_pose if accepted else prior
                    if not accepted:
                        self._event('repeat', frame, vehicle.time,
                                    'rejected' if result.available else 'unavailable', f"teach {match}")
                self._record_degeneracy(frame, vehicle.time, match, result, accepted)

                if accepted:
                    last_match = match
                    rejections = 0
                else:
                    rejections += 1
                if self.variant.is_oracle:
                    estimate = vehicle.robot_from_world @ root_from_world.inverse()
                else:
                    estimate = localized.pose @ graph.teach_transform(match, 0).pose

                if accepted and isinstance(odometry, DopplerOdometry) and not self.variant.is_oracle:
                    if last_accepted is not None and vehicle.time - last_accepted[0] > \
                            odometry.bias_state.min_update_interval:
                        odometry.bias_state = update_gyro_bias_online(
                            odometry.bias_state, estimate, last_accepted[1], vehicle.time - last_accepted[0],
                            mean_gyro(gyro_since_accepted), config.extrinsics.rotation_sr)
                        last_accepted = None
                    if last_accepted is None:
                        last_accepted = (vehicle.time, estimate)
                        gyro_since_accepted = []

                if maybe_create_vertex(offset.pose, config.mapping):
                    spatial = SpatialEdge(match, localized.pose, localized.covariance) if accepted else None
                    graph.add_repeat_vertex(offset.pose, offset.covariance, spatial, vehicle.time)
                    odometry.reset_offset()
                    self._event('repeat', frame, vehicle.time, 'vertex_created',
                                f"repeat {len(graph.repeat_vertices) - 1}" + (f" -> teach {match}" if spatial else ""))

                self._record('repeat', frame, vehicle, estimate, match, accepted)
                position, _ = position_and_heading(vehicle.world_from_robot)
                deviation, _ = truth_tree.query(position)
                if deviation > config.tracker.lateral_failure:
                    return FAILED, f"lateral deviation {deviation:.2f} m exceeds {config.tracker.lateral_failure} m"
                if rejections > config.tracker.max_consecutive_rejections:
                    return FAILED, f"{rejections} consecutive localization rejections"
        finally:
            progress.close()

    def run(self, teach_only: bool = False) -> RunRecord:
        """Runs the teach pass and, unless `teach_only`, the repeat pass. Failures end the run as Failed."""
        record = RunRecord(self.variant, self.world.identifier, self.seed, gamma=self.config.degeneracy.gamma)
        teach = None
        try:
            teach = self.run_teach()
            if not teach_only:
                record.status, record.reason = self.run_repeat(teach)
        except TeachRepeatError as e:
            logger.error(f"An error occurred: {e}")
            record.status, record.reason = FAILED, str(e)
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.exception(f"An error occurred: {e}")
            record.status, record.reason = FAILED, f"{type(e).__name__}: {e}"
        if record.status == FAILED:
            self._event('run', -1, float('nan'), 'failed', record.reason)
        record.graph = teach.graph if teach is not None else None
        record.gt = pd.DataFrame(self.gt_rows, columns=GT_COLUMNS)
        record.est = pd.DataFrame(self.est_rows, columns=EST_COLUMNS)
        record.degeneracy = pd.DataFrame(self.degeneracy_rows, columns=DEGENERACY_COLUMNS)
        record.events = pd.DataFrame(self.event_rows, columns=EVENT_COLUMNS)
        logger.info(f"Variant {self.variant.id} on {self.world.identifier} (seed {self.seed}): {record.status}"
                    + (f" ({record.reason})" if record.reason else ''))
        return record


def run_closed_loop(world: World, teach_spec: Optional[TrajectorySpec], pipeline_variant,
                    configs: PipelineConfig = None, seed: int = 0, show_progress: bool = False) -> RunRecord:
    """
    Teach and repeat one variant in a world.

    Parameters:
    :param world: Simulated world.
    :param teach_spec: Route to teach; the world's own route when None.
    :param pipeline_variant: VariantSpec or preset id 0-4.
    :param configs: PipelineConfig.
    :param seed: Noise seed.
    :param show_progress: Show tqdm bars for the passes.

    Returns:
    :return: RunRecord with status Completed or Failed.
    """
    route = teach_spec or world.route
    if route is None:
        raise InvalidArgumentError(f"World '{world.identifier}' has no route and no trajectory was given")
    variant = pipeline_variant if isinstance(pipeline_variant, VariantSpec) else variant_preset(int(pipeline_variant))
    return ClosedLoopRunner(world, route, variant, configs, seed, show_progress).run()
