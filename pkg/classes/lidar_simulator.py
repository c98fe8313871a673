"""
Synthetic worlds and an FMCW lidar / gyro simulator.

Worlds are made of planes (optionally bounded to a rectangle) and axis-aligned ellipsoid rocks. Beams are laid out
as elevation rows by azimuth columns, with direction (cos(el) cos(az), cos(el) sin(az), sin(el)) in the sensor
frame. Radial velocities follow the same body-twist convention as the odometry, so noise-free measurements have
zero residual at the true twist.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import yaml

from classes.doppler_odometry import DopplerBiasModel, Extrinsics, GyroMeasurement, doppler_jacobian
from classes.exceptions import ConfigurationError, InvalidArgumentError
from classes.lie_group import Pose
from classes.point_cloud import Cloud

logger = logging.getLogger(__name__)

WORLD_DIRECTORY = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'worlds')
RAY_EPSILON = 1e-9
PARALLEL_TOLERANCE = 1e-12

TwistProfile = Union[np.ndarray, Callable[[float], np.ndarray], 'LinearTwistProfile']


def _unit(vector) -> np.ndarray:
    vector = np.asarray(vector, dtype=float).reshape(3)
    norm = np.linalg.norm(vector)
    if not norm > 0:
        raise InvalidArgumentError("Direction vectors must be non-zero")
    return vector / norm


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    extent: Optional[np.ndarray] = None

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        self.normal = _unit(self.normal)
        if self.extent is not None:
            self.extent = np.asarray(self.extent, dtype=float).reshape(2)
            if np.any(self.extent <= 0):
                raise InvalidArgumentError("Plane half-extents must be positive")

    def in_plane_axes(self) -> Tuple[np.ndarray, np.ndarray]:
        reference = np.array([0.0, 0.0, 1.0]) if abs(self.normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        first = np.cross(reference, self.normal)
        first /= np.linalg.norm(first)
        return first, np.cross(self.normal, first)


@dataclass
class Rock:
    center: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.axes = np.broadcast_to(np.asarray(self.axes, dtype=float), (3,)).copy()
        if np.any(self.axes <= 0):
            raise InvalidArgumentError("Rock radii must be positive")


@dataclass
class TrajectorySpec:
    waypoints: List[Tuple[np.ndarray, float]]
    speed: float = 1.0
    gyro_bias_true: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_noise_std: float = 0.0

    def __post_init__(self):
        self.waypoints = [(np.asarray(position, dtype=float).reshape(3), float(heading))
                          for position, heading in self.waypoints]
        self.gyro_bias_true = np.asarray(self.gyro_bias_true, dtype=float).reshape(3)
        if len(self.waypoints) < 2:
            raise InvalidArgumentError("A trajectory needs at least two waypoints")
        for (first, _), (second, _) in zip(self.waypoints[:-1], self.waypoints[1:]):
            if np.allclose(first, second):
                raise InvalidArgumentError("Consecutive waypoints must be distinct")
        if self.speed <= 0:
            raise InvalidArgumentError("Trajectory speed must be positive")

    def polyline(self) -> np.ndarray:
        return np.array([position for position, _ in self.waypoints])


@dataclass
class World:
    planes: List[Plane] = field(default_factory=list)
    rocks: List[Rock] = field(default_factory=list)
    identifier: str = 'world'
    route: Optional[TrajectorySpec] = None

    @classmethod
    def from_dict(cls, data: dict, identifier: str = 'world') -> 'World':
        planes = [Plane(entry['point'], entry['normal'], entry.get('extent')) for entry in data.get('planes', [])]
        rocks = []
        for entry in data.get('rocks', []):
            axes = entry.get('axes', entry.get('radius'))
            if axes is None:
                raise ConfigurationError("Every rock needs 'axes' or 'radius'")
            rocks.append(Rock(entry['center'], axes))
        route = None
        if data.get('route') is not None:
            route_data = data['route']
            waypoints = [(entry[:3], entry[3] if len(entry) > 3 else 0.0) for entry in route_data['waypoints']]
            route = TrajectorySpec(waypoints, route_data.get('speed', 1.0),
                                   route_data.get('gyro_bias_true', [0.0, 0.0, 0.0]),
                                   route_data.get('gyro_noise_std', 0.0))
        return cls(planes, rocks, data.get('name', identifier), route)

    def to_dict(self) -> dict:
        data = {
            'name': self.identifier,
            'planes': [{'point': plane.point.tolist(), 'normal': plane.normal.tolist(),
                        'extent': None if plane.extent is None else plane.extent.tolist()} for plane in self.planes],
            'rocks': [{'center': rock.center.tolist(), 'axes': rock.axes.tolist()} for rock in self.rocks],
        }
        if self.route is not None:
            data['route'] = {
                'waypoints': [position.tolist() + [heading] for position, heading in self.route.waypoints],
                'speed': self.route.speed,
                'gyro_bias_true': self.route.gyro_bias_true.tolist(),
                'gyro_noise_std': self.route.gyro_noise_std,
            }
        return data


def load_world(name_or_path: str) -> World:
    """
    Loads a world from a YAML file, or from the bundled presets when given a bare preset name.

    Parameters:
    :param name_or_path: Preset name (airport, flat, campus, planetary) or a path to a YAML world file.

    Returns:
    :return: The parsed World.
    """
    path = name_or_path
    if not os.path.exists(path):
        path = os.path.join(WORLD_DIRECTORY, f"{name_or_path}.yaml")
    if not os.path.exists(path):
        raise ConfigurationError(f"Unknown world '{name_or_path}'")
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Could not parse world file {path}: {e}") from e
    identifier = os.path.splitext(os.path.basename(path))[0]
    world = World.from_dict(data, identifier)
    logger.debug(f"Loaded world '{world.identifier}' with {len(world.planes)} planes and {len(world.rocks)} rocks")
    return world


@dataclass
class SensorSpec:
    horizontal_fov: float = 120.0
    vertical_fov: float = 19.2
    max_range: float = 40.0
    rate: float = 10.0
    rows: int = 32
    cols: int = 400
    range_noise_std: float = 0.002
    doppler_noise_std: float = 0.05

    def validate(self):
        if self.horizontal_fov <= 0 or self.vertical_fov <= 0 or self.max_range <= 0 or self.rate <= 0:
            raise InvalidArgumentError("SensorSpec requires positive fields of view, range and rate")
        if self.rows < 1 or self.cols < 1:
            raise InvalidArgumentError("SensorSpec needs at least one beam row and column")
        return self

    @property
    def period(self) -> float:
        return 1.0 / self.rate

    def beam_directions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit beam directions in the sensor frame (row-major) and the column index of each beam."""
        elevations = np.radians(np.linspace(-self.vertical_fov / 2.0, self.vertical_fov / 2.0, self.rows))
        azimuths = np.radians(np.linspace(-self.horizontal_fov / 2.0, self.horizontal_fov / 2.0, self.cols))
        elevation_grid, azimuth_grid = np.meshgrid(elevations, azimuths, indexing='ij')
        directions = np.stack([np.cos(elevation_grid) * np.cos(azimuth_grid),
                               np.cos(elevation_grid) * np.sin(azimuth_grid),
                               np.sin(elevation_grid)], axis=-1).reshape(-1, 3)
        columns = np.tile(np.arange(self.cols), self.rows)
        return directions, columns


def _intersect_planes(planes: List[Plane], origin: np.ndarray, directions: np.ndarray, distances: np.ndarray,
                      normals: np.ndarray):
    for plane in planes:
        denominators = directions @ plane.normal
        valid = np.abs(denominators) > PARALLEL_TOLERANCE
        with np.errstate(divide='ignore', invalid='ignore'):
            t = np.where(valid, ((plane.point - origin) @ plane.normal) / denominators, np.inf)
        valid &= t > RAY_EPSILON
        if plane.extent is not None:
            first, second = plane.in_plane_axes()
            offsets = origin + np.where(valid, t, 0.0)[:, None] * directions - plane.point
            valid &= (np.abs(offsets @ first) <= plane.extent[0]) & (np.abs(offsets @ second) <= plane.extent[1])
        closer = valid & (t < distances)
        distances[closer] = t[closer]
        facing = -np.sign(denominators[closer])
        normals[closer] = facing[:, None] * plane.normal


def _intersect_rocks(rocks: List[Rock], origin: np.ndarray, directions: np.ndarray, distances: np.ndarray,
                     normals: np.ndarray):
    for rock in rocks:
        # unit-sphere test in coordinates scaled by the ellipsoid radii
        local_origin = (origin - rock.center) / rock.axes
        local_directions = directions / rock.axes
        a = np.sum(local_directions ** 2, axis=1)
        b = local_directions @ local_origin
        c = local_origin @ local_origin - 1.0
        discriminant = b * b - a * c
        hit = discriminant >= 0.0
        root = np.sqrt(np.where(hit, discriminant, 0.0))
        near = (-b - root) / a
        far = (-b + root) / a
        t = np.where(near > RAY_EPSILON, near, far)
        hit &= t > RAY_EPSILON
        closer = hit & (t < distances)
        if not np.any(closer):
            continue
        distances[closer] = t[closer]
        points = origin + t[closer][:, None] * directions[closer]
        gradients = (points - rock.center) / rock.axes ** 2
        normals[closer] = gradients / np.linalg.norm(gradients, axis=1, keepdims=True)


def ray_cast_batch(world: World, origin, directions, max_range: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest intersection of many rays from one origin.

    Parameters:
    :param world: World to cast into.
    :param origin: Ray origin, world frame.
    :param directions: (N, 3) unit directions, world frame.
    :param max_range: Hits farther than this are discarded.

    Returns:
    :return: Tuple (distances, normals); misses have distance inf and a zero normal.
    """
    origin = np.asarray(origin, dtype=float).reshape(3)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    distances = np.full(len(directions), np.inf)
    normals = np.zeros((len(directions), 3))
    _intersect_planes(world.planes, origin, directions, distances, normals)
    _intersect_rocks(world.rocks, origin, directions, distances, normals)
    out_of_range = distances > max_range
    distances[out_of_range] = np.inf
    normals[out_of_range] = 0.0
    return distances, normals


def ray_cast(world: World, origin, direction, max_range: float = np.inf) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Hit point and surface normal (facing the ray origin for planes, outward for rocks), or None on a miss."""
    direction = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise InvalidArgumentError("ray_cast expects a unit direction")
    distances, normals = ray_cast_batch(world, origin, direction[None, :], max_range)
    if not np.isfinite(distances[0]):
        return None
    return np.asarray(origin, dtype=float) + distances[0] * direction, normals[0]


class LinearTwistProfile:
    """Body twist varying linearly from `start_twist` at `start_time` to `end_twist` at `end_time`."""

    def __init__(self, start_time: float, end_time: float, start_twist, end_twist):
        if not end_time > start_time:
            raise InvalidArgumentError("A twist profile needs end_time > start_time")
        self.start_time = start_time
        self.end_time = end_time
        self.start_twist = np.asarray(start_twist, dtype=float).reshape(6)
        self.end_twist = np.asarray(end_twist, dtype=float).reshape(6)

    def at_times(self, times) -> np.ndarray:
        alphas = np.clip((np.asarray(times, dtype=float).reshape(-1) - self.start_time)
                         / (self.end_time - self.start_time), 0.0, 1.0)
        return (1.0 - alphas)[:, None] * self.start_twist + alphas[:, None] * self.end_twist

    def __call__(self, time: float) -> np.ndarray:
        return self.at_times([time])[0]


def _twist_at(twist: TwistProfile, times: np.ndarray) -> np.ndarray:
    if isinstance(twist, LinearTwistProfile):
        return twist.at_times(times)
    if callable(twist):
        return np.array([np.asarray(twist(time), dtype=float) for time in times]).reshape(-1, 6)
    return np.tile(np.asarray(twist, dtype=float).reshape(6), (len(times), 1))


def beam_noise(seed, spec: SensorSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Range and Doppler noise for every beam in raster order. Each laser row draws from its own stream seeded by
    (seed, row), so rows can be simulated independently and a beam's noise never depends on the other rows.

    Parameters:
    :param seed: Integer seed or sequence of integers such as (run seed, pass, frame).
    :param spec: SensorSpec giving the raster and the noise standard deviations.

    Returns:
    :return: Tuple (range noise, Doppler noise), each of length rows * cols.
    """
    entropy = [int(value) for value in np.atleast_1d(seed)]
    range_noise = np.zeros((spec.rows, spec.cols))
    doppler_noise = np.zeros((spec.rows, spec.cols))
    for row in range(spec.rows):
        rng = np.random.default_rng(entropy + [row])
        range_noise[row] = rng.normal(0.0, spec.range_noise_std, spec.cols)
        doppler_noise[row] = rng.normal(0.0, spec.doppler_noise_std, spec.cols)
    return range_noise.reshape(-1), doppler_noise.reshape(-1)


def generate_scan(world: World, world_from_sensor: Pose, twist: TwistProfile, spec: SensorSpec = None,
                  extrinsics: Extrinsics = None, bias_model: DopplerBiasModel = None, seed: int = 0,
                  time: float = 0.0) -> Cloud:
    """
    Simulates one FMCW lidar frame ending at `time`.

    Beam noise comes from beam_noise, so a scan is reproducible from (world, pose, twist, seed) regardless of
    which beams hit.

    Parameters:
    :param world: World to scan.
    :param world_from_sensor: Sensor pose T_{w,s}.
    :param twist: Robot body twist, either constant or a callable of time.
    :param spec: SensorSpec.
    :param extrinsics: Sensor-from-robot extrinsics used in the radial-velocity model.
    :param bias_model: Doppler bias added to every radial velocity.
    :param seed: Noise seed, an integer or a sequence of integers.
    :param time: Frame end time; point timestamps are spread uniformly over the preceding frame period.

    Returns:
    :return: Cloud in the sensor frame with radial velocities and timestamps.
    """
    spec = (spec or SensorSpec()).validate()
    extrinsics = extrinsics or Extrinsics()
    bias_model = bias_model or DopplerBiasModel()

    directions, columns = spec.beam_directions()
    range_noise, doppler_noise = beam_noise(seed, spec)

    world_directions = directions @ world_from_sensor.rotation.T
    distances, _ = ray_cast_batch(world, world_from_sensor.translation, world_directions, spec.max_range)
    hits = np.isfinite(distances)

    ranges = distances[hits] + range_noise[hits]
    positions = ranges[:, None] * directions[hits]
    timestamps = time - spec.period + spec.period * (columns[hits] + 1) / spec.cols
    twists = _twist_at(twist, timestamps)
    rows = doppler_jacobian(positions, extrinsics) if len(positions) else np.zeros((0, 6))
    radial = np.einsum('ni,ni->n', rows, twists) + bias_model.bias(positions) + doppler_noise[hits] \
        if len(positions) else np.zeros(0)
    return Cloud.from_arrays(positions, radial, timestamps, frame_id='sensor')


def generate_gyro(twist_profile: TwistProfile, spec: TrajectorySpec = None, extrinsics: Extrinsics = None,
                  bias_true=None, seed: int = 0, start: float = 0.0, end: float = 1.0,
                  rate: float = 100.0) -> List[GyroMeasurement]:
    """
    Gyro samples y = R_sr D w(t) + b + noise on the global grid t = i / rate for start < t <= end.

    Parameters:
    :param twist_profile: Robot body twist, constant or a callable of time.
    :param spec: TrajectorySpec supplying the default bias and the noise standard deviation.
    :param extrinsics: Sensor-from-robot extrinsics.
    :param bias_true: Bias override.
    :param seed: Noise seed; combined with the first sample index so consecutive windows draw fresh noise.
    :param start: Exclusive window start.
    :param end: Inclusive window end.
    :param rate: Sampling rate in Hz.

    Returns:
    :return: Time-ordered list of GyroMeasurement.
    """
    extrinsics = extrinsics or Extrinsics()
    noise_std = spec.gyro_noise_std if spec is not None else 0.0
    if bias_true is None:
        bias_true = spec.gyro_bias_true if spec is not None else np.zeros(3)
    bias_true = np.asarray(bias_true, dtype=float).reshape(3)
    first = int(np.floor(start * rate + 1e-9)) + 1
    last = int(np.floor(end * rate + 1e-9))
    if last < first:
        return []
    times = np.arange(first, last + 1) / rate
    angular = _twist_at(twist_profile, times)[:, 3:] @ extrinsics.rotation_sr.T
    if noise_std > 0:
        angular = angular + np.random.default_rng([seed, first]).normal(0.0, noise_std, angular.shape)
    readings = angular + bias_true
    return [GyroMeasurement(float(time), reading) for time, reading in zip(times, readings)]
