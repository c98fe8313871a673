from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from classes.lie_group import Pose

BASE_COLUMNS = ['x', 'y', 'z', 'radial_velocity', 'timestamp']
NORMAL_COLUMNS = ['nx', 'ny', 'nz']
OPTIONAL_COLUMNS = NORMAL_COLUMNS + ['curvature', 'cluster']

# cluster ids: 0 is the planar cluster, -1 marks points removed by the size criterion
PLANAR_CLUSTER = 0
REMOVED_CLUSTER = -1


@dataclass
class Point:
    position: np.ndarray
    radial_velocity: float = 0.0
    timestamp: float = 0.0
    normal: Optional[np.ndarray] = None
    curvature: Optional[float] = None
    cluster_id: Optional[int] = None


@dataclass
class CurvatureConfig:
    knn_k: int = 8
    flat_threshold: float = 0.05
    cluster_radius: float = 0.5
    min_cluster_size: int = 5
    coarse_voxel: float = 1.0
    fine_voxel: float = 0.1
    uniform_voxel: float = 0.3

    def validate(self):
        if self.knn_k < 6:
            raise ValueError(f"knn_k must be at least 6 for the quadratic fit, got {self.knn_k}")
        if not self.coarse_voxel > self.fine_voxel > 0:
            raise ValueError("Voxel sizes must satisfy coarse_voxel > fine_voxel > 0")
        if self.uniform_voxel <= 0:
            raise ValueError("uniform_voxel must be positive")
        return self


class Cloud:
    """
    An ordered point cloud stored as a pandas DataFrame with one row per point.

    The frame holds the CSV columns x, y, z, radial_velocity, timestamp and, once computed, nx, ny, nz, curvature
    and cluster. A KD-tree over the positions is built lazily on first query.
    """

    def __init__(self, points: Optional[pd.DataFrame] = None, frame_id: str = 'sensor', sensor_origin=None):
        if points is None:
            points = pd.DataFrame(columns=BASE_COLUMNS, dtype=float)
        missing = [column for column in BASE_COLUMNS if column not in points.columns]
        for column in missing:
            points[column] = 0.0
        self.points = points.reset_index(drop=True)
        self.frame_id = frame_id
        self.sensor_origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=float)
        self._tree = None

    @classmethod
    def from_arrays(cls, positions, radial_velocity=None, timestamp=None, frame_id='sensor', sensor_origin=None,
                    **attributes) -> 'Cloud':
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n_points = len(positions)
        data = {
            'x': positions[:, 0],
            'y': positions[:, 1],
            'z': positions[:, 2],
            'radial_velocity': np.zeros(n_points) if radial_velocity is None else np.asarray(radial_velocity, float),
            'timestamp': np.zeros(n_points) if timestamp is None else np.asarray(timestamp, float),
        }
        normals = attributes.pop('normals', None)
        if normals is not None:
            normals = np.asarray(normals, dtype=float).reshape(-1, 3)
            data.update({'nx': normals[:, 0], 'ny': normals[:, 1], 'nz': normals[:, 2]})
        for name, values in attributes.items():
            if values is not None:
                data[name] = np.asarray(values)
        return cls(pd.DataFrame(data), frame_id=frame_id, sensor_origin=sensor_origin)

    @classmethod
    def from_points(cls, points: List[Point], frame_id='sensor', sensor_origin=None) -> 'Cloud':
        rows = []
        for point in points:
            row = {'x': point.position[0], 'y': point.position[1], 'z': point.position[2],
                   'radial_velocity': point.radial_velocity, 'timestamp': point.timestamp}
            if point.normal is not None:
                row.update({'nx': point.normal[0], 'ny': point.normal[1], 'nz': point.normal[2]})
            if point.curvature is not None:
                row['curvature'] = point.curvature
            if point.cluster_id is not None:
                row['cluster'] = point.cluster_id
            rows.append(row)
        frame = pd.DataFrame(rows) if rows else None
        return cls(frame, frame_id=frame_id, sensor_origin=sensor_origin)

    def __len__(self):
        return len(self.points)

    def is_empty(self) -> bool:
        return len(self.points) == 0

    @property
    def positions(self) -> np.ndarray:
        return self.points[['x', 'y', 'z']].to_numpy(dtype=float)

    @property
    def normals(self) -> Optional[np.ndarray]:
        if not self.has_normals():
            return None
        return self.points[NORMAL_COLUMNS].to_numpy(dtype=float)

    @property
    def curvatures(self) -> Optional[np.ndarray]:
        if not self.has_curvature():
            return None
        return self.points['curvature'].to_numpy(dtype=float)

    @property
    def clusters(self) -> Optional[np.ndarray]:
        if 'cluster' not in self.points.columns:
            return None
        return self.points['cluster'].to_numpy(dtype=int)

    @property
    def radial_velocities(self) -> np.ndarray:
        return self.points['radial_velocity'].to_numpy(dtype=float)

    @property
    def timestamps(self) -> np.ndarray:
        return self.points['timestamp'].to_numpy(dtype=float)

    def has_normals(self) -> bool:
        return all(column in self.points.columns for column in NORMAL_COLUMNS)

    def has_curvature(self) -> bool:
        return 'curvature' in self.points.columns

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def point(self, index: int) -> Point:
        row = self.points.iloc[index]
        normal = row[NORMAL_COLUMNS].to_numpy(dtype=float) if self.has_normals() else None
        curvature = float(row['curvature']) if self.has_curvature() else None
        cluster = int(row['cluster']) if 'cluster' in self.points.columns else None
        return Point(position=row[['x', 'y', 'z']].to_numpy(dtype=float),
                     radial_velocity=float(row['radial_velocity']), timestamp=float(row['timestamp']),
                     normal=normal, curvature=curvature, cluster_id=cluster)

    def with_columns(self, **columns) -> 'Cloud':
        frame = self.points.copy()
        for name, values in columns.items():
            if name == 'normals':
                values = np.asarray(values, dtype=float).reshape(-1, 3)
                frame['nx'], frame['ny'], frame['nz'] = values[:, 0], values[:, 1], values[:, 2]
            else:
                frame[name] = values
        return Cloud(frame, frame_id=self.frame_id, sensor_origin=self.sensor_origin)

    def subset(self, indices) -> 'Cloud':
        indices = np.asarray(indices, dtype=int)
        return Cloud(self.points.iloc[indices].copy(), frame_id=self.frame_id, sensor_origin=self.sensor_origin)

    def transformed(self, pose: Pose, frame_id: Optional[str] = None) -> 'Cloud':
        """
        Expresses the cloud in another frame. Positions, normals and the sensor origin are transformed; scalar
        attributes (curvature is rigid-invariant) are carried over untouched.

        Parameters:
        :param pose: Pose T_{new,current} mapping current coordinates into the new frame.
        :param frame_id: Identifier of the new frame; keeps the current one when omitted.

        Returns:
        :return: A new Cloud.
        """
        frame = self.points.copy()
        if len(frame):
            moved = pose.transform_points(self.positions)
            frame['x'], frame['y'], frame['z'] = moved[:, 0], moved[:, 1], moved[:, 2]
            if self.has_normals():
                rotated = self.normals @ pose.rotation.T
                frame['nx'], frame['ny'], frame['nz'] = rotated[:, 0], rotated[:, 1], rotated[:, 2]
        origin = pose.transform_points(self.sensor_origin[None, :])[0]
        return Cloud(frame, frame_id=frame_id or self.frame_id, sensor_origin=origin)

    @staticmethod
    def concatenate(clouds: List['Cloud'], frame_id: str, sensor_origin=None) -> 'Cloud':
        frames = [cloud.points for cloud in clouds if len(cloud)]
        if not frames:
            return Cloud(frame_id=frame_id, sensor_origin=sensor_origin)
        return Cloud(pd.concat(frames, ignore_index=True), frame_id=frame_id, sensor_origin=sensor_origin)

    def to_csv(self, path: str):
        columns = BASE_COLUMNS + [column for column in OPTIONAL_COLUMNS if column in self.points.columns]
        self.points[columns].to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def from_csv(cls, path: str, frame_id: str = 'sensor', sensor_origin=None) -> 'Cloud':
        frame = pd.read_csv(path)
        if 'cluster' in frame.columns:
            frame['cluster'] = frame['cluster'].astype(int)
        return cls(frame, frame_id=frame_id, sensor_origin=sensor_origin)
