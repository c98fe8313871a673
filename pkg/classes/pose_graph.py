import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from classes.cloud_processor import CloudProcessor
from classes.doppler_odometry import PoseWithCovariance
from classes.exceptions import GraphError, InvalidArgumentError
from classes.lie_group import Pose, SE3, symmetrize
from classes.point_cloud import Cloud, CurvatureConfig

logger = logging.getLogger(__name__)


@dataclass
class MapConfig:
    translation_threshold: float = 2.0
    rotation_threshold: float = 0.3
    frames_per_submap: int = 5

    def validate(self):
        if self.translation_threshold <= 0 or self.rotation_threshold <= 0:
            raise InvalidArgumentError("Vertex creation thresholds must be positive")
        if self.frames_per_submap < 1:
            raise InvalidArgumentError("frames_per_submap must be at least 1")
        return self


@dataclass
class SpatialEdge:
    """Localization edge T_{v,m}: maps coordinates of teach vertex m into repeat vertex v."""
    teach_id: int
    pose: Pose
    covariance: np.ndarray


@dataclass
class Vertex:
    id: int
    pose_from_prev: Pose = field(default_factory=Pose.identity)
    edge_covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    submap: Optional[Cloud] = None
    spatial_edge: Optional[SpatialEdge] = None
    time: float = 0.0


def maybe_create_vertex(current_offset: Pose, config: MapConfig) -> bool:
    """True iff the offset from the latest vertex strictly exceeds the translation or rotation threshold."""
    return bool(np.linalg.norm(current_offset.translation) > config.translation_threshold
                or current_offset.rotation_angle() > config.rotation_threshold)


def compose_with_covariance(left: PoseWithCovariance, right: PoseWithCovariance) -> PoseWithCovariance:
    """
    Product left * right of two independent uncertain poses under left perturbations.

    Parameters:
    :param left: Left factor T_a with covariance.
    :param right: Right factor T_b with covariance.

    Returns:
    :return: T_a T_b with covariance S_a + Ad(T_a) S_b Ad(T_a)^T.
    """
    transport = SE3.adjoint(left.pose)
    covariance = symmetrize(left.covariance + transport @ right.covariance @ transport.T)
    return PoseWithCovariance(left.pose @ right.pose, covariance, left.time)


def invert_with_covariance(value: PoseWithCovariance) -> PoseWithCovariance:
    inverse = value.pose.inverse()
    transport = SE3.adjoint(inverse)
    return PoseWithCovariance(inverse, symmetrize(transport @ value.covariance @ transport.T), value.time)


def compound(chain: Sequence[PoseWithCovariance]) -> PoseWithCovariance:
    """Left-to-right product of a chain of uncertain poses, folded from the right end."""
    if not chain:
        return PoseWithCovariance()
    result = chain[-1]
    for edge in reversed(chain[:-1]):
        result = compose_with_covariance(edge, result)
    return result


def accumulate_submap(frames: Sequence[Tuple[Cloud, Pose]], config: CurvatureConfig,
                      processor: CloudProcessor = None, frame_id: str = 'vertex') -> Cloud:
    """
    Builds a submap in a vertex frame from the most recent frames.

    Parameters:
    :param frames: List of (cloud, T_{v,cloud}) pairs, each pose mapping the cloud's frame into the vertex frame.
    :param config: CurvatureConfig; fine_voxel sets the submap resolution.
    :param processor: CloudProcessor used for downsampling and feature computation.
    :param frame_id: Identifier given to the submap frame.

    Returns:
    :return: Cloud in the vertex frame with normals and curvatures recomputed after downsampling.
    """
    if not frames:
        raise InvalidArgumentError("accumulate_submap needs at least one frame")
    processor = processor or CloudProcessor(config)
    moved = [cloud.transformed(pose, frame_id=frame_id) for cloud, pose in frames]
    origin = moved[-1].sensor_origin
    union = Cloud.concatenate(moved, frame_id=frame_id, sensor_origin=origin)
    kept = processor.downsample_uniform(union, config.fine_voxel)
    return processor.compute_features(kept, config)


class TeachRepeatGraph:
    """
    Pose graph of one teach pass (a chain of vertices with submaps) and one repeat pass whose vertices may carry
    spatial edges to teach vertices. Edges store T_{v,v-1}, mapping the previous vertex frame into the new one.
    """

    def __init__(self):
        self.teach_vertices: List[Vertex] = []
        self.repeat_vertices: List[Vertex] = []

    def add_teach_vertex(self, pose_from_prev: Pose, edge_covariance, submap: Cloud, time: float = 0.0) -> Vertex:
        if submap is None:
            raise GraphError("Teach vertices require a submap")
        vertex = Vertex(len(self.teach_vertices), pose_from_prev, np.asarray(edge_covariance, dtype=float),
                        submap, None, time)
        self.teach_vertices.append(vertex)
        return vertex

    def add_repeat_vertex(self, pose_from_prev: Pose, edge_covariance, spatial_edge: Optional[SpatialEdge] = None,
                          time: float = 0.0) -> Vertex:
        if spatial_edge is not None:
            self._check_teach_id(spatial_edge.teach_id)
        vertex = Vertex(len(self.repeat_vertices), pose_from_prev, np.asarray(edge_covariance, dtype=float),
                        None, spatial_edge, time)
        self.repeat_vertices.append(vertex)
        return vertex

    def _check_teach_id(self, teach_id: int):
        if not 0 <= teach_id < len(self.teach_vertices):
            raise GraphError(f"Teach vertex {teach_id} does not exist")

    def _check_repeat_id(self, repeat_id: int):
        if not 0 <= repeat_id < len(self.repeat_vertices):
            raise GraphError(f"Repeat vertex {repeat_id} does not exist")

    @staticmethod
    def _edge(vertex: Vertex) -> PoseWithCovariance:
        return PoseWithCovariance(vertex.pose_from_prev, vertex.edge_covariance, vertex.time)

    def teach_transform(self, to_id: int, from_id: int) -> PoseWithCovariance:
        """T_{to,from} along the teach chain."""
        self._check_teach_id(to_id)
        self._check_teach_id(from_id)
        if to_id >= from_id:
            chain = [self._edge(self.teach_vertices[i]) for i in range(to_id, from_id, -1)]
        else:
            chain = [invert_with_covariance(self._edge(self.teach_vertices[i]))
                     for i in range(to_id + 1, from_id + 1)]
        return compound(chain)

    def repeat_transform(self, to_id: int, from_id: int) -> PoseWithCovariance:
        """T_{to,from} back along the repeat chain; requires to_id >= from_id."""
        self._check_repeat_id(to_id)
        self._check_repeat_id(from_id)
        if to_id < from_id:
            raise GraphError(f"Repeat chain only runs backwards, got {to_id} < {from_id}")
        return compound([self._edge(self.repeat_vertices[i]) for i in range(to_id, from_id, -1)])

    def latest_anchor(self, repeat_id: int) -> int:
        self._check_repeat_id(repeat_id)
        for vertex_id in range(repeat_id, -1, -1):
            if self.repeat_vertices[vertex_id].spatial_edge is not None:
                return vertex_id
        raise GraphError(f"No repeat vertex at or before {repeat_id} has a spatial edge")

    def vertex_from_teach(self, current_vertex: int, target_teach_vertex: int) -> PoseWithCovariance:
        """T_{v,m}: the prior chain from teach vertex m to repeat vertex v without the odometry offset."""
        anchor_id = self.latest_anchor(current_vertex)
        spatial = self.repeat_vertices[anchor_id].spatial_edge
        chain = [self.repeat_transform(current_vertex, anchor_id),
                 PoseWithCovariance(spatial.pose, spatial.covariance),
                 self.teach_transform(spatial.teach_id, target_teach_vertex)]
        return compound(chain)

    def compound_prior(self, current_vertex: int, target_teach_vertex: int,
                       odometry_offset: PoseWithCovariance) -> PoseWithCovariance:
        """
        Localization prior T_{k,m} = T_{k,v} T_{v,v'} T_{v',m'} T_{m',m} with adjoint-transported covariance.

        Parameters:
        :param current_vertex: Id of the latest repeat vertex v.
        :param target_teach_vertex: Id of the teach vertex m to localize against.
        :param odometry_offset: Odometry estimate T_{k,v} with covariance.

        Returns:
        :return: PoseWithCovariance of T_{k,m}, time taken from the odometry offset.
        """
        prior = compose_with_covariance(odometry_offset, self.vertex_from_teach(current_vertex, target_teach_vertex))
        prior.time = odometry_offset.time
        return prior

    def nearest_teach_vertex(self, current_vertex: int, odometry_offset: PoseWithCovariance,
                             candidates: Sequence[int]) -> Tuple[int, PoseWithCovariance]:
        """Candidate teach vertex closest to the current pose by prior translation, ties to the lower id."""
        best = None
        for teach_id in sorted(set(candidates)):
            if not 0 <= teach_id < len(self.teach_vertices):
                continue
            prior = self.compound_prior(current_vertex, teach_id, odometry_offset)
            distance = np.linalg.norm(prior.pose.translation)
            if best is None or distance < best[0]:
                best = (distance, teach_id, prior)
        if best is None:
            raise GraphError("No candidate teach vertex exists")
        return best[1], best[2]

    def teach_vertex_in_root(self, teach_id: int) -> Pose:
        """T_{0,m}: teach vertex m expressed in the first teach vertex frame."""
        return self.teach_transform(0, teach_id).pose
