import json
import logging
import os
from typing import Optional

import numpy as np
from tqdm import tqdm

from classes.exceptions import GraphError
from classes.lie_group import Pose
from classes.point_cloud import Cloud
from classes.pose_graph import SpatialEdge, TeachRepeatGraph, Vertex

logger = logging.getLogger(__name__)

BAR_FORMAT = '{desc}: {percentage:.1f}%|{bar}| {n}/{total} [Elapsed: {elapsed} | Remaining: {remaining} | ' \
             '{rate_fmt}{postfix}]'
INDEX_FILE = 'graph.json'
SUBMAP_DIRECTORY = 'submaps'


def _floats(values) -> list:
    # repr of a Python float round-trips exactly, which keeps the 17-significant-digit guarantee
    return [float(f"{value:.17g}") for value in np.asarray(values, dtype=float).reshape(-1)]


class GraphStoreManager:
    """
    Saves and loads a TeachRepeatGraph as a directory: a JSON index with poses (12 row-major floats) and
    covariances (36 floats), plus one CSV per teach submap.
    """

    def __init__(self, show_progress: bool = True):
        self.show_progress = show_progress

    def _vertex_entry(self, vertex: Vertex, submap_path: Optional[str]) -> dict:
        entry = {
            'id': vertex.id,
            'time': vertex.time,
            'pose_from_prev': _floats(vertex.pose_from_prev.as_row()),
            'edge_covariance': _floats(vertex.edge_covariance),
            'submap': submap_path,
            'sensor_origin': _floats(vertex.submap.sensor_origin) if vertex.submap is not None else None,
            'spatial_edge': None,
        }
        if vertex.spatial_edge is not None:
            entry['spatial_edge'] = {
                'teach_id': vertex.spatial_edge.teach_id,
                'pose': _floats(vertex.spatial_edge.pose.as_row()),
                'covariance': _floats(vertex.spatial_edge.covariance),
            }
        return entry

    def save_graph(self, graph: TeachRepeatGraph, directory: str) -> str:
        """
        Writes the graph directory.

        Parameters:
        :param graph: Graph to persist.
        :param directory: Target directory, created when missing.

        Returns:
        :return: Path of the written JSON index.
        """
        os.makedirs(os.path.join(directory, SUBMAP_DIRECTORY), exist_ok=True)
        index = {'teach': [], 'repeat': []}

        vertices = tqdm(graph.teach_vertices, desc="Saving submaps", bar_format=BAR_FORMAT,
                        disable=not self.show_progress)
        for vertex in vertices:
            relative = os.path.join(SUBMAP_DIRECTORY, f"teach_{vertex.id:05d}.csv")
            vertex.submap.to_csv(os.path.join(directory, relative))
            index['teach'].append(self._vertex_entry(vertex, relative))
        for vertex in graph.repeat_vertices:
            index['repeat'].append(self._vertex_entry(vertex, None))

        index_path = os.path.join(directory, INDEX_FILE)
        with open(index_path, 'w') as handle:
            json.dump(index, handle, indent=1)
        logger.info(f"Saved graph with {len(graph.teach_vertices)} teach and {len(graph.repeat_vertices)} "
                    f"repeat vertices to {directory}")
        return index_path

    @staticmethod
    def _covariance(values) -> np.ndarray:
        return np.asarray(values, dtype=float).reshape(6, 6)

    def load_graph(self, directory: str) -> TeachRepeatGraph:
        """
        Reads a graph directory written by save_graph.

        Parameters:
        :param directory: Graph directory.

        Returns:
        :return: The reconstructed TeachRepeatGraph.
        """
        index_path = os.path.join(directory, INDEX_FILE)
        if not os.path.exists(index_path):
            raise GraphError(f"No graph index found at {index_path}")
        with open(index_path) as handle:
            index = json.load(handle)

        graph = TeachRepeatGraph()
        entries = tqdm(index.get('teach', []), desc="Loading submaps", bar_format=BAR_FORMAT,
                       disable=not self.show_progress)
        for entry in entries:
            submap = Cloud.from_csv(os.path.join(directory, entry['submap']), frame_id=f"teach_{entry['id']}",
                                    sensor_origin=entry.get('sensor_origin'))
            graph.add_teach_vertex(Pose.from_row(entry['pose_from_prev']),
                                   self._covariance(entry['edge_covariance']), submap, entry.get('time', 0.0))

        for entry in index.get('repeat', []):
            spatial = entry.get('spatial_edge')
            edge = None
            if spatial is not None:
                edge = SpatialEdge(int(spatial['teach_id']), Pose.from_row(spatial['pose']),
                                   self._covariance(spatial['covariance']))
            graph.add_repeat_vertex(Pose.from_row(entry['pose_from_prev']),
                                    self._covariance(entry['edge_covariance']), edge, entry.get('time', 0.0))
        return graph
