import logging
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from classes.exceptions import MetricUnavailableError
from classes.pose_graph import TeachRepeatGraph

logger = logging.getLogger(__name__)

MOVING_SPEED = 0.05


@dataclass
class MetricsReport:
    lateral_rmse_measured: float = float('nan')
    lateral_rmse_self: float = float('nan')
    max_lateral_measured: float = float('nan')
    max_lateral_self: float = float('nan')
    completed: bool = False
    skipped_vertices: int = 0

    def as_row(self) -> dict:
        return asdict(self)


def rmse_and_max(errors) -> Tuple[float, float]:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        return float('nan'), float('nan')
    return float(np.sqrt(np.mean(errors ** 2))), float(np.max(np.abs(errors)))


class DataProcessor:
    """
    Path-tracking metrics for a teach and repeat run.

    Paths are tables with columns s (arclength), x, y, tx, ty (unit tangent). Ground-truth tracks from a run are
    turned into paths with path_table after trimming the stationary start and end.
    """

    def __init__(self, moving_speed: float = MOVING_SPEED):
        self.moving_speed = moving_speed
        self.skipped_vertices = 0

    def moving_segment(self, track: pd.DataFrame) -> pd.DataFrame:
        """
        Drops the leading and trailing samples where the vehicle moves slower than the moving speed.

        Parameters:
        :param track: DataFrame with time, x and y columns ordered by time.

        Returns:
        :return: The moving part of the track.
        """
        if len(track) < 2:
            raise MetricUnavailableError("Insufficient samples to find a moving segment")
        positions = track[['x', 'y']].to_numpy(dtype=float)
        dt = np.diff(track['time'].to_numpy(dtype=float))
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            speeds = np.where(dt > 0, steps / dt, 0.0)
        moving = np.flatnonzero(speeds >= self.moving_speed)
        if moving.size == 0:
            raise MetricUnavailableError("The vehicle never moved")
        return track.iloc[moving[0]:moving[-1] + 2].reset_index(drop=True)

    @staticmethod
    def path_table(track: pd.DataFrame) -> pd.DataFrame:
        """Arclength-parameterized path with unit tangents from an x, y track."""
        positions = track[['x', 'y']].to_numpy(dtype=float)
        if len(positions) > 1:
            keep = np.concatenate([[True], np.linalg.norm(np.diff(positions, axis=0), axis=1) > 1e-9])
            positions = positions[keep]
        if len(positions) < 2:
            raise MetricUnavailableError("A path needs at least 2 distinct samples")
        arclength = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(positions, axis=0), axis=1))])
        tangents = np.gradient(positions, arclength, axis=0)
        tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
        return pd.DataFrame({'s': arclength, 'x': positions[:, 0], 'y': positions[:, 1],
                             'tx': tangents[:, 0], 'ty': tangents[:, 1]})

    @staticmethod
    def lateral_errors(teach_path: pd.DataFrame, repeat_path: pd.DataFrame, normal_sign: float = 1.0) -> np.ndarray:
        """
        Signed lateral offsets of the repeat path from the teach path, aligned by arclength.

        Each teach sample inside the common arclength range is paired with the repeat position at the same
        arclength (linear interpolation) and the offset is projected on the teach left normal (-ty, tx).

        Parameters:
        :param teach_path: Teach path table (s, x, y, tx, ty).
        :param repeat_path: Repeat path table (s, x, y).
        :param normal_sign: -1 flips the normal convention.

        Returns:
        :return: Array of signed lateral errors in meters.
        """
        if len(teach_path) < 2 or len(repeat_path) < 2:
            raise MetricUnavailableError("Both paths need at least 2 samples")
        teach_s = teach_path['s'].to_numpy(dtype=float)
        repeat_s = repeat_path['s'].to_numpy(dtype=float)
        low, high = max(teach_s[0], repeat_s[0]), min(teach_s[-1], repeat_s[-1])
        inside = (teach_s >= low) & (teach_s <= high)
        if low >= high or not inside.any():
            raise MetricUnavailableError(f"Arclength ranges do not overlap ([{teach_s[0]:.2f}, {teach_s[-1]:.2f}] "
                                         f"vs [{repeat_s[0]:.2f}, {repeat_s[-1]:.2f}])")
        s = teach_s[inside]
        repeat_x = np.interp(s, repeat_s, repeat_path['x'].to_numpy(dtype=float))
        repeat_y = np.interp(s, repeat_s, repeat_path['y'].to_numpy(dtype=float))
        teach = teach_path[inside]
        normal_x, normal_y = -teach['ty'].to_numpy(), teach['tx'].to_numpy()
        offset_x = repeat_x - teach['x'].to_numpy()
        offset_y = repeat_y - teach['y'].to_numpy()
        return normal_sign * (offset_x * normal_x + offset_y * normal_y)

    def self_reported_lateral(self, graph: TeachRepeatGraph) -> List[float]:
        """
        Lateral offsets the pipeline reports for itself: the y coordinate of each repeat vertex in the frame of its
        matched teach vertex. Repeat vertices without a spatial edge are skipped and counted in skipped_vertices.
        """
        errors = []
        self.skipped_vertices = 0
        for vertex in graph.repeat_vertices:
            if vertex.spatial_edge is None:
                self.skipped_vertices += 1
                continue
            errors.append(float(vertex.spatial_edge.pose.inverse().translation[1]))
        return errors

    def measured_lateral(self, gt: pd.DataFrame) -> np.ndarray:
        """Lateral errors of the repeat ground truth against the teach ground truth of one run."""
        teach = self.moving_segment(gt[gt['pass'] == 'teach'].sort_values('time'))
        repeat = self.moving_segment(gt[gt['pass'] == 'repeat'].sort_values('time'))
        return self.lateral_errors(self.path_table(teach), self.path_table(repeat))

    def compute_metrics(self, record) -> MetricsReport:
        """
        Lateral error summary of one run.

        Parameters:
        :param record: RunRecord with ground truth and graph.

        Returns:
        :return: MetricsReport; metrics that cannot be computed are NaN.
        """
        report = MetricsReport(completed=bool(record.completed))
        try:
            report.lateral_rmse_measured, report.max_lateral_measured = rmse_and_max(self.measured_lateral(record.gt))
        except (MetricUnavailableError, KeyError) as e:
            logger.warning(f"Measured lateral error unavailable: {e}")
        if record.graph is not None:
            report.lateral_rmse_self, report.max_lateral_self = rmse_and_max(self.self_reported_lateral(record.graph))
            report.skipped_vertices = self.skipped_vertices
        return report

    @staticmethod
    def create_csv_file(frame: pd.DataFrame, path: str) -> Optional[str]:
        """
        Writes a metrics table with full float precision.

        Returns:
        :return: The path written, or None when writing failed.
        """
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            frame.to_csv(path, index=False, float_format='%.17g')
            return path
        except OSError as e:
            logger.error(f"An error occurred: {e}")
            return None

    def write_metrics(self, report: MetricsReport, directory: str) -> Optional[str]:
        return self.create_csv_file(pd.DataFrame([report.as_row()]), os.path.join(directory, 'metrics.csv'))
