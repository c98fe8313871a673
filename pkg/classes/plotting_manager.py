import os
import warnings
from typing import Dict, Optional

import matplotlib

matplotlib.use('Agg')

import numpy as np
import pandas as pd
import seaborn as sns
from matplotlib import pyplot as plt

from classes.data_processor import DataProcessor
from classes.exceptions import MetricUnavailableError
from classes.point_cloud import Cloud


class PlottingManager:
    """Figures for runs and ablations. Every plot is written to a file and the figure closed."""

    def __init__(self, data_processor: DataProcessor = None, dpi: int = 120):
        self.data_processor = data_processor or DataProcessor()
        self.dpi = dpi

    def conditionally_display_legend(self):
        """
        This is a utility function to conditionally display the legend only if there are labeled data series.
        """
        if len(plt.gca().get_legend_handles_labels()[0]) > 0:
            plt.legend(loc='upper left', fontsize="10")

    def _save(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        plt.tight_layout()
        plt.savefig(path, dpi=self.dpi)
        plt.close()
        return path

    def plot_path_overlay(self, gt: pd.DataFrame, est: pd.DataFrame, path: str) -> str:
        """
        Plots the teach and repeat ground-truth paths with the repeat estimate on top.

        Parameters:
        :param gt: Ground-truth poses with a 'pass' column.
        :param est: Estimated repeat poses (may be empty, e.g. for the oracle).
        :param path: Output image file.

        Returns:
        :return: The image path.
        """
        plt.figure(figsize=(8, 8))
        for pass_name, style in (('teach', '-'), ('repeat', '--')):
            track = gt[gt['pass'] == pass_name]
            if len(track):
                plt.plot(track['x'], track['y'], style, linewidth=1.5, label=f"{pass_name} (ground truth)")
        repeat_est = est[est['pass'] == 'repeat'] if len(est) else est
        if len(repeat_est):
            plt.plot(repeat_est['x'], repeat_est['y'], ':', linewidth=1.2, label='repeat (estimate)')
        plt.axis('equal')
        plt.xlabel('x [m]')
        plt.ylabel('y [m]')
        plt.title('Teach and repeat paths')
        self.conditionally_display_legend()
        return self._save(path)

    def plot_lateral_error(self, gt: pd.DataFrame, path: str) -> Optional[str]:
        """Signed measured lateral error of the repeat pass against teach arclength; None when unavailable."""
        try:
            teach = self.data_processor.path_table(
                self.data_processor.moving_segment(gt[gt['pass'] == 'teach'].sort_values('time')))
            errors = self.data_processor.measured_lateral(gt)
        except MetricUnavailableError:
            return None
        arclength = teach['s'].to_numpy()[:len(errors)]
        rmse = float(np.sqrt(np.mean(errors ** 2)))
        plt.figure(figsize=(10, 4))
        plt.plot(arclength, errors, linewidth=1.2)
        plt.axhline(0.0, color='black', linewidth=0.8)
        plt.xlabel('teach arclength [m]')
        plt.ylabel('lateral error [m]')
        plt.title('Measured lateral error')
        plt.annotate(f"RMSE: {rmse:.3f} m", xy=(0.02, 0.95), xycoords='axes fraction', fontsize=10,
                     verticalalignment='top', bbox=dict(boxstyle="square", facecolor="white"))
        return self._save(path)

    def plot_self_reported(self, self_errors, path: str) -> Optional[str]:
        if len(self_errors) == 0:
            return None
        plt.figure(figsize=(10, 4))
        plt.plot(np.arange(len(self_errors)), self_errors, '.-', linewidth=1.0)
        plt.xlabel('repeat vertex')
        plt.ylabel('lateral offset [m]')
        plt.title('Self-reported lateral error')
        return self._save(path)

    def plot_eigenvalue_timeline(self, degeneracy: pd.DataFrame, path: str) -> Optional[str]:
        """
        Plots the scaled Hessian eigenvalues and the block scale over the repeat frames. Frames with at least one
        degenerate direction are shaded.
        """
        if degeneracy is None or degeneracy.empty:
            return None
        frames = degeneracy['frame'].to_numpy()
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
        for i in range(1, 7):
            values = degeneracy[f"lam{i}"].to_numpy(dtype=float)
            top.semilogy(frames, np.clip(values, 1e-12, None), linewidth=1.0, label=f"$\\lambda_{i}$")
        degenerate = degeneracy['ndegen'].to_numpy(dtype=float) > 0
        for frame in frames[degenerate]:
            top.axvspan(frame - 0.5, frame + 0.5, color='red', alpha=0.1, linewidth=0)
        top.set_ylabel('eigenvalue')
        top.set_title('Scaled Hessian spectrum')
        top.legend(loc='upper right', fontsize=8, ncol=3)
        bottom.plot(frames, degeneracy['ell'].to_numpy(dtype=float), linewidth=1.0)
        bottom.set_xlabel('repeat frame')
        bottom.set_ylabel('block scale')
        fig.align_ylabels()
        return self._save(path)

    def plot_downsampling_comparison(self, raw: Cloud, uniform: Cloud, curvature_aware: Cloud, path: str) -> str:
        """Top-down view of one scan and the points each preprocessing mode keeps."""
        fig, axes = plt.subplots(1, 3, figsize=(15, 5), sharex=True, sharey=True)
        for axis, (title, cloud) in zip(axes, (('raw', raw), ('uniform', uniform),
                                               ('curvature-aware', curvature_aware))):
            positions = cloud.positions
            colors = cloud.curvatures if cloud.has_curvature() else None
            axis.scatter(positions[:, 0], positions[:, 1], s=2, c=colors, cmap='viridis')
            axis.set_title(f"{title} ({len(cloud)} points)")
            axis.set_aspect('equal')
        return self._save(path)

    def plot_lateral_cdf(self, errors_by_variant: Dict[str, np.ndarray], path: str) -> Optional[str]:
        """Cumulative distribution of absolute measured lateral error, one curve per variant."""
        frames = [pd.DataFrame({'value': np.abs(np.asarray(errors, dtype=float)), 'variant': name})
                  for name, errors in errors_by_variant.items() if len(errors)]
        if not frames:
            return None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=FutureWarning)
            plt.figure(figsize=(8, 5))
            sns.ecdfplot(data=pd.concat(frames, ignore_index=True), x='value', hue='variant')
            plt.xlabel('absolute lateral error [m]')
            plt.title('Cumulative Distribution Function (CDF)')
            return self._save(path)

    def plot_ablation_summary(self, table: pd.DataFrame, path: str) -> Optional[str]:
        """Per-variant box plot of measured lateral RMSE over the completed repeats."""
        runs = table[(table['repeat'] != 'mean') & table['completed'].astype(bool)]
        runs = runs.dropna(subset=['lateral_rmse_measured'])
        if runs.empty:
            return None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=FutureWarning)
            plt.figure(figsize=(8, 5))
            sns.boxplot(data=runs, x='variant_name', y='lateral_rmse_measured')
            plt.xlabel('variant')
            plt.ylabel('lateral RMSE [m]')
            plt.title('Lateral error per variant')
            return self._save(path)
