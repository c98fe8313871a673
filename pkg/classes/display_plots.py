import logging
import os
from abc import ABC, abstractmethod
from typing import List

import pandas as pd
from matplotlib import pyplot as plt
from tqdm import tqdm

from classes.graph_store_manager import BAR_FORMAT

logger = logging.getLogger(__name__)


class MetricsSource(ABC):
    @abstractmethod
    def self_reported_lateral(self, graph):
        pass

    @abstractmethod
    def compute_metrics(self, record):
        pass


class PlottingService(ABC):
    @abstractmethod
    def plot_path_overlay(self, gt, est, path):
        pass

    @abstractmethod
    def plot_lateral_error(self, gt, path):
        pass

    @abstractmethod
    def plot_self_reported(self, self_errors, path):
        pass

    @abstractmethod
    def plot_eigenvalue_timeline(self, degeneracy, path):
        pass

    @abstractmethod
    def conditionally_display_legend(self):
        pass


class DisplayPlots:
    """Writes the standard figure set for one run into its output directory."""

    def __init__(self, record, data_processor: MetricsSource, plotting_service: PlottingService, directory: str,
                 show_progress: bool = False):
        self.record = record
        self.data_processor = data_processor
        self.plotting_service = plotting_service
        self.directory = directory
        self.show_progress = show_progress

    def display_plots(self) -> List[str]:
        """
        Renders every figure the run has data for.

        Returns:
        :return: Paths of the images written.
        """
        record = self.record
        self_errors = self.data_processor.self_reported_lateral(record.graph) if record.graph is not None else []
        jobs = [
            (self.plotting_service.plot_path_overlay, (record.gt, record.est), 'paths.png'),
            (self.plotting_service.plot_lateral_error, (record.gt,), 'lateral_error.png'),
            (self.plotting_service.plot_self_reported, (self_errors,), 'self_reported.png'),
            (self.plotting_service.plot_eigenvalue_timeline, (record.degeneracy,), 'eigenvalues.png'),
        ]
        pbar = tqdm(total=len(jobs), desc="Generating chart/s", bar_format=BAR_FORMAT, disable=not self.show_progress)
        written = []
        with plt.style.context('fivethirtyeight'):
            for plot, arguments, name in jobs:
                try:
                    result = plot(*arguments, os.path.join(self.directory, name))
                    if result is not None:
                        written.append(result)
                except (ValueError, KeyError, pd.errors.EmptyDataError) as e:
                    logger.warning(f"Skipping {name}: {e}")
                pbar.update(1)
        pbar.close()
        return written
