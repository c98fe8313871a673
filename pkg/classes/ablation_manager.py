import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from classes import closed_loop
from classes.closed_loop import FAILED, RunRecord, variant_preset
from classes.config_manager import ConfigManager, PipelineConfig
from classes.data_processor import DataProcessor, MetricsReport
from classes.display_plots import DisplayPlots
from classes.exceptions import MetricUnavailableError
from classes.graph_store_manager import BAR_FORMAT
from classes.lidar_simulator import World, load_world
from classes.plotting_manager import PlottingManager

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = (1, 2, 3, 4)
METRIC_COLUMNS = ['lateral_rmse_measured', 'lateral_rmse_self', 'max_lateral_measured', 'max_lateral_self']
ABLATION_COLUMNS = ['variant', 'variant_name', 'repeat', 'seed', 'status', 'reason', 'completed'] + METRIC_COLUMNS


def run_directory(out: str, variant_id: int, repeat: int) -> str:
    return os.path.join(out, f"variant{variant_id}", f"run{repeat}")


class AblationManager:
    """
    Runs variants x repeats of the closed loop, one output directory per run, and summarizes them in ablation.csv.
    """

    def __init__(self, world: World, config: PipelineConfig, out: str, show_progress: bool = False,
                 plots: bool = True):
        self.world = world
        self.config = config
        self.out = out
        self.show_progress = show_progress
        self.plots = plots
        self.data_processor = DataProcessor()
        self.plotting_manager = PlottingManager(self.data_processor)

    def _run_once(self, variant_id: int, repeat: int, seed: int) -> RunRecord:
        try:
            return closed_loop.run_closed_loop(self.world, None, variant_id, self.config, seed)
        except Exception as e:
            logger.exception(f"An error occurred: {e}")
            return RunRecord(variant_preset(variant_id), self.world.identifier, seed, FAILED,
                             f"{type(e).__name__}: {e}", gamma=self.config.degeneracy.gamma)

    def _measured_errors(self, record: RunRecord) -> np.ndarray:
        if not record.completed:
            return np.zeros(0)
        try:
            return self.data_processor.measured_lateral(record.gt)
        except (MetricUnavailableError, KeyError):
            return np.zeros(0)

    def _save_run(self, record: RunRecord, directory: str, report: MetricsReport):
        try:
            record.save(directory)
            self.data_processor.write_metrics(report, directory)
            if self.plots:
                DisplayPlots(record, self.data_processor, self.plotting_manager, directory).display_plots()
        except (OSError, ValueError) as e:
            logger.error(f"An error occurred while saving {directory}: {e}")

    @staticmethod
    def mean_row(rows: List[dict]) -> dict:
        """Mean of the per-repeat rows of one variant; NaN metrics are ignored, completed becomes a fraction."""
        frame = pd.DataFrame(rows)
        row = {'variant': rows[0]['variant'], 'variant_name': rows[0]['variant_name'], 'repeat': 'mean',
               'seed': '', 'reason': '', 'completed': float(frame['completed'].astype(float).mean())}
        row['status'] = 'Completed' if row['completed'] == 1.0 else FAILED
        for column in METRIC_COLUMNS:
            values = frame[column].to_numpy(dtype=float)
            values = values[~np.isnan(values)]
            row[column] = float(np.mean(values)) if values.size else float('nan')
        return row

    def run(self, variants: Sequence[int] = DEFAULT_VARIANTS, repeats: int = 3,
            seed: int = 0) -> Dict[int, MetricsReport]:
        """
        Executes the ablation.

        Parameters:
        :param variants: Variant preset ids.
        :param repeats: Runs per variant; run r uses seed + r.
        :param seed: Base seed.

        Returns:
        :return: Mean MetricsReport per variant id. `completed` is True only when every repeat completed.
        """
        os.makedirs(self.out, exist_ok=True)
        rows = []
        summary = {}
        errors_by_variant = {}
        pbar = tqdm(total=len(variants) * repeats, desc="Running ablation", bar_format=BAR_FORMAT,
                    disable=not self.show_progress)
        for variant_id in variants:
            variant = variant_preset(variant_id)
            variant_rows = []
            for repeat in range(repeats):
                run_seed = seed + repeat
                record = self._run_once(variant_id, repeat, run_seed)
                report = self.data_processor.compute_metrics(record)
                self._save_run(record, run_directory(self.out, variant_id, repeat), report)
                errors_by_variant.setdefault(variant.name, []).append(self._measured_errors(record))
                row = {'variant': variant_id, 'variant_name': variant.name, 'repeat': repeat, 'seed': run_seed,
                       'status': record.status, 'reason': record.reason, 'completed': float(report.completed)}
                row.update({column: getattr(report, column) for column in METRIC_COLUMNS})
                variant_rows.append(row)
                pbar.update(1)
            mean = self.mean_row(variant_rows)
            rows.extend(variant_rows + [mean])
            summary[variant_id] = MetricsReport(*(mean[column] for column in METRIC_COLUMNS),
                                                completed=mean['completed'] == 1.0)
            logger.info(f"Variant {variant_id} ({variant.name}): {sum(r['completed'] for r in variant_rows)}/"
                        f"{repeats} completed, mean measured RMSE {mean['lateral_rmse_measured']:.3f} m")
        pbar.close()
        table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
        self.data_processor.create_csv_file(table, os.path.join(self.out, 'ablation.csv'))
        if self.plots:
            self.plotting_manager.plot_ablation_summary(table, os.path.join(self.out, 'ablation.png'))
            errors = {name: np.concatenate(arrays) for name, arrays in errors_by_variant.items()}
            self.plotting_manager.plot_lateral_cdf(errors, os.path.join(self.out, 'lateral_cdf.png'))
        return summary


def run_ablation(world_file: str, config_file: Optional[str], variants: Sequence[int] = DEFAULT_VARIANTS,
                 repeats: int = 3, seed: int = 0, out: str = 'results', gamma: Optional[float] = None,
                 show_progress: bool = False, plots: bool = True) -> Dict[int, MetricsReport]:
    """
    Loads the world and configuration, then runs every variant `repeats` times.

    Returns:
    :return: Mean MetricsReport per variant id.
    """
    world = load_world(world_file)
    config = ConfigManager().load_config(config_file).with_gamma(gamma)
    return AblationManager(world, config, out, show_progress, plots).run(variants, repeats, seed)
