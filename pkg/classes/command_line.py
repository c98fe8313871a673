import argparse
import logging
import os
import sys
from typing import List, Optional

import coloredlogs
import numpy as np

from classes.ablation_manager import DEFAULT_VARIANTS, run_ablation
from classes.closed_loop import ClosedLoopRunner, RunRecord, body_twist, planar_pose, variant_preset
from classes.cloud_processor import CloudProcessor
from classes.config_manager import ConfigManager
from classes.data_processor import DataProcessor
from classes.display_plots import DisplayPlots
from classes.exceptions import InvalidArgumentError, TeachRepeatError
from classes.lidar_simulator import generate_scan, load_world
from classes.plotting_manager import PlottingManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILED = 2
LOG_FORMAT = "[%(filename)s:%(lineno)d] %(name)s %(levelname)s - %(message)s"
FIELD_STYLES = {
    "filename": {"color": "green"},
    "levelname": {"bold": True, "color": "black"},
    "name": {"color": "blue"},
}


class HarnessArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def install_logging(verbose: bool = False):
    coloredlogs.install(level="DEBUG" if verbose else "INFO", fmt=LOG_FORMAT, field_styles=FIELD_STYLES)


def build_parser() -> HarnessArgumentParser:
    common = HarnessArgumentParser(add_help=False)
    common.add_argument('--world', default='airport', help="World preset name or YAML file")
    common.add_argument('--config', default=None, help="Pipeline YAML; defaults to $DTR_CONFIG, then built-ins")
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--out', default='results', help="Output directory")
    common.add_argument('--gamma', type=float, default=None, help="Eigen-ratio threshold override")
    common.add_argument('--verbose', action='store_true', help="Debug logging")
    common.add_argument('--progress', action='store_true', help="Show progress bars")

    parser = HarnessArgumentParser(prog='doppler-tr', description="Teach and repeat experiments in simulation")
    verbs = parser.add_subparsers(dest='verb', required=True, parser_class=HarnessArgumentParser)

    teach = verbs.add_parser('teach', parents=[common], help="Run the teach pass only")
    teach.add_argument('--variant', type=int, choices=range(0, 5), default=1)

    repeat = verbs.add_parser('repeat', parents=[common], help="Teach, then repeat with each variant")
    repeat.add_argument('--variant', type=int, choices=range(0, 5), action='append')

    ablation = verbs.add_parser('ablation', parents=[common], help="Variants x repeats with ablation.csv")
    ablation.add_argument('--variant', type=int, choices=range(0, 5), action='append')
    ablation.add_argument('--repeats', type=int, default=3)
    ablation.add_argument('--no-plots', action='store_true')

    metrics = verbs.add_parser('metrics', parents=[common], help="Metrics of a saved run directory")
    metrics.add_argument('run_dir', nargs='?', default=None, help="Run directory; defaults to --out")

    scan = verbs.add_parser('simulate-scan', parents=[common], help="Write one simulated scan to CSV")
    scan.add_argument('--pose', type=float, nargs=3, metavar=('X', 'Y', 'HEADING'), default=None,
                      help="Robot pose; defaults to the start of the world's route")
    scan.add_argument('--speed', type=float, default=1.0)
    scan.add_argument('--yaw-rate', type=float, default=0.0)
    scan.add_argument('--time', type=float, default=0.0)
    scan.add_argument('--preprocess', choices=('raw', 'uniform', 'curvature'), default='raw')
    scan.add_argument('--plot', action='store_true', help="Also write the downsampling comparison image")
    return parser


def _save_run(record: RunRecord, directory: str, show_progress: bool) -> int:
    data_processor = DataProcessor()
    report = data_processor.compute_metrics(record)
    record.save(directory, show_progress)
    data_processor.write_metrics(report, directory)
    DisplayPlots(record, data_processor, PlottingManager(data_processor), directory, show_progress).display_plots()
    print(f"variant {record.variant.id} ({record.variant.name}): {record.status}"
          + (f" - {record.reason}" if record.reason else '')
          + f"; measured RMSE {report.lateral_rmse_measured:.3f} m, self-reported {report.lateral_rmse_self:.3f} m")
    return EXIT_OK if record.completed else EXIT_RUN_FAILED


def run_teach(args) -> int:
    world = load_world(args.world)
    config = ConfigManager().load_config(args.config).with_gamma(args.gamma)
    runner = ClosedLoopRunner(world, world.route, variant_preset(args.variant), config, args.seed, args.progress)
    record = runner.run(teach_only=True)
    record.save(args.out, args.progress)
    print(f"teach on {world.identifier}: {record.status}" + (f" - {record.reason}" if record.reason else ''))
    return EXIT_OK if record.completed else EXIT_RUN_FAILED


def run_repeat(args) -> int:
    world = load_world(args.world)
    config = ConfigManager().load_config(args.config).with_gamma(args.gamma)
    status = EXIT_OK
    for variant_id in args.variant or [1]:
        runner = ClosedLoopRunner(world, world.route, variant_preset(variant_id), config, args.seed, args.progress)
        code = _save_run(runner.run(), os.path.join(args.out, f"variant{variant_id}"), args.progress)
        status = max(status, code)
    return status


def run_ablation_verb(args) -> int:
    if args.repeats < 1:
        raise InvalidArgumentError("--repeats must be at least 1")
    summary = run_ablation(args.world, args.config, args.variant or list(DEFAULT_VARIANTS), args.repeats,
                           args.seed, args.out, args.gamma, args.progress, not args.no_plots)
    for variant_id, report in summary.items():
        print(f"variant {variant_id}: {'Completed' if report.completed else 'Failed'}; "
              f"mean measured RMSE {report.lateral_rmse_measured:.3f} m, "
              f"self-reported {report.lateral_rmse_self:.3f} m")
    print(f"Wrote {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK if all(report.completed for report in summary.values()) else EXIT_RUN_FAILED


def run_metrics(args) -> int:
    directory = args.run_dir or args.out
    record = RunRecord.load(directory)
    data_processor = DataProcessor()
    report = data_processor.compute_metrics(record)
    data_processor.write_metrics(report, directory)
    for name, value in report.as_row().items():
        print(f"{name}: {value}")
    return EXIT_OK if record.completed else EXIT_RUN_FAILED


def run_simulate_scan(args) -> int:
    world = load_world(args.world)
    config = ConfigManager().load_config(args.config)
    if args.pose is not None:
        world_from_robot = planar_pose([args.pose[0], args.pose[1], 0.0], args.pose[2])
    elif world.route is not None:
        position, heading = world.route.waypoints[0]
        world_from_robot = planar_pose(position, heading)
    else:
        world_from_robot = planar_pose(np.zeros(3), 0.0)
    world_from_sensor = world_from_robot @ config.extrinsics.T_sr.inverse()
    twist = body_twist(args.speed, args.yaw_rate)
    scan = generate_scan(world, world_from_sensor, twist, config.sensor, config.extrinsics, config.doppler_bias,
                         seed=args.seed, time=args.time)
    processor = CloudProcessor(config.cloud)
    output = scan if args.preprocess == 'raw' else processor.preprocess(scan, args.preprocess)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, 'scan.csv')
    output.to_csv(path)
    print(f"Wrote {len(output)} points to {path}")
    if args.plot:
        PlottingManager().plot_downsampling_comparison(
            processor.compute_features(scan, config.cloud), processor.preprocess(scan, 'uniform'),
            processor.preprocess(scan, 'curvature'), os.path.join(args.out, 'downsampling.png'))
    return EXIT_OK


VERBS = {
    'teach': run_teach,
    'repeat': run_repeat,
    'ablation': run_ablation_verb,
    'metrics': run_metrics,
    'simulate-scan': run_simulate_scan,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the command line.

    Returns:
    :return: 0 when every run completed, 2 when any run failed, 1 on usage or input errors.
    """
    args = build_parser().parse_args(argv)
    install_logging(args.verbose)
    try:
        return VERBS[args.verb](args)
    except (TeachRepeatError, ValueError, OSError) as e:
        logger.error(f"An error occurred: {e}")
        return EXIT_USAGE
