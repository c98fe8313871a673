import os
import tempfile
import unittest
from unittest.mock import Mock, patch

import numpy as np
import pandas as pd
import yaml

from classes.closed_loop import RunRecord, variant_preset
from classes.command_line import EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE, build_parser, main


class CommandLineUnitTests(unittest.TestCase):
    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.out = self.directory.name

    def tearDown(self) -> None:
        self.directory.cleanup()

    def small_sensor_config(self) -> str:
        path = os.path.join(self.out, 'small.yaml')
        with open(path, 'w') as handle:
            yaml.safe_dump({'sensor': {'rows': 4, 'cols': 30}}, handle)
        return path

    def test_usage_errors_exit_with_one(self):
        for argv in ([], ['fly'], ['ablation', '--variant', '7'], ['teach', '--seed', 'x']):
            with self.assertRaises(SystemExit) as raised:
                build_parser().parse_args(argv)
            self.assertEqual(raised.exception.code, EXIT_USAGE, f"Expected exit code 1 for {argv}")

    def test_defaults(self):
        args = build_parser().parse_args(['ablation'])
        self.assertEqual((args.world, args.repeats, args.seed, args.out), ('airport', 3, 0, 'results'))
        self.assertIsNone(args.variant)
        args = build_parser().parse_args(['repeat', '--variant', '1', '--variant', '3'])
        self.assertEqual(args.variant, [1, 3])

    def test_invalid_repeats(self):
        self.assertEqual(main(['ablation', '--repeats', '0', '--out', self.out]), EXIT_USAGE)

    def test_unknown_world(self):
        self.assertEqual(main(['simulate-scan', '--world', 'moon', '--out', self.out]), EXIT_USAGE)

    def test_metrics_of_a_saved_run(self):
        x = np.linspace(0.0, 10.0, 51)
        gt = pd.concat([pd.DataFrame({'pass': 'teach', 'frame': np.arange(51), 'time': 0.1 * np.arange(51),
                                      'x': x, 'y': 0.0, 'yaw': 0.0}),
                        pd.DataFrame({'pass': 'repeat', 'frame': np.arange(51), 'time': 20.0 + 0.1 * np.arange(51),
                                      'x': x, 'y': -0.2, 'yaw': 0.0})], ignore_index=True)
        run_dir = os.path.join(self.out, 'run')
        RunRecord(variant_preset(1), 'flat', 0, gt=gt).save(run_dir)
        self.assertEqual(main(['metrics', run_dir]), EXIT_OK)
        metrics = pd.read_csv(os.path.join(run_dir, 'metrics.csv'))
        self.assertAlmostEqual(metrics['lateral_rmse_measured'].iloc[0], 0.2, places=9)

    def test_metrics_of_a_failed_run(self):
        run_dir = os.path.join(self.out, 'failed')
        RunRecord(variant_preset(4), 'flat', 0, 'Failed', 'lost').save(run_dir)
        self.assertEqual(main(['metrics', '--out', run_dir]), EXIT_RUN_FAILED)

    def test_simulate_scan(self):
        code = main(['simulate-scan', '--world', 'airport', '--config', self.small_sensor_config(),
                     '--out', self.out, '--pose', '0', '0', '0'])
        self.assertEqual(code, EXIT_OK)
        scan = pd.read_csv(os.path.join(self.out, 'scan.csv'))
        self.assertGreater(len(scan), 0)
        self.assertLessEqual(len(scan), 4 * 30)
        self.assertTrue({'x', 'y', 'z', 'radial_velocity'} <= set(scan.columns))

    @patch('classes.command_line.run_ablation')
    def test_ablation_exit_code(self, mock_ablation):
        completed = Mock(completed=True, lateral_rmse_measured=0.1, lateral_rmse_self=0.1)
        failed = Mock(completed=False, lateral_rmse_measured=np.nan, lateral_rmse_self=np.nan)
        mock_ablation.return_value = {1: completed}
        self.assertEqual(main(['ablation', '--out', self.out, '--repeats', '1']), EXIT_OK)
        mock_ablation.return_value = {1: completed, 4: failed}
        self.assertEqual(main(['ablation', '--out', self.out]), EXIT_RUN_FAILED)
        self.assertEqual(mock_ablation.call_args[0][2], [1, 2, 3, 4])


if __name__ == '__main__':
    unittest.main()
