import os
import tempfile
import unittest

import numpy as np
import yaml

from classes.config_manager import CONFIG_ENVIRONMENT_VARIABLE, ConfigManager, PipelineConfig
from classes.degeneracy_icp import DegeneracyAwareIcp
from classes.exceptions import ConfigurationError, InvalidArgumentError

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config', 'default.yaml')


class ConfigManagerUnitTests(unittest.TestCase):
    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.config_manager = ConfigManager(environment={})

    def tearDown(self) -> None:
        self.directory.cleanup()

    def write(self, data, name='config.yaml') -> str:
        path = os.path.join(self.directory.name, name)
        with open(path, 'w') as handle:
            if isinstance(data, str):
                handle.write(data)
            else:
                yaml.safe_dump(data, handle)
        return path

    def test_defaults(self):
        config = self.config_manager.load_config()
        self.assertEqual(config.degeneracy.gamma, 80.0)
        self.assertEqual(config.cloud.knn_k, 8)
        self.assertEqual(config.mapping.translation_threshold, 2.0)
        self.assertEqual(config.fusion.outlier_gate_t, 0.5)
        self.assertEqual(config.sensor.rows, 32)

    def test_bundled_file_matches_the_defaults(self):
        loaded = self.config_manager.load_config(DEFAULT_CONFIG)
        defaults = PipelineConfig()
        self.assertEqual(loaded.cloud, defaults.cloud)
        self.assertEqual(loaded.mapping, defaults.mapping)
        self.assertEqual(loaded.degeneracy, defaults.degeneracy)
        self.assertEqual(loaded.tracker, defaults.tracker)
        self.assertEqual(loaded.association, defaults.association)
        self.assertEqual(loaded.gyro_bias.ema_weight, defaults.gyro_bias.ema_weight)
        self.assertEqual(loaded.gyro_bias.consistency_gate, defaults.gyro_bias.consistency_gate)
        self.assertTrue(np.allclose(loaded.odometry.qc, defaults.odometry.qc))
        self.assertTrue(np.allclose(loaded.extrinsics.T_sr.matrix(), defaults.extrinsics.T_sr.matrix()))

    def test_partial_file_keeps_other_defaults(self):
        path = self.write({'daicp': {'gamma': 40.0}, 'mapping': {'frames_per_submap': 3}})
        config = self.config_manager.load_config(path)
        self.assertEqual(config.degeneracy.gamma, 40.0)
        self.assertEqual(config.mapping.frames_per_submap, 3)
        self.assertEqual(config.degeneracy.epsilon, 1e-6)

    def test_environment_variable(self):
        path = self.write({'tracker': {'speed': 0.7}})
        config = ConfigManager(environment={CONFIG_ENVIRONMENT_VARIABLE: path}).load_config()
        self.assertEqual(config.tracker.speed, 0.7)
        explicit = self.write({'tracker': {'speed': 0.4}}, 'explicit.yaml')
        config = ConfigManager(environment={CONFIG_ENVIRONMENT_VARIABLE: path}).load_config(explicit)
        self.assertEqual(config.tracker.speed, 0.4, "Expected an explicit path to win over the environment")

    def test_nested_bias_keys_and_sampling_seed(self):
        path = self.write({'odometry': {'gyro_bias': {'zeta': 0.9, 'gate': 0.5},
                                        'doppler_bias': {'coeffs': [0.1, 0.0, 0.0]}},
                           'daicp': {'seed': 7}})
        config = self.config_manager.load_config(path)
        self.assertEqual(config.gyro_bias.ema_weight, 0.9)
        self.assertEqual(config.gyro_bias.consistency_gate, 0.5)
        self.assertEqual(config.gyro_bias.min_update_interval, 0.5, "Expected the default update interval")
        self.assertTrue(np.allclose(config.doppler_bias.coefficients, [0.1, 0.0, 0.0]))
        self.assertEqual(config.association.seed, 7)
        self.assertEqual(DegeneracyAwareIcp(config.association).seed, 7)

    def test_nested_keys_must_be_mappings(self):
        with self.assertRaises(ConfigurationError):
            self.config_manager.load_config(self.write({'odometry': {'doppler_bias': [0.1, 0.0, 0.0]}}))
        with self.assertRaises(ConfigurationError):
            self.config_manager.load_config(self.write({'odometry': {'gyro_bias': {'zeta': 1.5}}}))
        with self.assertLogs('classes.config_manager', level='WARNING') as logs:
            self.config_manager.load_config(self.write({'odometry': {'gyro_bias': {'zeta': 0.5, 'rate': 2}}}))
        self.assertTrue(any('odometry.gyro_bias.rate' in line for line in logs.output))

    def test_unknown_keys_warn(self):
        path = self.write({'daicp': {'gama': 10.0}, 'colors': {'red': 1}})
        with self.assertLogs('classes.config_manager', level='WARNING') as logs:
            config = self.config_manager.load_config(path)
        self.assertEqual(config.degeneracy.gamma, 80.0)
        self.assertTrue(any('daicp.gama' in line for line in logs.output))
        self.assertTrue(any("'colors'" in line for line in logs.output))

    def test_invalid_values(self):
        for data in ({'daicp': {'gamma': 1.0}}, {'cloud': {'knn_k': 3}}, {'cloud': {'fine_voxel': 2.0}},
                     {'sensor': {'rows': 0}}, {'tracker': {'stationary_time': 0.5}}, {'odometry': {'r_dop': 'x'}},
                     {'mapping': {'rotation_threshold': -1.0}}):
            with self.assertRaises(ConfigurationError, msg=f"Expected {data} to be rejected"):
                self.config_manager.load_config(self.write(data))

    def test_unreadable_files(self):
        with self.assertRaises(ConfigurationError):
            self.config_manager.load_config(os.path.join(self.directory.name, 'missing.yaml'))
        with self.assertRaises(ConfigurationError):
            self.config_manager.load_config(self.write("daicp: [unclosed", 'broken.yaml'))
        with self.assertRaises(ConfigurationError):
            self.config_manager.load_config(self.write("- 1\n- 2\n", 'list.yaml'))

    def test_with_gamma(self):
        config = PipelineConfig()
        self.assertIs(config.with_gamma(None), config)
        updated = config.with_gamma(30)
        self.assertEqual(updated.degeneracy.gamma, 30.0)
        self.assertEqual(config.degeneracy.gamma, 80.0, "Expected the original configuration to be unchanged")
        with self.assertRaises(InvalidArgumentError):
            config.with_gamma(0.5)


if __name__ == '__main__':
    unittest.main()
