import unittest

import numpy as np

from classes.closed_loop import body_twist, planar_pose
from classes.cloud_processor import CloudProcessor
from classes.doppler_odometry import Extrinsics
from classes.icp_odometry import IcpOdometry
from classes.lidar_simulator import Plane, SensorSpec, World, generate_scan
from classes.point_cloud import Cloud, CurvatureConfig


class IcpOdometryUnitTests(unittest.TestCase):
    def setUp(self) -> None:
        # ground, a wall ahead and walls on both sides constrain every direction
        self.world = World([Plane([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), Plane([15.0, 0.0, 0.0], [-1.0, 0.0, 0.0]),
                            Plane([0.0, 8.0, 0.0], [0.0, -1.0, 0.0]), Plane([0.0, -8.0, 0.0], [0.0, 1.0, 0.0])],
                           [], 'corridor')
        self.spec = SensorSpec(rows=16, cols=200, range_noise_std=0.0, doppler_noise_std=0.0)
        self.processor = CloudProcessor(CurvatureConfig())
        self.odometry = IcpOdometry(Extrinsics())

    def scan_at(self, x: float, heading: float = 0.0, time: float = 0.0) -> Cloud:
        scan = generate_scan(self.world, planar_pose([x, 0.0, 1.5], heading), body_twist(1.0, 0.0), self.spec,
                             Extrinsics(), time=time)
        return self.processor.preprocess(scan, 'uniform')

    def test_first_scan_sets_the_reference(self):
        offset = self.odometry.step(self.scan_at(0.0), 0.0)
        self.assertTrue(np.allclose(offset.pose.matrix(), np.eye(4)))
        self.assertEqual(offset.time, 0.0)
        self.assertIsNotNone(self.odometry.previous_scan)

    def test_forward_motion(self):
        self.odometry.step(self.scan_at(0.0), 0.0)
        offset = self.odometry.step(self.scan_at(0.1, time=0.1), 0.1)
        self.assertTrue(np.allclose(offset.pose.translation, [-0.1, 0.0, 0.0], atol=0.01),
                        f"Expected [-0.1, 0, 0], but got {offset.pose.translation}")
        self.assertLess(offset.pose.rotation_angle(), 0.005)
        self.assertEqual(offset.time, 0.1)
        self.assertEqual(self.odometry.failed_registrations, 0)
        self.assertTrue(np.all(np.linalg.eigvalsh(offset.covariance) > 0))

    def test_offsets_accumulate_until_reset(self):
        self.odometry.step(self.scan_at(0.0), 0.0)
        self.odometry.step(self.scan_at(0.1, time=0.1), 0.1)
        offset = self.odometry.step(self.scan_at(0.2, time=0.2), 0.2)
        self.assertTrue(np.allclose(offset.pose.translation, [-0.2, 0.0, 0.0], atol=0.02))
        self.odometry.reset_offset()
        self.assertTrue(np.allclose(self.odometry.offset.pose.matrix(), np.eye(4)))
        self.assertEqual(self.odometry.offset.time, 0.2)

    def test_failed_registration_keeps_constant_velocity(self):
        self.odometry.step(self.scan_at(0.0), 0.0)
        self.odometry.step(self.scan_at(0.1, time=0.1), 0.1)
        increment = self.odometry.last_increment
        sparse = Cloud.from_arrays(np.array([[5.0, 0.0, -1.5], [6.0, 1.0, -1.5], [7.0, 0.0, -1.5]]))
        self.odometry.step(sparse, 0.2)
        self.assertEqual(self.odometry.failed_registrations, 1)
        self.assertTrue(np.allclose(self.odometry.last_increment.pose.matrix(), increment.pose.matrix()))
        self.assertTrue(np.allclose(self.odometry.last_increment.covariance, np.eye(6)))

    def test_reset(self):
        self.odometry.step(self.scan_at(0.0), 0.0)
        self.odometry.reset(5.0)
        self.assertIsNone(self.odometry.previous_scan)
        self.assertEqual(self.odometry.offset.time, 5.0)


if __name__ == '__main__':
    unittest.main()
