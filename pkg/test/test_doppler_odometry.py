import unittest

import numpy as np

from classes.config_manager import extrinsics_from
from classes.doppler_odometry import (DopplerBiasModel, DopplerOdometry, Extrinsics, GaussianPrior, GyroBiasState,
                                      GyroMeasurement, OdometryConfig, PoseWithCovariance, Twist, VelocityWindow,
                                      calibrate_gyro_bias_static, doppler_jacobian, doppler_residual, gyro_residual,
                                      mean_gyro, update_gyro_bias_online)
from classes.exceptions import InsufficientDataError, InvalidArgumentError, OutOfRangeError
from classes.lie_group import Pose, SE3
from classes.point_cloud import Cloud, Point

PERIOD = 0.1


def forward_points(rng, count):
    azimuth = rng.uniform(-1.0, 1.0, count)
    elevation = rng.uniform(-0.3, 0.2, count)
    ranges = rng.uniform(5.0, 30.0, count)
    directions = np.column_stack([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth),
                                  np.sin(elevation)])
    return ranges[:, None] * directions


def exact_frame(rng, extrinsics, twist, t_prev, t_curr, count=4000, gyro_rate=100):
    positions = forward_points(rng, count)
    timestamps = rng.uniform(t_prev, t_curr, count)
    radial = doppler_jacobian(positions, extrinsics) @ twist
    scan = Cloud.from_arrays(positions, radial, timestamps)
    gyro_times = t_prev + (np.arange(int(round((t_curr - t_prev) * gyro_rate))) + 1) / gyro_rate
    gyro = [GyroMeasurement(float(t), extrinsics.rotation_sr @ twist[3:]) for t in gyro_times]
    return scan, gyro


class DopplerOdometryUnitTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(11)
        self.extrinsics = extrinsics_from([0.5, 0.0, 1.5], [0.0, 0.1676, 0.0])
        self.twist = np.array([-1.2, 0.0, 0.0, 0.0, 0.0, -0.15])

    def test_doppler_residual_jacobian_matches_finite_differences(self):
        step = 1e-6
        bias_model = DopplerBiasModel()
        for _ in range(50):
            position = forward_points(self.rng, 1)[0]
            twist = self.rng.normal(size=6)
            point = Point(position, radial_velocity=float(self.rng.normal()))
            numeric = np.zeros(6)
            for i in range(6):
                delta = np.zeros(6)
                delta[i] = step
                numeric[i] = (doppler_residual(twist + delta, point, self.extrinsics, bias_model)
                              - doppler_residual(twist - delta, point, self.extrinsics, bias_model)) / (2 * step)
            analytic = -doppler_jacobian(position, self.extrinsics)[0]
            self.assertLess(np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic), 1e-5)

    def test_doppler_residual_rejects_zero_range(self):
        with self.assertRaises(InvalidArgumentError):
            doppler_residual(np.zeros(6), Point(np.zeros(3)), self.extrinsics, DopplerBiasModel())

    def test_boresight_point_sees_negative_forward_speed(self):
        residual = doppler_residual(np.array([-2.0, 0, 0, 0, 0, 0]), Point(np.array([10.0, 0.0, 0.0]), -2.0),
                                    Extrinsics(), DopplerBiasModel())
        self.assertAlmostEqual(residual, 0.0)

    def test_doppler_bias_model(self):
        model = DopplerBiasModel([0.1, 0.01, 0.0])
        self.assertAlmostEqual(model.bias(np.array([[3.0, 4.0, 0.0]]))[0], 0.15)

    def test_gyro_residual_is_zero_for_consistent_measurement(self):
        bias = GyroBiasState(np.array([0.01, -0.02, 0.03]))
        measurement = self.extrinsics.rotation_sr @ self.twist[3:] + bias.bias
        self.assertTrue(np.allclose(gyro_residual(self.twist, measurement, self.extrinsics, bias), 0.0))

    def test_noise_free_streams_are_recovered_exactly(self):
        odometry = DopplerOdometry(OdometryConfig(), self.extrinsics)
        odometry.reset(0.0, GaussianPrior(np.zeros(6), 100.0 * np.eye(6), 0.0))
        for frame in range(1, 101):
            t_prev, t_curr = (frame - 1) * PERIOD, frame * PERIOD
            scan, gyro = exact_frame(self.rng, self.extrinsics, self.twist, t_prev, t_curr)
            offset = odometry.step(scan, gyro, t_curr)
            error = np.max(np.abs(odometry.current_twist() - self.twist))
            self.assertLess(error, 1e-6, f"Expected the twist within 1e-6 at frame {frame}, but got error {error}")
        expected = SE3.exp_map(100 * PERIOD * self.twist)
        drift = np.linalg.norm(offset.pose.translation - expected.translation)
        self.assertLess(drift, 1e-4, f"Expected the integrated pose within 1e-4 m, but got {drift}")

    def test_outlier_doppler_points_are_rejected(self):
        odometry = DopplerOdometry(OdometryConfig(), self.extrinsics)
        odometry.reset(0.0, GaussianPrior(self.twist.copy(), 0.01 * np.eye(6), 0.0))
        scan, gyro = exact_frame(self.rng, self.extrinsics, self.twist, 0.0, PERIOD, count=2000)
        radial = scan.radial_velocities.copy()
        radial[:5] += 10.0
        scan = scan.with_columns(radial_velocity=radial)
        odometry.step(scan, gyro, PERIOD)
        self.assertEqual(odometry.rejected_doppler, 5)
        self.assertLess(np.max(np.abs(odometry.current_twist() - self.twist)), 1e-5)

    def test_moving_object_is_gated_at_the_prior_mean(self):
        # 45% of the returns come from an object moving 0.8 m/s faster than the robot; a solve that used every
        # point would settle between the two motions, where most of these residuals fall inside the gate
        odometry = DopplerOdometry(OdometryConfig(), self.extrinsics)
        odometry.reset(0.0, GaussianPrior(self.twist.copy(), 0.01 * np.eye(6), 0.0))
        scan, gyro = exact_frame(self.rng, self.extrinsics, self.twist, 0.0, PERIOD, count=2000)
        moving = np.arange(len(scan)) < 900
        object_twist = self.twist + np.array([-0.8, 0.0, 0.0, 0.0, 0.0, 0.0])
        radial = scan.radial_velocities.copy()
        radial[moving] = doppler_jacobian(scan.positions[moving], self.extrinsics) @ object_twist
        odometry.step(scan.with_columns(radial_velocity=radial), gyro, PERIOD)
        self.assertEqual(odometry.rejected_doppler, 900,
                         f"Expected every moving-object return gated, but got {odometry.rejected_doppler}")
        error = np.max(np.abs(odometry.current_twist() - self.twist))
        self.assertLess(error, 1e-5, f"Expected the robot twist within 1e-5, but got error {error}")

    def test_stale_prior_mean_gates_nothing(self):
        odometry = DopplerOdometry(OdometryConfig(), self.extrinsics)
        scan, _ = exact_frame(self.rng, self.extrinsics, self.twist, 0.0, PERIOD, count=500)
        self.assertIsNone(odometry.doppler_inlier_weights(scan, GaussianPrior(np.zeros(6), np.eye(6), 0.0)))
        weights = odometry.doppler_inlier_weights(scan, GaussianPrior(self.twist, np.eye(6), 0.0))
        self.assertTrue(np.all(weights == 1.0))
        self.assertEqual(odometry.rejected_doppler, 0)

    def test_window_marginalization_matches_batch_solve(self):
        odometry = DopplerOdometry(OdometryConfig(), self.extrinsics)
        prior = GaussianPrior(np.zeros(6), 0.5 * np.eye(6), 0.0)
        second_twist = self.twist + np.array([-0.1, 0.0, 0.0, 0.0, 0.0, 0.05])
        frames = []
        for twist, (t_prev, t_curr) in ((self.twist, (0.0, PERIOD)), (second_twist, (PERIOD, 2 * PERIOD))):
            scan, gyro = exact_frame(self.rng, self.extrinsics, twist, t_prev, t_curr, count=300)
            noisy = scan.radial_velocities + self.rng.normal(0.0, 0.05, len(scan))
            frames.append((scan.with_columns(radial_velocity=noisy), gyro, t_curr))

        first_hessian, first_rhs = odometry.assemble_window(frames[0][0], frames[0][1], prior, frames[0][2])
        middle = odometry.marginalize(first_hessian, first_rhs, frames[0][2])
        second_hessian, second_rhs = odometry.assemble_window(frames[1][0], frames[1][1], middle, frames[1][2])
        recursive = odometry.marginalize(second_hessian, second_rhs, frames[1][2])

        # the second window without its prior term, stacked with the first over [w0; w1; w2]
        middle_information = np.linalg.inv(middle.covariance)
        second_hessian[:6, :6] -= middle_information
        second_rhs[:6] -= middle_information @ middle.mean
        hessian = np.zeros((18, 18))
        rhs = np.zeros(18)
        hessian[:12, :12] += first_hessian
        rhs[:12] += first_rhs
        hessian[6:, 6:] += second_hessian
        rhs[6:] += second_rhs
        batch_mean = np.linalg.solve(hessian, rhs)[12:]
        batch_covariance = np.linalg.inv(hessian)[12:, 12:]

        self.assertTrue(np.allclose(recursive.mean, batch_mean, atol=1e-9),
                        f"Expected {batch_mean}, but got {recursive.mean}")
        self.assertTrue(np.allclose(recursive.covariance, batch_covariance, rtol=1e-6, atol=1e-12))

    def test_singular_window_holds_previous_twist(self):
        odometry = DopplerOdometry(OdometryConfig(max_condition=1.0), self.extrinsics)
        odometry.reset(0.0, GaussianPrior(self.twist.copy(), 0.01 * np.eye(6), 0.0))
        scan, gyro = exact_frame(self.rng, self.extrinsics, self.twist, 0.0, PERIOD, count=100)
        offset = odometry.step(scan, gyro, PERIOD)
        self.assertEqual(odometry.singular_windows, 1)
        self.assertTrue(np.allclose(odometry.current_twist(), self.twist))
        self.assertTrue(np.allclose(offset.pose.matrix(), SE3.exp_map(PERIOD * self.twist).matrix()))

    def test_window_times_must_increase(self):
        odometry = DopplerOdometry()
        with self.assertRaises(InvalidArgumentError):
            odometry.assemble_window(Cloud(), [], GaussianPrior(np.zeros(6), np.eye(6), 1.0), 1.0)

    def test_interpolation(self):
        odometry = DopplerOdometry()
        window = VelocityWindow(Twist(np.zeros(6), 0.0), Twist(np.ones(6), 1.0), np.eye(12))
        self.assertTrue(np.allclose(odometry.interpolate_velocity(window, 0.25), 0.25 * np.ones(6)))
        self.assertTrue(np.allclose(odometry.interpolate_velocity(window, 1.0), np.ones(6)))
        with self.assertRaises(OutOfRangeError):
            odometry.interpolate_velocity(window, 1.5)
        covariance = odometry.interpolate_velocity_covariance(window, 0.5)
        self.assertTrue(np.allclose(covariance, covariance.T))
        self.assertGreater(np.min(np.linalg.eigvalsh(covariance)), 0.0)

    def test_zero_motion_integrates_to_identity(self):
        config = OdometryConfig(qc=np.zeros((6, 6)))
        odometry = DopplerOdometry(config)
        window = VelocityWindow(Twist(np.zeros(6), 0.0), Twist(np.zeros(6), PERIOD), np.zeros((12, 12)))
        result = odometry.integrate_pose_with_covariance(window, PoseWithCovariance())
        self.assertTrue(np.allclose(result.pose.matrix(), np.eye(4)))
        self.assertTrue(np.allclose(result.covariance, 0.0))

    def test_integration_step_refinement(self):
        window = VelocityWindow(Twist(self.twist, 0.0), Twist(self.twist, 1.0), np.zeros((12, 12)))
        coarse = DopplerOdometry(OdometryConfig(integration_steps=100)).integrate_pose_with_covariance(
            window, PoseWithCovariance())
        fine = DopplerOdometry(OdometryConfig(integration_steps=1000)).integrate_pose_with_covariance(
            window, PoseWithCovariance())
        self.assertTrue(np.allclose(coarse.pose.matrix(), fine.pose.matrix(), atol=1e-6))

    def test_covariance_matches_monte_carlo(self):
        steps = 5
        samples = 10000
        for scenario in range(5):
            rng = np.random.default_rng(100 + scenario)
            config = OdometryConfig(qc=np.diag(rng.uniform(1e-4, 1e-3, 6)), integration_steps=steps)
            odometry = DopplerOdometry(config)
            twist = np.concatenate([rng.normal(0.0, 1.0, 3), rng.normal(0.0, 0.3, 3)])
            factor = 0.01 * rng.normal(size=(12, 12))
            window = VelocityWindow(Twist(twist, 0.0), Twist(twist, PERIOD), factor @ factor.T)
            prev_factor = 0.01 * rng.normal(size=(6, 6))
            prev = PoseWithCovariance(SE3.exp_map(rng.normal(size=6)), prev_factor @ prev_factor.T, 0.0)
            propagated = odometry.integrate_pose_with_covariance(window, prev)

            dt = PERIOD / steps
            step_covariances = [odometry.interpolate_velocity_covariance(window, (i + 1) * dt) for i in range(steps)]
            errors = np.zeros((samples, 6))
            initial = rng.multivariate_normal(np.zeros(6), prev.covariance, samples)
            velocity_noise = [rng.multivariate_normal(np.zeros(6), covariance, samples)
                              for covariance in step_covariances]
            mean_inverse = propagated.pose.inverse()
            for n in range(samples):
                pose = SE3.exp_map(initial[n]) @ prev.pose
                for i in range(steps):
                    pose = SE3.exp_map(dt * (twist + velocity_noise[i][n])) @ pose
                errors[n] = SE3.log_map(pose @ mean_inverse)
            empirical = np.cov(errors.T)
            relative = np.linalg.norm(empirical - propagated.covariance) / np.linalg.norm(propagated.covariance)
            self.assertLess(relative, 0.1, f"Expected Monte-Carlo agreement within 10%, scenario {scenario} "
                                           f"got {relative:.3f}")

    def test_static_calibration(self):
        bias = np.array([0.01, -0.02, 0.005])
        constant = [GyroMeasurement(0.01 * i, bias) for i in range(100)]
        self.assertTrue(np.allclose(calibrate_gyro_bias_static(constant, 5.0), bias))
        sigma = 0.01
        noisy = [GyroMeasurement(0.01 * i, bias + self.rng.normal(0.0, sigma, 3)) for i in range(300)]
        estimate = calibrate_gyro_bias_static(noisy, 10.0)
        self.assertTrue(np.all(np.abs(estimate - bias) < 3 * sigma / np.sqrt(300)))
        with self.assertRaises(InsufficientDataError):
            calibrate_gyro_bias_static([], 5.0)
        with self.assertRaises(InsufficientDataError):
            calibrate_gyro_bias_static(constant[:5], 5.0)
        with self.assertRaises(InvalidArgumentError):
            calibrate_gyro_bias_static(constant, 0.5, minimum_duration=1.0)

    def test_online_bias_converges_geometrically(self):
        true_bias = np.array([0.0, 0.0, 0.02])
        rotation_sr = self.extrinsics.rotation_sr
        state = GyroBiasState(np.zeros(3), ema_weight=0.2, min_update_interval=0.5, consistency_gate=1.0)
        dt = 1.0
        pose_prev = Pose.identity()
        pose_t = SE3.exp_map(dt * self.twist)
        gyro_mean = rotation_sr @ self.twist[3:] + true_bias
        errors = [np.linalg.norm(true_bias - state.bias)]
        for _ in range(10):
            state = update_gyro_bias_online(state, pose_t, pose_prev, dt, gyro_mean, rotation_sr)
            errors.append(np.linalg.norm(true_bias - state.bias))
        ratios = np.array(errors[1:]) / np.array(errors[:-1])
        self.assertTrue(np.all(np.abs(ratios - 0.8) < 0.02), f"Expected a convergence ratio of 0.8, got {ratios}")
        self.assertEqual(state.accepted_updates, 10)

    def test_online_bias_gates_and_intervals(self):
        state = GyroBiasState(np.zeros(3), consistency_gate=0.05)
        short = update_gyro_bias_online(state, Pose.identity(), Pose.identity(), 0.1, np.zeros(3))
        self.assertEqual(short.skipped_updates, 1)
        inconsistent = update_gyro_bias_online(state, Pose.identity(), Pose.identity(), 1.0, np.array([0.0, 0.0, 1.0]))
        self.assertEqual(inconsistent.skipped_updates, 1)
        self.assertTrue(np.allclose(inconsistent.bias, 0.0))

    def test_mean_gyro(self):
        self.assertTrue(np.allclose(mean_gyro([]), np.zeros(3)))
        samples = [GyroMeasurement(0.0, np.array([1.0, 0.0, 0.0])), GyroMeasurement(0.1, np.array([0.0, 1.0, 0.0]))]
        self.assertTrue(np.allclose(mean_gyro(samples), [0.5, 0.5, 0.0]))


if __name__ == '__main__':
    unittest.main()
