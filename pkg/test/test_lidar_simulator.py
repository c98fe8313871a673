import os
import tempfile
import unittest

import numpy as np
import yaml
from scipy.optimize import brentq

from classes.closed_loop import body_twist, planar_pose
from classes.doppler_odometry import DopplerBiasModel, Extrinsics
from classes.exceptions import ConfigurationError, InvalidArgumentError
from classes.lidar_simulator import (LinearTwistProfile, Plane, Rock, SensorSpec, TrajectorySpec, World,
                                     beam_noise, generate_gyro, generate_scan, load_world, ray_cast, ray_cast_batch)
from classes.lie_group import Pose, SE3


def ground_world(*rocks) -> World:
    return World([Plane([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])], list(rocks), 'ground')


class RayCastUnitTests(unittest.TestCase):
    def test_ray_straight_down_hits_the_ground(self):
        hit = ray_cast(ground_world(), [1.0, 2.0, 1.5], [0.0, 0.0, -1.0])
        self.assertIsNotNone(hit)
        point, normal = hit
        self.assertTrue(np.allclose(point, [1.0, 2.0, 0.0]), f"Expected [1, 2, 0], but got {point}")
        self.assertTrue(np.allclose(normal, [0.0, 0.0, 1.0]))

    def test_ray_away_from_the_plane_misses(self):
        self.assertIsNone(ray_cast(ground_world(), [0.0, 0.0, 1.5], [0.0, 0.0, 1.0]))
        self.assertIsNone(ray_cast(ground_world(), [0.0, 0.0, 1.5], [1.0, 0.0, 0.0]))

    def test_plane_normal_faces_the_ray_origin(self):
        _, normal = ray_cast(ground_world(), [0.0, 0.0, -1.0], [0.0, 0.0, 1.0])
        self.assertTrue(np.allclose(normal, [0.0, 0.0, -1.0]))

    def test_max_range(self):
        self.assertIsNone(ray_cast(ground_world(), [0.0, 0.0, 10.0], [0.0, 0.0, -1.0], max_range=5.0))
        self.assertIsNotNone(ray_cast(ground_world(), [0.0, 0.0, 10.0], [0.0, 0.0, -1.0], max_range=10.0))

    def test_bounded_plane(self):
        wall = Plane([5.0, 0.0, 1.0], [-1.0, 0.0, 0.0], extent=[2.0, 1.0])
        world = World([wall], [], 'wall')
        self.assertIsNotNone(ray_cast(world, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]))
        direction = np.array([5.0, 3.0, 0.0]) / np.linalg.norm([5.0, 3.0, 0.0])
        self.assertIsNone(ray_cast(world, [0.0, 0.0, 1.0], direction), "Expected a miss outside the extent")

    def test_tangent_rays_on_a_sphere(self):
        world = World([], [Rock([5.0, 0.0, 0.0], 1.0)], 'rock')
        for sine, expect_hit in ((0.2 - 1e-6, True), (0.2 + 1e-6, False)):
            direction = np.array([np.sqrt(1.0 - sine ** 2), sine, 0.0])
            hit = ray_cast(world, np.zeros(3), direction)
            self.assertEqual(hit is not None, expect_hit, f"Unexpected result for sin {sine}")

    def test_ellipsoid_hit_matches_root_finding(self):
        rock = Rock([6.0, 1.0, 0.5], [1.5, 0.8, 0.6])
        world = World([], [rock], 'rock')
        rng = np.random.default_rng(2)
        for _ in range(20):
            target = rock.center + rng.uniform(-0.4, 0.4, 3) * rock.axes
            direction = target / np.linalg.norm(target)

            def surface(t):
                return np.sum(((t * direction - rock.center) / rock.axes) ** 2) - 1.0

            expected = brentq(surface, 0.0, float(np.linalg.norm(target)), xtol=1e-14)
            distances, normals = ray_cast_batch(world, np.zeros(3), direction[None, :])
            self.assertAlmostEqual(distances[0], expected, delta=1e-9)
            point = distances[0] * direction
            gradient = (point - rock.center) / rock.axes ** 2
            self.assertTrue(np.allclose(normals[0], gradient / np.linalg.norm(gradient)))

    def test_origin_inside_a_rock_returns_the_exit(self):
        world = World([], [Rock([0.0, 0.0, 0.0], 2.0)], 'rock')
        point, _ = ray_cast(world, np.zeros(3), [0.0, 1.0, 0.0])
        self.assertTrue(np.allclose(point, [0.0, 2.0, 0.0]))

    def test_nearest_surface_wins(self):
        world = ground_world(Rock([3.0, 0.0, 0.0], 0.5))
        distances, _ = ray_cast_batch(world, [0.0, 0.0, 0.25], [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
        self.assertTrue(np.allclose(distances, [3.0 - np.sqrt(0.25 - 0.0625), 0.25]))

    def test_non_unit_direction_raises(self):
        with self.assertRaises(InvalidArgumentError):
            ray_cast(ground_world(), [0.0, 0.0, 1.0], [0.0, 0.0, -2.0])

    def test_invalid_geometry(self):
        with self.assertRaises(InvalidArgumentError):
            Plane([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        with self.assertRaises(InvalidArgumentError):
            Rock([0.0, 0.0, 0.0], [1.0, -1.0, 1.0])


class SensorSimulationUnitTests(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = SensorSpec(rows=8, cols=40, range_noise_std=0.0, doppler_noise_std=0.0)
        self.world = World([Plane([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), Plane([10.0, 0.0, 0.0], [-1.0, 0.0, 0.0])],
                           [Rock([6.0, -2.0, 0.5], 0.7)], 'box')
        self.world_from_sensor = planar_pose([0.0, 0.0, 1.5], 0.0)

    def test_beam_layout(self):
        directions, columns = SensorSpec(rows=3, cols=5).beam_directions()
        self.assertEqual(directions.shape, (15, 3))
        self.assertTrue(np.allclose(np.linalg.norm(directions, axis=1), 1.0))
        self.assertTrue(np.allclose(directions[7], [1.0, 0.0, 0.0]), "Expected the centre beam on the boresight")
        self.assertEqual(list(columns[:5]), [0, 1, 2, 3, 4])

    def test_stationary_sensor_sees_only_the_bias(self):
        scan = generate_scan(self.world, self.world_from_sensor, np.zeros(6), self.spec, Extrinsics())
        self.assertGreater(len(scan), 0)
        self.assertTrue(np.allclose(scan.radial_velocities, 0.0, atol=1e-12))
        biased = generate_scan(self.world, self.world_from_sensor, np.zeros(6), self.spec, Extrinsics(),
                               DopplerBiasModel([0.1, 0.0, 0.0]))
        self.assertTrue(np.allclose(biased.radial_velocities, 0.1))

    def test_boresight_radial_velocity(self):
        spec = SensorSpec(rows=3, cols=3, range_noise_std=0.0, doppler_noise_std=0.0)
        scan = generate_scan(self.world, Pose.identity(), body_twist(1.3, 0.0), spec, Extrinsics())
        centre = np.flatnonzero(np.all(np.isclose(scan.positions[:, 1:], 0.0), axis=1))
        self.assertEqual(len(centre), 1)
        self.assertTrue(np.allclose(scan.positions[centre[0]], [10.0, 0.0, 0.0]))
        self.assertAlmostEqual(scan.radial_velocities[centre[0]], -1.3, places=12)

    def test_points_lie_on_the_world_surfaces(self):
        scan = generate_scan(self.world, self.world_from_sensor, body_twist(1.0, 0.2), self.spec, Extrinsics())
        world_points = self.world_from_sensor.transform_points(scan.positions)
        on_ground = np.isclose(world_points[:, 2], 0.0, atol=1e-9)
        on_wall = np.isclose(world_points[:, 0], 10.0, atol=1e-9)
        on_rock = np.isclose(np.linalg.norm(world_points - [6.0, -2.0, 0.5], axis=1), 0.7, atol=1e-9)
        self.assertTrue(np.all(on_ground | on_wall | on_rock))
        self.assertTrue(np.any(on_rock), "Expected the rock in front of the sensor to be hit")

    def test_timestamps_span_the_frame(self):
        scan = generate_scan(self.world, self.world_from_sensor, np.zeros(6), self.spec, Extrinsics(), time=2.0)
        self.assertGreater(scan.timestamps.min(), 2.0 - self.spec.period)
        self.assertAlmostEqual(scan.timestamps.max(), 2.0, places=12)

    def test_noise_is_reproducible_per_seed(self):
        spec = SensorSpec(rows=8, cols=40)
        first = generate_scan(self.world, self.world_from_sensor, body_twist(1.0, 0.0), spec, Extrinsics(), seed=4)
        second = generate_scan(self.world, self.world_from_sensor, body_twist(1.0, 0.0), spec, Extrinsics(), seed=4)
        other = generate_scan(self.world, self.world_from_sensor, body_twist(1.0, 0.0), spec, Extrinsics(), seed=5)
        self.assertTrue(np.array_equal(first.positions, second.positions))
        self.assertTrue(np.array_equal(first.radial_velocities, second.radial_velocities))
        self.assertFalse(np.array_equal(first.radial_velocities, other.radial_velocities))

    def test_beam_noise_streams_are_per_row(self):
        full_range, full_doppler = beam_noise([4, 1, 17], SensorSpec(rows=8, cols=40))
        part_range, part_doppler = beam_noise([4, 1, 17], SensorSpec(rows=3, cols=40))
        self.assertTrue(np.array_equal(full_range[:120], part_range),
                        "Expected the first rows to draw the same noise whatever the number of rows")
        self.assertTrue(np.array_equal(full_doppler[:120], part_doppler))
        other_range, _ = beam_noise([4, 1, 18], SensorSpec(rows=8, cols=40))
        self.assertFalse(np.array_equal(full_range, other_range))
        self.assertAlmostEqual(float(np.std(full_doppler)), 0.05, delta=0.01)
        silent_range, silent_doppler = beam_noise(3, SensorSpec(rows=2, cols=5, range_noise_std=0.0,
                                                                doppler_noise_std=0.0))
        self.assertTrue(np.all(silent_range == 0.0) and np.all(silent_doppler == 0.0))

    def test_time_varying_twist(self):
        profile = LinearTwistProfile(0.9, 1.0, body_twist(0.0, 0.0), body_twist(2.0, 0.0))
        scan = generate_scan(self.world, Pose.identity(), profile, SensorSpec(rows=3, cols=3, range_noise_std=0.0,
                                                                              doppler_noise_std=0.0),
                             Extrinsics(), time=1.0)
        centre = np.flatnonzero(np.all(np.isclose(scan.positions[:, 1:], 0.0), axis=1))[0]
        self.assertAlmostEqual(scan.radial_velocities[centre], profile(scan.timestamps[centre])[0], places=12)
        with self.assertRaises(InvalidArgumentError):
            LinearTwistProfile(1.0, 1.0, np.zeros(6), np.zeros(6))

    def test_gyro_adds_a_constant_bias(self):
        extrinsics = Extrinsics(SE3.exp_map(np.array([0.1, 0.0, -1.0, 0.0, 0.3, 0.0])))
        samples = generate_gyro(body_twist(1.0, 0.2), bias_true=[0.0, 0.0, 0.01], extrinsics=extrinsics,
                                start=0.0, end=0.1, rate=100.0)
        self.assertEqual(len(samples), 10)
        self.assertAlmostEqual(samples[0].time, 0.01, places=12)
        self.assertAlmostEqual(samples[-1].time, 0.1, places=12)
        expected = extrinsics.rotation_sr @ np.array([0.0, 0.0, -0.2]) + [0.0, 0.0, 0.01]
        for sample in samples:
            self.assertTrue(np.allclose(sample.angular_velocity, expected, atol=1e-12),
                            f"Expected {expected}, but got {sample.angular_velocity}")

    def test_gyro_uses_the_route_noise(self):
        route = TrajectorySpec([([0.0, 0.0, 0.0], 0.0), ([5.0, 0.0, 0.0], 0.0)], gyro_bias_true=[0.0, 0.0, 0.02],
                               gyro_noise_std=0.01)
        samples = generate_gyro(np.zeros(6), route, start=0.0, end=20.0)
        readings = np.array([sample.angular_velocity for sample in samples])
        self.assertAlmostEqual(float(np.mean(readings[:, 2])), 0.02, delta=0.001)
        self.assertAlmostEqual(float(np.std(readings[:, 2])), 0.01, delta=0.001)
        self.assertEqual(generate_gyro(np.zeros(6), route, start=1.0, end=1.005), [])


class WorldLoadingUnitTests(unittest.TestCase):
    def test_presets_load(self):
        for name in ('airport', 'flat', 'campus', 'planetary'):
            world = load_world(name)
            self.assertEqual(world.identifier, name)
            self.assertIsNotNone(world.route, f"Expected the {name} preset to carry a route")
            self.assertGreater(len(world.planes), 0)

    def test_airport_route(self):
        world = load_world('airport')
        self.assertTrue(np.allclose(world.route.gyro_bias_true, [0.0, 0.0, 0.01]))
        self.assertEqual(len(world.rocks), 3)

    def test_unknown_world(self):
        with self.assertRaises(ConfigurationError):
            load_world('no-such-world')

    def test_world_file(self):
        data = {'planes': [{'point': [0, 0, 0], 'normal': [0, 0, 1]}], 'rocks': [{'center': [4, 0, 0], 'radius': 1}],
                'route': {'waypoints': [[0, 0, 0], [10, 0, 0, 0.0]], 'speed': 0.8}}
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'custom.yaml')
            with open(path, 'w') as handle:
                yaml.safe_dump(data, handle)
            world = load_world(path)
        self.assertEqual(world.identifier, 'custom')
        self.assertTrue(np.allclose(world.rocks[0].axes, 1.0))
        self.assertEqual(world.route.speed, 0.8)
        self.assertEqual(World.from_dict(world.to_dict()).to_dict(), world.to_dict())

    def test_rock_without_radius(self):
        with self.assertRaises(ConfigurationError):
            World.from_dict({'rocks': [{'center': [0, 0, 0]}]})

    def test_route_validation(self):
        with self.assertRaises(InvalidArgumentError):
            TrajectorySpec([([0.0, 0.0, 0.0], 0.0)])
        with self.assertRaises(InvalidArgumentError):
            TrajectorySpec([([0.0, 0.0, 0.0], 0.0), ([0.0, 0.0, 0.0], 1.0)])


if __name__ == '__main__':
    unittest.main()
