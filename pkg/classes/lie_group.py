"""
SE(3) primitives shared by every estimator in the pipeline.

Tangent vectors are numpy arrays of shape (6,) ordered [translation; rotation]. Every 6x6 block matrix in the
package (adjoints, Jacobians, covariances, Hessians) follows that ordering. A pose T_{a,b} maps coordinates
expressed in frame b into frame a, and uncertainty is carried as a left perturbation exp(eps^) T.
"""
from dataclasses import dataclass, field

import numpy as np

from classes.exceptions import InvalidArgumentError, NearSingularityError

SMALL_ANGLE = 1e-8
COEFFICIENT_SERIES_ANGLE = 1e-2
PI_GUARD = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'rotation', np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> 'Pose':
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_row(cls, values) -> 'Pose':
        """
        Builds a pose from the 12 row-major floats of its top 3x4 block.

        Parameters:
        :param values: Iterable of 12 floats [r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2].

        Returns:
        :return: The corresponding Pose.
        """
        block = np.asarray(list(values), dtype=float).reshape(3, 4)
        return cls(block[:, :3], block[:, 3])

    def as_row(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(12)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: 'Pose') -> 'Pose':
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: 'Pose') -> 'Pose':
        return self.compose(other)

    def inverse(self) -> 'Pose':
        rotation_t = self.rotation.T
        return Pose(rotation_t, -rotation_t @ self.translation)

    def transform_points(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return SE3.rotation_angle(self.rotation)

    def is_valid(self, tolerance: float = 1e-9) -> bool:
        orthonormal = np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=tolerance)
        return bool(orthonormal and abs(np.linalg.det(self.rotation) - 1.0) < tolerance
                    and np.all(np.isfinite(self.translation)))

    def __repr__(self):
        return f"Pose(translation={np.array2string(self.translation, precision=4)}, " \
               f"angle={self.rotation_angle():.4f})"


def _angle_coefficients(theta: float) -> dict:
    """Trigonometric coefficients of the SO(3)/SE(3) closed forms, switched to Taylor series near zero."""
    if theta < COEFFICIENT_SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return {
            'a': 1.0 - t2 / 6.0 + t4 / 120.0,
            'b': 0.5 - t2 / 24.0 + t4 / 720.0,
            'c': 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            'd': 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            'e': 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        }
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    one_minus_cos = 2.0 * np.sin(0.5 * theta) ** 2
    return {
        'a': sin_t / theta,
        'b': one_minus_cos / theta ** 2,
        'c': (theta - sin_t) / theta ** 3,
        'd': (theta ** 2 + 2.0 * cos_t - 2.0) / (2.0 * theta ** 4),
        'e': (2.0 * theta - 3.0 * sin_t + theta * cos_t) / (2.0 * theta ** 5),
    }


class SE3:
    """Static SO(3)/SE(3) maps. All methods are pure functions of their arguments."""

    @staticmethod
    def skew(vector) -> np.ndarray:
        x, y, z = np.asarray(vector, dtype=float).reshape(3)
        return np.array([[0.0, -z, y],
                         [z, 0.0, -x],
                         [-y, x, 0.0]])

    @staticmethod
    def vee_so3(matrix) -> np.ndarray:
        return np.array([matrix[2, 1], matrix[0, 2], matrix[1, 0]])

    @staticmethod
    def hat(xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(6)
        out = np.zeros((4, 4))
        out[:3, :3] = SE3.skew(xi[3:])
        out[:3, 3] = xi[:3]
        return out

    @staticmethod
    def curly_hat(xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(6)
        rho_hat = SE3.skew(xi[:3])
        phi_hat = SE3.skew(xi[3:])
        out = np.zeros((6, 6))
        out[:3, :3] = phi_hat
        out[:3, 3:] = rho_hat
        out[3:, 3:] = phi_hat
        return out

    @staticmethod
    def rotation_angle(rotation) -> float:
        rotation = np.asarray(rotation, dtype=float)
        sin_part = 0.5 * np.linalg.norm(SE3.vee_so3(rotation - rotation.T))
        cos_part = 0.5 * (np.trace(rotation) - 1.0)
        return float(np.arctan2(sin_part, cos_part))

    @staticmethod
    def so3_exp(phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float).reshape(3)
        theta = np.linalg.norm(phi)
        coeff = _angle_coefficients(theta)
        phi_hat = SE3.skew(phi)
        return np.eye(3) + coeff['a'] * phi_hat + coeff['b'] * phi_hat @ phi_hat

    @staticmethod
    def so3_left_jacobian(phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float).reshape(3)
        theta = np.linalg.norm(phi)
        coeff = _angle_coefficients(theta)
        phi_hat = SE3.skew(phi)
        return np.eye(3) + coeff['b'] * phi_hat + coeff['c'] * phi_hat @ phi_hat

    @staticmethod
    def so3_inverse_left_jacobian(phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float).reshape(3)
        theta = np.linalg.norm(phi)
        phi_hat = SE3.skew(phi)
        if theta < COEFFICIENT_SERIES_ANGLE:
            t2 = theta * theta
            second_order = 1.0 / 12.0 + t2 / 720.0
        else:
            half = 0.5 * theta
            second_order = (1.0 - half / np.tan(half)) / theta ** 2
        return np.eye(3) - 0.5 * phi_hat + second_order * phi_hat @ phi_hat

    @staticmethod
    def so3_log(rotation) -> np.ndarray:
        rotation = np.asarray(rotation, dtype=float)
        theta = SE3.rotation_angle(rotation)
        if np.pi - theta < PI_GUARD:
            raise NearSingularityError(f"Rotation angle {theta:.9f} is within {PI_GUARD} of pi")
        axis_part = SE3.vee_so3(rotation - rotation.T)
        if theta < SMALL_ANGLE:
            return 0.5 * (1.0 + theta * theta / 6.0) * axis_part
        return theta / (2.0 * np.sin(theta)) * axis_part

    @staticmethod
    def exp_map(xi) -> Pose:
        """
        Closed-form exponential of a tangent vector.

        Parameters:
        :param xi: 6-vector [translation; rotation].

        Returns:
        :return: Pose equal to exp(xi^).
        """
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if xi.shape != (6,) or not np.all(np.isfinite(xi)):
            raise InvalidArgumentError(f"exp_map expects a finite 6-vector, got {xi}")
        rotation = SE3.so3_exp(xi[3:])
        translation = SE3.so3_left_jacobian(xi[3:]) @ xi[:3]
        return Pose(rotation, translation)

    @staticmethod
    def log_map(pose: Pose) -> np.ndarray:
        """
        Inverse of exp_map for rotation angles below pi.

        Parameters:
        :param pose: Pose to map into the tangent space.

        Returns:
        :return: 6-vector [translation; rotation].

        Raises NearSingularityError when the rotation angle is within 1e-6 of pi.
        """
        phi = SE3.so3_log(pose.rotation)
        rho = SE3.so3_inverse_left_jacobian(phi) @ pose.translation
        return np.concatenate([rho, phi])

    @staticmethod
    def adjoint(pose: Pose) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = pose.rotation
        out[:3, 3:] = SE3.skew(pose.translation) @ pose.rotation
        out[3:, 3:] = pose.rotation
        return out

    @staticmethod
    def left_jacobian(xi) -> np.ndarray:
        """
        SE(3) left Jacobian, exp((xi + d)^) ~= exp((J d)^) exp(xi^) to first order in d.
        """
        xi = np.asarray(xi, dtype=float).reshape(6)
        rho, phi = xi[:3], xi[3:]
        theta = np.linalg.norm(phi)
        if theta < SMALL_ANGLE:
            ad = SE3.curly_hat(xi)
            ad2 = ad @ ad
            return np.eye(6) + ad / 2.0 + ad2 / 6.0 + ad2 @ ad / 24.0

        coeff = _angle_coefficients(theta)
        rho_hat = SE3.skew(rho)
        phi_hat = SE3.skew(phi)
        phi_rho = phi_hat @ rho_hat
        rho_phi = rho_hat @ phi_hat
        phi_rho_phi = phi_rho @ phi_hat
        q_block = (0.5 * rho_hat
                   + coeff['c'] * (phi_rho + rho_phi + phi_rho_phi)
                   + coeff['d'] * (phi_hat @ phi_rho + rho_phi @ phi_hat - 3.0 * phi_rho_phi)
                   + coeff['e'] * (phi_rho_phi @ phi_hat + phi_hat @ phi_rho_phi))

        jacobian_so3 = SE3.so3_left_jacobian(phi)
        out = np.zeros((6, 6))
        out[:3, :3] = jacobian_so3
        out[:3, 3:] = q_block
        out[3:, 3:] = jacobian_so3
        return out

    @staticmethod
    def right_jacobian_inverse(xi) -> np.ndarray:
        return np.linalg.inv(SE3.left_jacobian(-np.asarray(xi, dtype=float)))


def symmetrize(matrix) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)
