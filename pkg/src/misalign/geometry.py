"""Rotation, projection and homography primitives.

Conventions used throughout the package:

* Camera frame is x right, y down, z forward.
* A misalignment ``(roll, pitch, yaw)`` in degrees is the rotation vector
  ``omega = radians(roll, pitch, yaw)`` expressed in the camera frame, so
  ``I + skew(omega)`` reproduces the first-order homography matrix
  ``[[1, -yaw, pitch], [yaw, 1, -roll], [-pitch, roll, 1]]``. Under this
  labelling ``pitch`` pans the image horizontally, ``roll`` tilts it
  vertically and ``yaw`` spins it about the optical axis.
* Depth images store camera-frame z, with 0 meaning "no return".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NonPositiveDepth

AXES = ("roll", "pitch", "yaw")


@dataclass(frozen=True)
class EulerMisalignment:
    """Rotational fault in degrees (roll about x, pitch about y, yaw about z)."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.roll, self.pitch, self.yaw)):
            raise ValueError(f"non-finite misalignment {self!r}")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "EulerMisalignment":
        r, p, y = (float(v) for v in values)
        return cls(r, p, y)

    @classmethod
    def from_radians(cls, omega: Sequence[float]) -> "EulerMisalignment":
        return cls.from_array(np.degrees(np.asarray(omega, dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw], dtype=float)

    def radians(self) -> np.ndarray:
        return np.radians(self.as_array())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.as_array())))

    def __neg__(self) -> "EulerMisalignment":
        return EulerMisalignment(-self.roll, -self.pitch, -self.yaw)

    def __iter__(self):
        return iter((self.roll, self.pitch, self.yaw))


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_rotvec(omega: Sequence[float]) -> np.ndarray:
    """Rodrigues' formula, with Taylor coefficients near zero."""
    w = np.asarray(omega, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 1e-8:
        # truncation error of these series is below 1e-20 at this size
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def rotvec_from_rotation(R: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix, valid for angles below pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    axis_part = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(axis_part)
    theta = math.atan2(sin_theta, cos_theta)
    if theta < 1e-6:
        # theta / sin(theta) ~ 1 + theta^2 / 6
        return 0.5 * axis_part * (1.0 + theta * theta / 6.0)
    return 0.5 * axis_part * (theta / sin_theta)


def rotation_from_misalignment(dr: EulerMisalignment) -> np.ndarray:
    """Exact rotation exp(skew(omega)) whose linearization is the small-angle matrix."""
    return rotation_from_rotvec(dr.radians())


def misalignment_from_rotation(R: np.ndarray) -> EulerMisalignment:
    return EulerMisalignment.from_radians(rotvec_from_rotation(R))


def small_angle_matrix(dr: EulerMisalignment) -> np.ndarray:
    r, p, y = dr.radians()
    return np.array([[1.0, -y, p], [y, 1.0, -r], [-p, r, 1.0]])


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, degrees."""
    return float(np.degrees(np.linalg.norm(rotvec_from_rotation(R))))


def check_rotation(R: np.ndarray, tol: float = 1e-12) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def reference(cls) -> "CameraIntrinsics":
        """8MP, 30 degree horizontal field of view pinhole camera."""
        return cls.from_hfov(3840, 2160, 30.0)

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Boolean mask of pixel coordinates inside [0, width) x [0, height)."""
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)


@dataclass(frozen=True)
class RigidTransform:
    """Maps LiDAR-frame points into the camera frame: p_cam = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        check_rotation(R, tol=1e-9)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class DepthImage:
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.values))


def project(p: Sequence[float], k: CameraIntrinsics) -> tuple[tuple[float, float], float]:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise NonPositiveDepth(f"point {tuple(p)} has z={z}")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy), z


def project_points(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pinhole projection; callers must mask out z <= 0 themselves."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pts[:, 0] / z + k.cx
        v = k.fy * pts[:, 1] / z + k.cy
    return np.stack([u, v], axis=1), z


def pixel_cells(uv: np.ndarray) -> np.ndarray:
    """Integer (row, col) cell containing each continuous pixel coordinate."""
    return np.floor(uv[:, ::-1]).astype(np.int64)


def render_depth_image(points: np.ndarray, t: RigidTransform, k: CameraIntrinsics) -> DepthImage:
    """Z-buffered depth raster of LiDAR-frame points seen through extrinsics ``t``.

    The nearest camera-frame z wins per pixel; exact ties keep the point that
    appears first in ``points``.
    """
    cam = t.apply(np.atleast_2d(points))
    image = np.zeros((k.height, k.width))
    front = cam[:, 2] > 0
    uv, z = project_points(cam[front], k)
    inside = k.contains(uv)
    if not np.any(inside):
        return DepthImage(image)
    uv, z = uv[inside], z[inside]
    cells = pixel_cells(uv)
    flat = cells[:, 0] * k.width + cells[:, 1]
    order = np.argsort(z, kind="stable")
    # first occurrence in depth order is the nearest (earliest on ties)
    _, first = np.unique(flat[order], return_index=True)
    keep = order[first]
    image[cells[keep, 0], cells[keep, 1]] = z[keep]
    return DepthImage(image)


def homography(k: CameraIntrinsics, r: np.ndarray) -> np.ndarray:
    return k.K @ np.asarray(r, dtype=float) @ k.K_inv


def apply_homography(H: np.ndarray, uv: np.ndarray) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    q = np.column_stack([uv, np.ones(len(uv))]) @ H.T
    return q[:, :2] / q[:, 2:3]


def normalize(p: Sequence[float], k: CameraIntrinsics) -> np.ndarray:
    u, v = p
    return np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])


def normalize_points(uv: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    return np.column_stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(len(uv))])


def denormalize_points(xyz: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    x = xyz[:, 0] / xyz[:, 2]
    y = xyz[:, 1] / xyz[:, 2]
    return np.column_stack([k.fx * x + k.cx, k.fy * y + k.cy])


def lateral_error(angle: float, range_m: float) -> float:
    """Lateral offset (m) produced by an angular error (rad) at a given range."""
    if not abs(angle) < math.pi / 2:
        raise ValueError("angle must be within (-pi/2, pi/2)")
    if not range_m > 0:
        raise ValueError("range must be positive")
    return range_m * math.tan(angle)
