"""SE(3) poses, pinhole cameras and pixel rays.

Conventions:

* Poses are world-from-camera: ``p_world = R @ p_cam + t``.
* The camera looks along +z with x to the right and y down.
* Twists are ordered rotation first, then translation:
  ``(wx, wy, wz, vx, vy, vz)``.
* ``compose(a, b)`` is the matrix product ``a @ b``, i.e. ``b`` is applied
  first.  A perturbation ``compose(x, exp_map(d))`` therefore acts in the
  body (camera) frame of ``x``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_SMALL_ANGLE = 1e-8


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a 3x3 rotation and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(np.eye(3), [x, y, z])

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        rv = np.degrees(so3_log(self.rotation))
        t = np.round(self.translation, 6).tolist()
        return f"Pose(t={t}, rotvec_deg={np.round(rv, 4).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r) -> np.ndarray:
    """Rotation vector of a rotation matrix, angle in [0, pi]."""
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.sqrt(max(m[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * k
        + (theta - np.sin(theta)) / theta**3 * (k @ k)
    )


def exp_map(delta) -> Pose:
    """SE(3) exponential of a twist ``(wx, wy, wz, vx, vy, vz)``."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    w, v = delta[:3], delta[3:]
    return Pose(so3_exp(w), _left_jacobian(w) @ v)


def log_map(p: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map` for rotation angles below pi."""
    w = so3_log(p.rotation)
    v = np.linalg.solve(_left_jacobian(w), p.translation)
    return np.concatenate([w, v])


def position_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_angle_deg(r) -> float:
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos_t)))


def rotation_error(a: Pose, b: Pose) -> float:
    """Geodesic angle between two rotations, in degrees."""
    return rotation_angle_deg(a.rotation.T @ b.rotation)


# ---------------------------------------------------------------------------
# batched helpers used by the particle filter


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula over an (n, 3) array of rotation vectors."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=1)
    k = np.zeros((len(w), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -w[:, 2], w[:, 1]
    k[:, 1, 0], k[:, 1, 2] = w[:, 2], -w[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -w[:, 1], w[:, 0]
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    kk = k @ k
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * kk


def se3_exp_batch(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`exp_map`; returns (rotations, translations)."""
    delta = np.asarray(delta, dtype=np.float64)
    w, v = delta[:, :3], delta[:, 3:]
    rot = so3_exp_batch(w)
    theta = np.linalg.norm(w, axis=1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe**3)
    # J v = v + b (w x v) + c (w x (w x v))
    wxv = np.cross(w, v)
    trans = v + b[:, None] * wxv + c[:, None] * np.cross(w, wxv)
    return rot, trans


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Camera":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def scaled(self, r: float) -> "Camera":
        """Intrinsics for an image downscaled by ``r`` (the R*K camera)."""
        w, h = round(self.width * r), round(self.height * r)
        if abs(w - self.width * r) > 1e-9 or abs(h - self.height * r) > 1e-9 or w < 1 or h < 1:
            raise ValueError(f"scale {r} does not divide the image size {self.width}x{self.height}")
        return Camera(self.fx * r, self.fy * r, self.cx * r, self.cy * r, w, h)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_centers(self) -> np.ndarray:
        """(width*height, 2) continuous coordinates of every pixel center, row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)

    def camera_directions(self, px) -> np.ndarray:
        """Unit camera-frame directions through continuous pixel coordinates."""
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        if not np.all(np.isfinite(px)):
            raise ValueError("non-finite pixel coordinate")
        if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= self.width) or np.any(px[:, 1] < 0) or np.any(
            px[:, 1] >= self.height
        ):
            raise ValueError("pixel coordinate outside the image")
        d = np.stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], axis=1
        )
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    z_near: float
    z_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        d = _frozen(self.direction, (3,))
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit norm")
        object.__setattr__(self, "direction", d)
        if not (0 <= self.z_near < self.z_far):
            raise ValueError("need 0 <= z_near < z_far")

    def at(self, z) -> np.ndarray:
        return self.origin + np.multiply.outer(z, self.direction)


def pixel_ray(cam: Camera, pose: Pose, px: Sequence[float], z_near: float = 0.05, z_far: float = 10.0) -> Ray:
    """Ray through continuous pixel coordinate ``px = (x, y)``.

    Pixel ``(i, j)`` of the image covers ``[i, i+1) x [j, j+1)`` and has its
    center at ``(i + 0.5, j + 0.5)``.
    """
    d_cam = cam.camera_directions([px])[0]
    return Ray(pose.translation, pose.rotation @ d_cam, z_near, z_far)


# ---------------------------------------------------------------------------
# serialization


def pose_to_list(p: Pose) -> list:
    return p.matrix().tolist()


def pose_from_list(m) -> Pose:
    pose = Pose.from_matrix(np.array(m, dtype=np.float64))
    if not pose.is_valid(1e-6):
        raise ValueError("transform is not a rigid motion")
    # re-orthonormalize to absorb JSON round-off
    u, _, vt = np.linalg.svd(pose.rotation)
    return Pose(u @ vt, pose.translation)


def save_camera(path, cam: Camera, pose: Pose | None = None) -> None:
    d = cam.to_dict()
    if pose is not None:
        d["transform"] = pose_to_list(pose)
    with open(path, "w") as f:
        json.dump(d, f, indent=2)
        f.write("\n")


def load_camera(path) -> tuple[Camera, Pose | None]:
    with open(path) as f:
        d = json.load(f)
    pose = pose_from_list(d["transform"]) if "transform" in d else None
    return Camera.from_dict(d), pose


def yaw_pose(x: float, y: float, z: float, yaw_deg: float) -> Pose:
    """Camera at (x, y, z) rotated by ``yaw_deg`` about the vertical (y) axis."""
    return Pose(so3_exp([0.0, np.radians(yaw_deg), 0.0]), [x, y, z])
