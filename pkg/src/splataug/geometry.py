"""Rigid-body math on SO(3)/SE(3) and the pinhole camera.

Conventions: quaternions are (w, x, y, z); every pose is world-from-camera,
so ``pose.apply(x_cam)`` gives world coordinates. Pixel (u, v) addresses column
u and row v, with integer values at pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InvalidInputError

NEAR_PLANE = 0.01
PARALLEL_EPS = 1e-8


# ---------------------------------------------------------------------------
# array-level helpers (vectorized over leading dimensions)
# ---------------------------------------------------------------------------

def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInputError("quaternion has zero norm")
    # already-unit inputs pass through untouched so serialization round-trips bitwise
    unit = np.abs(n - 1.0) <= 4 * np.finfo(np.float64).eps
    return np.where(unit, q, q / n)


def quat_to_rotmat(q):
    """Rotation matrices for (possibly unnormalized) quaternions of shape (..., 4)."""
    q = normalize_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Shepperd's method; returns unit quaternions of shape (..., 4)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[n] = q
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise InvalidInputError("rotation axis must be non-zero")
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rotation:
    quat: np.ndarray

    def __post_init__(self):
        q = normalize_quat(np.asarray(self.quat, dtype=np.float64).reshape(4))
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R):
        return cls(rotmat_to_quat(R))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        return cls(axis_angle_quat(axis, angle))

    @cached_property
    def matrix(self):
        R = quat_to_rotmat(self.quat)
        R.setflags(write=False)
        return R

    def inverse(self):
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other):
        return Rotation(quat_multiply(self.quat, other.quat))

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def angle(self):
        return 2.0 * np.arccos(min(1.0, abs(float(self.quat[0]))))

    def __repr__(self):
        return f"Rotation(quat={np.array2string(self.quat, precision=6)})"


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_translation(cls, t):
        return cls(Rotation.identity(), t)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation.matrix
        M[:3, 3] = self.translation
        return M

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.rotation.matrix.T + self.translation

    def inverse(self):
        rinv = self.rotation.inverse()
        return SE3(rinv, -(self.rotation.matrix.T @ self.translation))

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"SE3({self.rotation!r}, translation={np.array2string(self.translation, precision=6)})"


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: SE3 = field(default_factory=SE3)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        return self.pose.translation

    def optical_axis(self):
        return Ray(self.pose.translation, self.pose.rotation.matrix[:, 2])

    def with_pose(self, pose):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_dict(self):
        qw, qx, qy, qz = (float(v) for v in self.pose.rotation.quat)
        tx, ty, tz = (float(v) for v in self.pose.translation)
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "qw": qw, "qx": qx, "qy": qy, "qz": qz, "tx": tx, "ty": ty, "tz": tz,
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height", "qw", "qx", "qy", "qz", "tx", "ty", "tz")
                   if k not in d]
        if missing:
            raise InvalidInputError(f"camera record missing fields: {', '.join(missing)}")
        pose = SE3(Rotation([d["qw"], d["qx"], d["qy"], d["qz"]]), [d["tx"], d["ty"], d["tz"]])
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), pose)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        d = np.array(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n < 1e-12:
            raise DegenerateGeometryError("ray direction must be non-zero")
        d = d / n
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: SE3, b: SE3) -> SE3:
    """Pose applying ``b`` first, then ``a``."""
    return SE3(a.rotation * b.rotation, a.rotation.matrix @ b.translation + a.translation)


def inverse(p: SE3) -> SE3:
    return p.inverse()


def relative_pose(p_i: SE3, p_j: SE3) -> SE3:
    """Pose mapping frame j into frame i, so that ``compose(p_i, rel) == p_j``."""
    return compose(p_i.inverse(), p_j)


def transform_pointmap(pm, pose: SE3):
    """World coordinates ``R @ p + T`` for every pixel of an (H, W, 3) point map."""
    pts = pm.points if hasattr(pm, "points") else pm
    pts = np.asarray(pts)
    if pts.shape[-1] != 3:
        raise InvalidInputError(f"point map must end in a 3-vector axis, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("point map contains non-finite entries")
    dtype = pts.dtype if np.issubdtype(pts.dtype, np.floating) else np.float64
    R = pose.rotation.matrix.astype(dtype)
    T = pose.translation.astype(dtype)
    return pts @ R.T + T


def geodesic_distance(r1, r2) -> float:
    """Angle in radians of R1ᵀR2; accepts Rotation objects or 3x3 matrices."""
    R1 = r1.matrix if isinstance(r1, Rotation) else np.asarray(r1, dtype=np.float64)
    R2 = r2.matrix if isinstance(r2, Rotation) else np.asarray(r2, dtype=np.float64)
    # trace(R1ᵀR2) == sum(R1 * R2), which is symmetric in its arguments bit-for-bit
    c = (float(np.sum(R1 * R2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pivot_point(axis_a: Ray, axis_b: Ray):
    """Midpoint of the shortest segment between two infinite lines."""
    da, db = axis_a.direction, axis_b.direction
    if np.linalg.norm(np.cross(da, db)) <= PARALLEL_EPS:
        raise DegenerateGeometryError("optical axes are parallel; supply the pivot explicitly")
    w0 = axis_a.origin - axis_b.origin
    b = da @ db
    d = da @ w0
    e = db @ w0
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    ca = axis_a.origin + s * da
    cb = axis_b.origin + t * db
    return 0.5 * (ca + cb)


def world_to_camera(points, cam: CameraModel):
    R = cam.pose.rotation.matrix
    return (np.asarray(points, dtype=np.float64) - cam.pose.translation) @ R


def project(point, cam: CameraModel, near: float = NEAR_PLANE):
    """Pixel coordinates and depth of a world point; raises if behind the near plane."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("point must be finite")
    x, y, z = world_to_camera(p, cam)
    if z <= near:
        raise BehindCameraError(f"point depth {z:.6g} m is behind the near plane {near} m")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, float(z)


def unproject(u, v, depth, cam: CameraModel):
    """World point at pixel (u, v) with camera-frame depth z."""
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return cam.pose.apply(np.array([x, y, depth], dtype=np.float64))


def pixel_rays(cam: CameraModel):
    """Camera-frame (H, W, 3) directions with unit z for every pixel center."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> SE3:
    """World-from-camera pose with +Z toward ``target`` and -Y roughly along ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(f, np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return SE3(Rotation.from_matrix(np.stack([x, y, f], axis=1)), eye)
