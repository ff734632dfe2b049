"""Supervision terms with analytic gradients, plus the PSNR metric.

Every differentiable loss returns ``(value, grad)``; ``grad`` has the shape of
the differentiable argument (a tuple for multi-argument gradients).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Protocol

import numpy as np

from .errors import EmptyMaskError, InvalidInputError
from .geometry import SE3


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    perceptual: float = 0.05
    depth: float = 0.1
    pointmap: float = 1.0
    camera: float = 0.1
    huber_delta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"loss weight {f.name} must be finite and non-negative, got {v}")
        if self.huber_delta <= 0:
            raise InvalidInputError("huber_delta must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class PointMap:
    points: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise InvalidInputError(f"point map must be (H, W, 3), got {self.points.shape}")
        if self.confidence is None:
            self.confidence = np.ones(self.points.shape[:2], dtype=self.points.dtype)
        self.confidence = np.asarray(self.confidence)
        if self.confidence.shape != self.points.shape[:2]:
            raise InvalidInputError("confidence shape must match the point map")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.confidence))):
            raise InvalidInputError("point map entries must be finite")
        if np.any(self.confidence < 0):
            raise InvalidInputError("confidence must be non-negative")

    @property
    def z(self):
        return self.points[..., 2]


class LossValue(NamedTuple):
    value: float
    grad: object


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# perceptual plugins
# ---------------------------------------------------------------------------

class PerceptualLoss(Protocol):
    def __call__(self, target: np.ndarray, pred: np.ndarray) -> LossValue: ...


class NullPerceptual:
    def __call__(self, target, pred):
        return LossValue(0.0, np.zeros(np.shape(pred)))


class PyramidL1:
    """Multi-scale L1 over 2x2 average-pooled pyramids.

    A cheap stand-in for a learned perceptual metric; this is not LPIPS.
    """

    def __init__(self, levels=3):
        self.levels = levels

    def __call__(self, target, pred):
        I, P = _same_shape(target, pred, "perceptual")
        grad = np.zeros_like(P)
        total = 0.0
        used = 0
        a, b = I, P
        # backprop maps from the current level to full resolution
        shapes = []
        for level in range(self.levels):
            if a.shape[0] < 1 or a.shape[1] < 1:
                break
            diff = b - a
            total += float(np.mean(np.abs(diff)))
            used += 1
            g = np.sign(diff) / diff.size
            for (h, w) in reversed(shapes):
                up = np.zeros((h, w) + g.shape[2:])
                h2, w2 = g.shape[0] * 2, g.shape[1] * 2
                up[:h2, :w2] = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
                g = up
            grad += g
            if level + 1 < self.levels:
                shapes.append(a.shape[:2])
                h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
                if h == 0 or w == 0:
                    break
                a = _pool2(a[:h, :w])
                b = _pool2(b[:h, :w])
        return LossValue(total / max(used, 1), grad / max(used, 1))


def _pool2(x):
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def rgb_loss(target, pred, weights: LossWeights = LossWeights(), perceptual: PerceptualLoss | None = None):
    """l1 * mean|I - Î| + perceptual_weight * perceptual(I, Î); gradient w.r.t. Î."""
    I, P = _same_shape(target, pred, "rgb_loss")
    diff = P - I
    value = weights.l1 * float(np.mean(np.abs(diff)))
    grad = weights.l1 * np.sign(diff) / diff.size
    if perceptual is not None and weights.perceptual > 0:
        pv, pg = perceptual(I, P)
        value += weights.perceptual * pv
        grad = grad + weights.perceptual * pg
    return LossValue(value, grad)


def pointmap_loss(pred, target):
    """Mean over pixels of the squared Euclidean distance between point maps."""
    P = pred.points if isinstance(pred, PointMap) else pred
    T = target.points if isinstance(target, PointMap) else target
    P, T = _same_shape(P, T, "pointmap_loss")
    if P.ndim != 3 or P.shape[-1] != 3:
        raise InvalidInputError(f"point maps must be (H, W, 3), got {P.shape}")
    hw = P.shape[0] * P.shape[1]
    diff = P - T
    return LossValue(float(np.sum(diff * diff)) / hw, 2.0 * diff / hw)


def huber(x, delta):
    """Sum over components of the Huber penalty."""
    if not delta > 0:
        raise InvalidInputError("huber delta must be positive")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return float(np.sum(np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))))


def huber_grad(x, delta):
    if not delta > 0:
        raise InvalidInputError("huber delta must be positive")
    return np.clip(np.asarray(x, dtype=np.float64), -delta, delta)


def _pose_arrays(poses):
    if isinstance(poses, tuple) and len(poses) == 2 and not isinstance(poses[0], SE3):
        R, T = (np.asarray(a, dtype=np.float64) for a in poses)
    else:
        poses = list(poses)
        R = np.stack([p.rotation.matrix for p in poses])
        T = np.stack([p.translation for p in poses])
    if R.ndim != 3 or R.shape[1:] != (3, 3) or T.shape != (R.shape[0], 3):
        raise InvalidInputError("poses must be SE3 lists or (R (V,3,3), T (V,3)) arrays")
    return R, T


def translation_scale(R, T):
    """Mean norm of all ordered-pair relative translations (1.0 if degenerate)."""
    V = R.shape[0]
    norms = [np.linalg.norm(R[i].T @ (T[j] - T[i])) for i in range(V) for j in range(V) if i != j]
    s = float(np.mean(norms)) if norms else 0.0
    return s if s > 1e-12 else 1.0


def camera_loss(pred_poses, target_poses, delta):
    """Relative-pose distillation over all ordered pairs i != j.

    Rotations contribute their geodesic angle; translations, divided by the
    mean relative-translation norm of the target, enter a Huber penalty.
    Returns ``(value, (dL/dR_pred, dL/dT_pred))`` with ambient 3x3 rotation
    gradients, so the result can be chained through any rotation
    parameterization.
    """
    Rp, Tp = _pose_arrays(pred_poses)
    Rt, Tt = _pose_arrays(target_poses)
    V = Rp.shape[0]
    if V < 2 or Rt.shape[0] != V:
        raise InvalidInputError("camera_loss needs two or more views and equal-length pose lists")
    if not delta > 0:
        raise InvalidInputError("huber delta must be positive")
    scale = translation_scale(Rt, Tt)
    gR = np.zeros_like(Rp)
    gT = np.zeros_like(Tp)
    total = 0.0
    for i in range(V):
        for j in range(V):
            if i == j:
                continue
            rel_t = Rt[i].T @ Rt[j]
            rel_p = Rp[i].T @ Rp[j]
            c = (float(np.sum(rel_t * rel_p)) - 1.0) / 2.0
            cc = min(1.0, max(-1.0, c))
            total += math.acos(cc)
            if -1.0 < c < 1.0:
                dtr = -0.5 / math.sqrt(1.0 - c * c)
                gR[j] += dtr * (Rp[i] @ rel_t)
                gR[i] += dtr * (Rp[j] @ rel_t.T)
            v = Tp[j] - Tp[i]
            e = (Rp[i].T @ v - Rt[i].T @ (Tt[j] - Tt[i])) / scale
            total += huber(e, delta)
            g = huber_grad(e, delta) / scale
            dv = Rp[i] @ g
            gT[j] += dv
            gT[i] -= dv
            gR[i] += np.outer(v, g)
    return LossValue(total, (gR, gT))


def depth_mask(alpha, threshold=0.5):
    return (np.asarray(alpha) > threshold).astype(np.float64)


def depth_loss(pointmap_z, rendered_depth, mask):
    """||M * (P_z - D̂)||² / ||M||₁ ; gradient w.r.t. the rendered depth.

    ``pointmap_z`` is an (H, W) array or a PointMap (its z channel is used).
    The gradient w.r.t. ``P_z`` is the negative of the returned one.
    """
    Pz = pointmap_z.z if isinstance(pointmap_z, PointMap) else pointmap_z
    Pz, D = _same_shape(Pz, rendered_depth, "depth_loss")
    M = np.asarray(mask, dtype=np.float64)
    if M.shape != D.shape:
        raise InvalidInputError(f"depth_loss: mask shape {M.shape} vs {D.shape}")
    if not np.all((M == 0) | (M == 1)):
        raise InvalidInputError("depth mask must be binary")
    norm = float(np.sum(M))
    if norm == 0:
        raise EmptyMaskError("depth mask selects no pixels")
    r = np.where(M > 0, Pz - D, 0.0)
    return LossValue(float(np.sum(r * r)) / norm, -2.0 * r / norm)


def prior_loss(pointmap_term, camera_term, weights: LossWeights = LossWeights()):
    return weights.pointmap * float(pointmap_term) + weights.camera * float(camera_term)


def total_loss(rgb_term, depth_term, prior_term, weights: LossWeights = LossWeights()):
    return float(rgb_term) + weights.depth * float(depth_term) + float(prior_term)


def psnr(target, pred):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; +inf when identical."""
    I, P = _same_shape(target, pred, "psnr")
    mse = float(np.mean((I - P) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
