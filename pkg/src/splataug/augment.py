"""Viewpoint re-rendering augmentation of demonstration episodes.

A perturbation rotates an external camera rigidly about a world X or Y axis
through a pivot point, then pushes it forward along its new optical axis.
Each augmented episode uses one perturbation for all of its frames, so the
synthetic video stays temporally coherent, and actions are copied untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AugmentationError, ConflictError, DegenerateGeometryError, InvalidInputError
from .geometry import SE3, CameraModel, Rotation, pivot_point

WORLD_AXES = {"X": np.array([1.0, 0.0, 0.0]), "Y": np.array([0.0, 1.0, 0.0])}
DISTINCT_TOL = 1e-6
MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class PerturbationLevel:
    name: str
    theta_range: tuple   # degrees, bounds on |theta| (or on theta itself when lo < 0)
    mu_range: tuple      # centimeters
    axes: tuple = ("X", "Y")

    def __post_init__(self):
        (tl, th), (ml, mh) = self.theta_range, self.mu_range
        if not (tl <= th and ml <= mh):
            raise InvalidInputError(f"level {self.name}: ranges must satisfy lo <= hi")
        if ml < 0:
            raise InvalidInputError(f"level {self.name}: translation must be non-negative")
        if max(abs(tl), abs(th)) > 180:
            raise InvalidInputError(f"level {self.name}: rotation magnitude exceeds 180 degrees")
        if not self.axes or any(a not in WORLD_AXES for a in self.axes):
            raise InvalidInputError(f"level {self.name}: axes must be drawn from X, Y")

    @property
    def theta_max_deg(self):
        return max(abs(self.theta_range[0]), abs(self.theta_range[1]))

    def contains(self, spec: "PerturbationSpec", tol=1e-9):
        deg = math.degrees(spec.theta)
        lo, hi = self.theta_range
        if lo < 0:
            ok_theta = lo - tol <= deg <= hi + tol
        else:
            ok_theta = lo - tol <= abs(deg) <= hi + tol
        cm = spec.mu * 100.0
        return ok_theta and self.mu_range[0] - tol <= cm <= self.mu_range[1] + tol and spec.axis in self.axes


PRESETS = {
    "small": PerturbationLevel("Small", (3.0, 6.0), (0.5, 2.0)),
    "medium": PerturbationLevel("Medium", (8.0, 15.0), (2.0, 4.0)),
    "large": PerturbationLevel("Large", (18.0, 30.0), (4.0, 6.0)),
    "extreme": PerturbationLevel("Extreme", (60.0, 60.0), (12.0, 12.0)),
    # range used to synthesize training data
    "train": PerturbationLevel("Train", (-30.0, 30.0), (0.5, 6.0)),
}


def preset(name) -> PerturbationLevel:
    try:
        return PRESETS[str(name).lower()]
    except KeyError:
        raise InvalidInputError(f"unknown perturbation level '{name}'; choose from {sorted(PRESETS)} or custom") from None


def custom_level(theta_min, theta_max, mu_min, mu_max, axes=("X", "Y")) -> PerturbationLevel:
    return PerturbationLevel("Custom", (float(theta_min), float(theta_max)), (float(mu_min), float(mu_max)),
                             tuple(axes))


@dataclass(frozen=True)
class PerturbationSpec:
    axis: str
    theta: float            # radians, signed
    mu: float               # meters, >= 0
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.axis not in WORLD_AXES:
            raise InvalidInputError(f"axis must be X or Y, got {self.axis!r}")
        if not (math.isfinite(self.theta) and math.isfinite(self.mu)) or self.mu < 0:
            raise InvalidInputError("theta must be finite and mu finite and non-negative")
        p = np.array(self.pivot, dtype=np.float64).reshape(3)
        p.setflags(write=False)
        object.__setattr__(self, "pivot", p)

    def key(self):
        return (self.axis, self.theta, self.mu)

    def __eq__(self, other):
        if not isinstance(other, PerturbationSpec):
            return NotImplemented
        return self.key() == other.key() and np.array_equal(self.pivot, other.pivot)

    def __hash__(self):
        return hash((self.key(), self.pivot.tobytes()))

    def close_to(self, other, tol=DISTINCT_TOL):
        return self.axis == other.axis and abs(self.theta - other.theta) <= tol and abs(self.mu - other.mu) <= tol

    def to_dict(self):
        return {"axis": self.axis, "theta_rad": float(self.theta), "theta_deg": math.degrees(self.theta),
                "mu_m": float(self.mu), "pivot": [float(v) for v in self.pivot]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["axis"], float(d["theta_rad"]), float(d["mu_m"]), d.get("pivot", (0.0, 0.0, 0.0)))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_perturbation(level: PerturbationLevel, pivot, rng_seed) -> PerturbationSpec:
    """Uniform axis, uniform |theta| with a uniform sign, uniform mu.

    When the level's theta range starts below zero it is a signed range and
    theta is drawn from it directly.
    """
    rng = _rng(rng_seed)
    axis = level.axes[int(rng.integers(len(level.axes)))]
    lo, hi = level.theta_range
    if lo < 0:
        deg = rng.uniform(lo, hi)
    else:
        mag = rng.uniform(lo, hi)
        deg = mag if rng.random() < 0.5 else -mag
    mu_cm = rng.uniform(*level.mu_range)
    return PerturbationSpec(axis, math.radians(deg), mu_cm / 100.0, pivot)


def apply_perturbation(pose: SE3, spec: PerturbationSpec) -> SE3:
    """Rotate the camera rigidly about the world axis through the pivot, then move it along its new +Z."""
    R, c = pose.rotation, pose.translation
    if spec.theta != 0.0:
        rot = Rotation.from_axis_angle(WORLD_AXES[spec.axis], spec.theta)
        R = rot * R
        c = spec.pivot + rot.matrix @ (c - spec.pivot)
    if spec.mu != 0.0:
        c = c + spec.mu * R.matrix[:, 2]
    return SE3(R, c)


def perturb_camera(cam: CameraModel, spec: PerturbationSpec) -> CameraModel:
    return cam.with_pose(apply_perturbation(cam.pose, spec))


def episode_pivot(episode, fallback_depth=1.0):
    """Pivot from the frame-0 external optical axes (cameras are static within an episode).

    With a single external camera, or parallel axes, the pivot is the point
    ``fallback_depth`` meters along the first external optical axis.
    """
    ext = episode.external_cameras
    if not ext:
        raise AugmentationError("episode has no external camera to perturb")
    axes = [episode.cameras[n].optical_axis() for n in ext]
    if len(axes) >= 2:
        try:
            return pivot_point(axes[0], axes[1])
        except DegenerateGeometryError:
            pass
    return axes[0].origin + fallback_depth * axes[0].direction


def sample_distinct(level, pivot, n, rng):
    specs = []
    draws = 0
    while len(specs) < n:
        s = sample_perturbation(level, pivot, rng)
        draws += 1
        if any(s.close_to(o) for o in specs):
            if draws > n + MAX_RESAMPLES:
                raise AugmentationError(f"level {level.name} cannot supply {n} distinct perturbations")
            continue
        specs.append(s)
    return specs


def augment_episode(episode, scenes, level: PerturbationLevel, n_views, rng_seed, perturb_wrist=False,
                    independent=False, render_fn=None, pivot=None):
    """``n_views`` augmented copies of ``episode``, one perturbation per copy.

    ``scenes`` is a sequence (or a callable ``frame_index -> Scene``) giving the
    Gaussian scene of each frame in the episode's world frame. Each copy
    re-renders every frame from the perturbed cameras; actions, timestamps and
    the instruction are copied unmodified. With ``independent`` each external
    camera draws its own perturbation instead of sharing one.
    """
    from .io import Episode, Frame, to_uint8
    if render_fn is None:
        from .rasterizer import render as render_fn
    if n_views < 1:
        raise InvalidInputError("views per demo must be >= 1")
    if not episode.frames:
        raise InvalidInputError("cannot augment an empty episode")
    get_scene = scenes if callable(scenes) else (lambda i: scenes[i] if i < len(scenes) else None)
    frame_scenes = []
    for i in range(len(episode.frames)):
        sc = get_scene(i)
        if sc is None:
            raise AugmentationError(f"no scene available for frame {i}", frame_index=i)
        frame_scenes.append(sc)

    rng = _rng(rng_seed)
    pivot = episode_pivot(episode) if pivot is None else np.asarray(pivot, dtype=np.float64)
    targets = [n for n in episode.cameras if perturb_wrist or n not in episode.wrist_cameras]
    specs = sample_distinct(level, pivot, n_views, rng)
    out = []
    for k, spec in enumerate(specs):
        per_cam = {n: spec for n in targets}
        if independent:
            per_cam.update(zip(targets[1:], sample_distinct(level, pivot, len(targets) - 1, rng)))
        cams = {n: (perturb_camera(c, per_cam[n]) if n in per_cam else c) for n, c in episode.cameras.items()}
        frames = []
        for i, fr in enumerate(episode.frames):
            imgs = {}
            for n in episode.cameras:
                if n in per_cam:
                    imgs[n] = to_uint8(render_fn(frame_scenes[i], cams[n]).rgb)
                else:
                    imgs[n] = fr.images[n].copy()
            frames.append(Frame(fr.timestamp, imgs, np.array(fr.action, copy=True)))
        meta = dict(episode.meta)
        meta.update({"source_id": episode.id, "level": level.name, "perturbation": spec.to_dict(),
                     "perturbed_cameras": {n: s.to_dict() for n, s in per_cam.items()}})
        out.append(Episode(f"{episode.id}__aug{k}", frames, episode.instruction, cams, episode.wrist_cameras,
                           {n: t.copy() for n, t in episode.teacher.items()}, meta))
    return out


def build_training_set(source, augmented=()):
    """Union manifest: source entries first, then augmented ones, each block in given order."""
    from .io import Manifest, ManifestEntry
    if not isinstance(augmented, (list, tuple)):
        augmented = [augmented]
    entries = [ManifestEntry(e.id, e.path, "source", None, e.source_id) for e in source.entries]
    for m in augmented:
        for e in m.entries:
            entries.append(ManifestEntry(e.id, e.path, "augmented", e.perturbation, e.source_id))
    seen = set()
    for e in entries:
        if e.id in seen:
            raise ConflictError(f"duplicate episode id '{e.id}' in combined training set")
        seen.add(e.id)
    return Manifest(entries)
