"""Gaussian primitives, real spherical harmonics and binary PLY I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, ParseError
from .geometry import Rotation, quat_to_rotmat

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
MAX_SH_DEGREE = 3
SH_OFFSET = 0.5


def num_sh_coeffs(degree):
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidInputError(f"sh degree must be in 0..{MAX_SH_DEGREE}, got {degree}")
    return (degree + 1) ** 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs, degree):
    """Real SH basis values (..., K) at unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
                SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs, degree):
    """d basis / d(x, y, z) of the polynomial form, shape (..., K, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full(x.shape, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, zero),
                 (zero, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
                 (c[3] * z, zero, c[3] * x),
                 (2 * c[4] * x, -2 * c[4] * y, zero)]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (c[2] * -2 * x * y, c[2] * (4 * zz - xx - 3 * yy), c[2] * 8 * y * z),
                 (c[3] * -6 * x * z, c[3] * -6 * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), c[4] * -2 * x * y, c[4] * 8 * x * z),
                 (c[5] * 2 * x * z, c[5] * -2 * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), c[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_eval(coeffs, view_dir, degree, clamp=True):
    """View-dependent RGB: sum_k c_k Y_k(dir) + 0.5, clamped at zero.

    ``coeffs`` is (K, 3) or batched (..., K, 3) with matching batched directions.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    K = num_sh_coeffs(degree)
    if coeffs.ndim < 2 or coeffs.shape[-2:] != (K, 3):
        raise InvalidInputError(f"expected (..., {K}, 3) SH coefficients for degree {degree}, got {coeffs.shape}")
    basis = sh_basis(view_dir, degree)
    rgb = np.einsum("...k,...kc->...c", basis, coeffs) + SH_OFFSET
    return np.maximum(rgb, 0.0) if clamp else rgb


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - SH_OFFSET) / SH_C0


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def covariance(scale, rotation):
    """R diag(s)^2 Rᵀ for one primitive, or batched (N, 3) scales with (N, 4) quaternions."""
    s = np.asarray(scale, dtype=np.float64)
    if np.any(~(s > 0)):
        raise InvalidInputError("scales must be strictly positive")
    if isinstance(rotation, Rotation):
        R = rotation.matrix
    else:
        rotation = np.asarray(rotation, dtype=np.float64)
        R = quat_to_rotmat(rotation) if rotation.shape[-1] == 4 else rotation
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# scene containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    logit_opacity: float
    sh: np.ndarray

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.logit_opacity))

    @property
    def rotation(self):
        return Rotation(self.quat)

    def covariance(self):
        return covariance(self.scale, self.rotation)


class Scene:
    """Structure-of-arrays container for N Gaussians sharing one SH degree.

    Parameters are stored unconstrained: log-scales and pre-sigmoid opacities.
    """

    FIELDS = ("means", "log_scales", "quats", "logit_opacities", "sh")

    def __init__(self, means, log_scales, quats, logit_opacities, sh, sh_degree=None):
        sh = np.asarray(sh)
        if sh.ndim != 3 or sh.shape[-1] != 3:
            raise InvalidInputError(f"sh must have shape (N, K, 3), got {sh.shape}")
        if sh_degree is None:
            sh_degree = int(round(np.sqrt(sh.shape[1]))) - 1
        if sh.shape[1] != num_sh_coeffs(sh_degree):
            raise InvalidInputError(f"sh has {sh.shape[1]} coefficients; degree {sh_degree} needs "
                                    f"{num_sh_coeffs(sh_degree)}")
        self.means = np.asarray(means)
        self.log_scales = np.asarray(log_scales)
        self.quats = np.asarray(quats)
        self.logit_opacities = np.asarray(logit_opacities)
        self.sh = sh
        self.sh_degree = int(sh_degree)
        n = self.means.shape[0] if self.means.ndim == 2 else -1
        expect = {"means": (n, 3), "log_scales": (n, 3), "quats": (n, 4), "logit_opacities": (n,)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if sh.shape[0] != n:
            raise InvalidInputError("sh count does not match the number of Gaussians")

    @classmethod
    def empty(cls, sh_degree=0, dtype=np.float32):
        K = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3), dtype), np.zeros((0, 3), dtype), np.zeros((0, 4), dtype),
                   np.zeros((0,), dtype), np.zeros((0, K, 3), dtype), sh_degree)

    @classmethod
    def from_primitives(cls, prims, sh_degree=0):
        prims = list(prims)
        if not prims:
            return cls.empty(sh_degree, np.float64)
        return cls(np.stack([p.center for p in prims]), np.stack([p.log_scale for p in prims]),
                   np.stack([p.quat for p in prims]), np.array([p.logit_opacity for p in prims]),
                   np.stack([p.sh for p in prims]), sh_degree)

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return GaussianPrimitive(self.means[i], self.log_scales[i], self.quats[i],
                                 float(self.logit_opacities[i]), self.sh[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def scales(self):
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self):
        return sigmoid(self.logit_opacities)

    def params(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    def replace(self, **changes):
        p = self.params()
        p.update(changes)
        return Scene(**p, sh_degree=self.sh_degree)

    def astype(self, dtype):
        return Scene(**{k: v.astype(dtype) for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def subset(self, index):
        return Scene(**{k: v[index] for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def copy(self):
        return Scene(**{k: v.copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    @staticmethod
    def concatenate(scenes):
        scenes = list(scenes)
        degree = scenes[0].sh_degree
        if any(s.sh_degree != degree for s in scenes):
            raise InvalidInputError("cannot concatenate scenes with different SH degrees")
        return Scene(**{k: np.concatenate([getattr(s, k) for s in scenes]) for k in Scene.FIELDS},
                     sh_degree=degree)

    def covariances(self):
        return covariance(self.scales, self.quats.astype(np.float64))

    def equals(self, other):
        """Bitwise equality of every parameter array."""
        return (self.sh_degree == other.sh_degree
                and all(getattr(self, k).dtype == getattr(other, k).dtype
                        and np.array_equal(getattr(self, k), getattr(other, k)) for k in self.FIELDS))


def transform_scene(scene: Scene, pose) -> Scene:
    """Apply a rigid motion to every Gaussian (centers and orientations).

    View-dependent SH bands would need rotating as well, so only degree-0
    scenes are accepted.
    """
    from .geometry import quat_multiply
    if scene.sh_degree != 0:
        raise InvalidInputError("rigid transforms of scenes with SH degree > 0 are not supported")
    dtype = scene.means.dtype
    R = pose.rotation.matrix
    means = np.asarray(scene.means, dtype=np.float64) @ R.T + pose.translation
    q = np.asarray(scene.quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    quats = quat_multiply(np.broadcast_to(pose.rotation.quat, q.shape), q)
    return scene.replace(means=means.astype(dtype), quats=quats.astype(dtype))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_IGNORED_PROPS = ("nx", "ny", "nz")


def _ply_property_names(sh_degree):
    K = num_sh_coeffs(sh_degree)
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (K - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def _scene_to_columns(scene):
    n = len(scene)
    K = num_sh_coeffs(scene.sh_degree)
    sh = scene.sh.astype(np.float32)
    # f_rest is channel-major: f_rest_{c*(K-1) + k}
    rest = np.transpose(sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (K - 1))
    cols = [scene.means.astype(np.float32), sh[:, 0, :], rest,
            scene.logit_opacities.astype(np.float32).reshape(n, 1),
            scene.log_scales.astype(np.float32), scene.quats.astype(np.float32)]
    return np.concatenate(cols, axis=1)


def ply_export(scene, path):
    names = _ply_property_names(scene.sh_degree)
    data = np.ascontiguousarray(_scene_to_columns(scene), dtype="<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii") + data.tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def ply_import(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header")
    if end < 0:
        raise ParseError("PLY header has no end_header line", offset=len(blob))
    nl = blob.find(b"\n", end)
    if nl < 0:
        raise ParseError("PLY header is not newline-terminated", offset=len(blob))
    try:
        lines = blob[:end].decode("ascii").replace("\r", "").split("\n")
    except UnicodeDecodeError as exc:
        raise ParseError("PLY header is not ASCII", offset=exc.start) from exc
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", offset=0)

    fmt, count, props, offset = None, None, [], 0
    in_vertex = False
    for line in lines[1:]:
        offset_line = offset
        offset += len(line) + 1
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1:]
        elif tok[0] == "element":
            if tok[1] != "vertex" or count is not None:
                raise FormatError(f"unsupported PLY element '{tok[1]}'")
            try:
                count = int(tok[2])
            except (IndexError, ValueError):
                raise ParseError("bad vertex count", offset=offset_line) from None
            in_vertex = True
        elif tok[0] == "property":
            if not in_vertex:
                raise FormatError("property declared outside the vertex element")
            if len(tok) != 3 or tok[1] != "float":
                raise FormatError(f"unsupported property declaration '{line.strip()}'")
            props.append(tok[2])
        else:
            raise ParseError(f"unexpected header line '{line.strip()}'", offset=offset_line)
    if fmt != ["binary_little_endian", "1.0"]:
        raise FormatError(f"unsupported PLY format {fmt}")
    if count is None or count < 0:
        raise ParseError("no vertex element", offset=end)

    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3:
        raise FormatError(f"f_rest count {n_rest} is not a multiple of 3")
    K = n_rest // 3 + 1
    degree = int(round(np.sqrt(K))) - 1
    if (degree + 1) ** 2 != K or degree > MAX_SH_DEGREE:
        raise FormatError(f"{K} SH coefficients do not match any supported degree")
    expected = _ply_property_names(degree)
    kept = [p for p in props if p not in _IGNORED_PROPS]
    if sorted(kept) != sorted(expected) or len(set(props)) != len(props):
        raise FormatError("unsupported vertex property layout")

    start = nl + 1
    need = count * len(props) * 4
    if len(blob) - start < need:
        raise ParseError(f"truncated vertex data: need {need} bytes, found {len(blob) - start}",
                         offset=len(blob))
    raw = np.frombuffer(blob, dtype="<f4", count=count * len(props), offset=start).reshape(count, len(props))
    col = {p: raw[:, i] for i, p in enumerate(props)}

    def stack(names):
        return np.stack([col[n] for n in names], axis=1).astype(np.float32) if count else \
            np.zeros((0, len(names)), np.float32)

    sh = np.zeros((count, K, 3), np.float32)
    sh[:, 0, :] = stack(["f_dc_0", "f_dc_1", "f_dc_2"])
    if K > 1:
        rest = stack([f"f_rest_{i}" for i in range(n_rest)]).reshape(count, 3, K - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return Scene(stack(["x", "y", "z"]), stack(["scale_0", "scale_1", "scale_2"]),
                 stack(["rot_0", "rot_1", "rot_2", "rot_3"]),
                 stack(["opacity"]).reshape(count), sh, degree)
