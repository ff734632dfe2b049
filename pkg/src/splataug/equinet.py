"""Toy permutation-equivariant feed-forward reconstruction network.

Tokens of every view pass through alternating per-view and joint self-attention
blocks. No view-index embedding is used anywhere, so permuting the input views
permutes every per-view output in the same way. Three decoders read the fused
tokens: a camera pose decoder, a dense point-map decoder, and a per-pixel
Gaussian head that also sees the raw image through a small convolution branch.
"""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateOutputError, InvalidInputError, LoadError
from .gaussians import Scene, num_sh_coeffs
from .geometry import SE3, Rotation

ARCHIVE_VERSION = 1
QUAT_EPS = 1e-8


@dataclass(frozen=True)
class NetConfig:
    patch_size: int = 8
    token_dim: int = 64
    n_aggregator_blocks: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    sh_degree: int = 0
    mlp_ratio: int = 2
    max_grid: int = 32
    head_channels: int = 16
    init_depth: float = 1.5
    init_log_scale: float = -3.0
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise InvalidInputError(f"token_dim {self.token_dim} is not divisible by n_heads {self.n_heads}")
        for name in ("patch_size", "token_dim", "n_heads", "mlp_ratio", "max_grid", "head_channels"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.n_aggregator_blocks < 0 or self.n_decoder_layers < 0:
            raise InvalidInputError("block counts must be non-negative")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidInputError("sh_degree must lie in [0, 3]")

    @property
    def n_sh(self):
        return num_sh_coeffs(self.sh_degree)

    @property
    def gaussian_channels(self):
        # opacity 1 + quaternion 4 + log-scale 3 + SH 3K, plus the 3-vector center from the point map
        return 11 + 3 * self.n_sh

    def check_image(self, height, width):
        ps = self.patch_size
        if height % ps or width % ps:
            raise InvalidInputError(f"patch size {ps} does not divide image size {height}x{width}")
        if height // ps > self.max_grid or width // ps > self.max_grid:
            raise InvalidInputError(f"image {height}x{width} exceeds the positional grid of {self.max_grid} patches")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# torch rotation helpers
# ---------------------------------------------------------------------------

def quat_to_rotmat_t(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_multiply_t(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conj_t(q):
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer block with full unmasked attention and no dropout."""

    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Linear patch projection plus learned row and column embeddings."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.ps = cfg.patch_size
        self.proj = nn.Linear(3 * self.ps * self.ps, cfg.token_dim)
        self.row_embed = nn.Parameter(0.02 * torch.randn(cfg.max_grid, cfg.token_dim))
        self.col_embed = nn.Parameter(0.02 * torch.randn(cfg.max_grid, cfg.token_dim))

    def forward(self, images):
        V, H, W, _ = images.shape
        ps = self.ps
        gh, gw = H // ps, W // ps
        patches = images.reshape(V, gh, ps, gw, ps, 3).permute(0, 1, 3, 2, 4, 5).reshape(V, gh * gw, ps * ps * 3)
        pos = (self.row_embed[:gh, None, :] + self.col_embed[None, :gw, :]).reshape(gh * gw, -1)
        return self.proj(patches) + pos


class Aggregator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        mk = lambda: Block(cfg.token_dim, cfg.n_heads, cfg.mlp_ratio)
        self.frame_blocks = nn.ModuleList([mk() for _ in range(cfg.n_aggregator_blocks)])
        self.global_blocks = nn.ModuleList([mk() for _ in range(cfg.n_aggregator_blocks)])
        self.norm = nn.LayerNorm(cfg.token_dim)

    def forward(self, tokens):
        V, L, C = tokens.shape
        x = tokens
        for fb, gb in zip(self.frame_blocks, self.global_blocks):
            x = fb(x)
            x = gb(x.reshape(1, V * L, C)).reshape(V, L, C)
        return self.norm(x)


class PoseDecoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.blocks = nn.Sequential(*[Block(cfg.token_dim, cfg.n_heads, cfg.mlp_ratio)
                                      for _ in range(cfg.n_decoder_layers)])
        self.head = nn.Linear(cfg.token_dim, 7)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.copy_(torch.tensor([1.0, 0, 0, 0, 0, 0, 0]))

    def forward(self, h):
        out = self.head(self.blocks(h).mean(dim=1))
        return out[:, :4], out[:, 4:]


class PointDecoder(nn.Module):
    """Tokens to per-pixel 3-vector plus confidence by linear unpatchifying."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.ps = cfg.patch_size
        self.blocks = nn.Sequential(*[Block(cfg.token_dim, cfg.n_heads, cfg.mlp_ratio)
                                      for _ in range(cfg.n_decoder_layers)])
        self.head = nn.Linear(cfg.token_dim, self.ps * self.ps * 4)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            bias = torch.zeros(self.ps * self.ps, 4)
            bias[:, 2] = cfg.init_depth
            self.head.bias.copy_(bias.reshape(-1))

    def forward(self, h, grid):
        out = unpatchify(self.head(self.blocks(h)), grid, self.ps)
        return out[..., :3], F.softplus(out[..., 3])


def unpatchify(x, grid, ps):
    V = x.shape[0]
    gh, gw = grid
    D = x.shape[-1] // (ps * ps)
    return x.reshape(V, gh, gw, ps, ps, D).permute(0, 1, 3, 2, 4, 5).reshape(V, gh * ps, gw * ps, D)


class GaussianHead(nn.Module):
    """Per-pixel Gaussian attributes from upsampled tokens plus a raw-image branch."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        F_ = cfg.head_channels
        self.ps = cfg.patch_size
        self.K = cfg.n_sh
        self.token_up = nn.Linear(cfg.token_dim, self.ps * self.ps * F_)
        self.rgb_branch = nn.Sequential(nn.Conv2d(3, F_, 3, padding=1), nn.GELU(), nn.Conv2d(F_, F_, 3, padding=1))
        self.fuse = nn.Sequential(nn.GELU(), nn.Conv2d(F_, F_, 1), nn.GELU())
        self.out = nn.Conv2d(F_, 8 + 3 * self.K, 1)
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            bias = torch.zeros(8 + 3 * self.K)
            bias[1] = 1.0  # quaternion w
            bias[5:8] = cfg.init_log_scale
            self.out.bias.copy_(bias)

    def forward(self, h, images, grid, use_rgb=True):
        feat = unpatchify(self.token_up(h), grid, self.ps).permute(0, 3, 1, 2)
        if use_rgb:
            feat = feat + self.rgb_branch(images.permute(0, 3, 1, 2))
        raw = self.out(self.fuse(feat)).permute(0, 2, 3, 1)
        V, H, W, _ = raw.shape
        q = raw[..., 1:5]
        return {
            "logit_opacity": raw[..., 0],
            "quat": q / q.norm(dim=-1, keepdim=True).clamp_min(QUAT_EPS),
            "log_scale": raw[..., 5:8],
            "sh": raw[..., 8:].reshape(V, H, W, self.K, 3),
        }


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class FeedForwardOutput:
    """Per-view predictions (torch tensors, view-major) and the fused Gaussian attributes.

    Gaussian rotations and SH coefficients are expressed in the world frame of
    the predicted poses: a pixel's camera-frame quaternion is composed with
    the predicted rotation of its view.
    """

    pose_quats: torch.Tensor      # (V, 4) unit
    rotations: torch.Tensor       # (V, 3, 3)
    translations: torch.Tensor    # (V, 3)
    points: torch.Tensor          # (V, H, W, 3) camera frame
    confidence: torch.Tensor      # (V, H, W)
    logit_opacity: torch.Tensor   # (V, H, W)
    quats: torch.Tensor           # (V, H, W, 4) camera frame
    log_scales: torch.Tensor      # (V, H, W, 3)
    sh: torch.Tensor              # (V, H, W, K, 3)
    sh_degree: int

    @property
    def n_views(self):
        return self.points.shape[0]

    def centers(self):
        """World-frame centers R_i P_i + T_i, shape (V, H, W, 3)."""
        V = self.n_views
        P = self.points.reshape(V, -1, 3)
        mu = P @ self.rotations.transpose(1, 2) + self.translations[:, None, :]
        return mu.reshape(self.points.shape)

    def world_quats(self):
        q = quat_multiply_t(self.pose_quats[:, None, None, :].expand_as(self.quats), self.quats)
        return q / q.norm(dim=-1, keepdim=True)

    def gaussian_tensors(self):
        """Fused scene parameters flattened to (N, ...) tensors, N = V*H*W."""
        K = self.sh.shape[-2]
        return {
            "means": self.centers().reshape(-1, 3),
            "log_scales": self.log_scales.reshape(-1, 3),
            "quats": self.world_quats().reshape(-1, 4),
            "logit_opacities": self.logit_opacity.reshape(-1),
            "sh": self.sh.reshape(-1, K, 3),
        }

    def poses(self):
        R = self.rotations.detach().double().cpu().numpy()
        T = self.translations.detach().double().cpu().numpy()
        return [SE3(Rotation.from_matrix(R[i]), T[i]) for i in range(len(R))]

    def scene(self, dtype=np.float32) -> Scene:
        p = {k: v.detach().cpu().numpy().astype(dtype) for k, v in self.gaussian_tensors().items()}
        return Scene(**p, sh_degree=self.sh_degree)

    def anchored(self, index=0) -> "FeedForwardOutput":
        """Re-express every pose relative to view ``index``, which becomes exactly the identity."""
        q0 = self.pose_quats[index]
        R0 = self.rotations[index]
        t0 = self.translations[index]
        q = quat_multiply_t(quat_conj_t(q0).expand_as(self.pose_quats), self.pose_quats)
        R = R0.T @ self.rotations
        T = (self.translations - t0) @ R0
        # remove rounding on the anchor
        eye = torch.eye(3, dtype=R.dtype)
        R = torch.cat([R[:index], eye[None], R[index + 1:]])
        T = torch.cat([T[:index], torch.zeros_like(T[:1]), T[index + 1:]])
        q = torch.cat([q[:index], q.new_tensor([[1.0, 0, 0, 0]]), q[index + 1:]])
        return FeedForwardOutput(q, R, T, self.points, self.confidence, self.logit_opacity, self.quats,
                                 self.log_scales, self.sh, self.sh_degree)


class EquiNet(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        # seeded init without disturbing the global generator
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.patch_embed = PatchEmbed(cfg)
            self.aggregator = Aggregator(cfg)
            self.pose_decoder = PoseDecoder(cfg)
            self.point_decoder = PointDecoder(cfg)
            self.gaussian_head = GaussianHead(cfg)

    def _images(self, views):
        if isinstance(views, torch.Tensor):
            imgs = views
        else:
            views = list(views)
            if not views:
                raise InvalidInputError("forward needs at least one view")
            shapes = {tuple(np.shape(v)) for v in views}
            if len(shapes) != 1:
                raise InvalidInputError(f"all views must share one resolution, got {sorted(shapes)}")
            imgs = torch.stack([torch.as_tensor(np.asarray(v)) for v in views])
        if imgs.ndim != 4 or imgs.shape[-1] != 3 or imgs.shape[0] < 1:
            raise InvalidInputError(f"views must be (V, H, W, 3), got {tuple(imgs.shape)}")
        dtype = next(self.parameters()).dtype
        return imgs.to(dtype)

    def patchify(self, images):
        self.cfg.check_image(images.shape[1], images.shape[2])
        return self.patch_embed(images)

    def aggregate(self, tokens):
        return self.aggregator(tokens)

    def decode_pose(self, h):
        q_raw, t = self.pose_decoder(h)
        norms = q_raw.norm(dim=-1)
        if torch.any(norms < QUAT_EPS):
            i = int(torch.nonzero(norms < QUAT_EPS)[0])
            raise DegenerateOutputError(f"pose decoder emitted a zero-norm quaternion for view {i}")
        q = q_raw / norms[:, None]
        return q, quat_to_rotmat_t(q), t

    def decode_pointmap(self, h, grid):
        return self.point_decoder(h, grid)

    def decode_gaussians(self, h, images, grid, use_rgb=True):
        return self.gaussian_head(h, images, grid, use_rgb)

    def forward(self, views, use_rgb_branch=True) -> FeedForwardOutput:
        images = self._images(views)
        V, H, W, _ = images.shape
        grid = (H // self.cfg.patch_size, W // self.cfg.patch_size)
        h = self.aggregate(self.patchify(images))
        q, R, t = self.decode_pose(h)
        P, C = self.decode_pointmap(h, grid)
        g = self.decode_gaussians(h, images, grid, use_rgb_branch)
        return FeedForwardOutput(q, R, t, P, C, g["logit_opacity"], g["quat"], g["log_scale"], g["sh"],
                                 self.cfg.sh_degree)


# ---------------------------------------------------------------------------
# weight archive: manifest.json + weights.bin (little-endian float32, row-major)
# ---------------------------------------------------------------------------

def is_pretrained(name, prefixes):
    return any(name == p or name.startswith(p + ".") for p in prefixes)


def save_weights(model: EquiNet, path, pretrained_prefixes=(), extra=None, state=None):
    """Write the weight archive atomically; ``state`` overrides the model's own tensors (e.g. EMA)."""
    state = model.state_dict() if state is None else state
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset,
                        "nbytes": arr.nbytes, "pretrained": is_pretrained(name, pretrained_prefixes)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "equinet-weights", "version": ARCHIVE_VERSION, "byte_order": "little",
                "config": model.cfg.to_dict(), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-weights-", dir=parent)
    try:
        with open(os.path.join(tmp, "weights.bin"), "wb") as f:
            f.write(b"".join(blobs))
        with open(os.path.join(tmp, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path):
    mpath = os.path.join(os.fspath(path), "manifest.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise LoadError(f"weight archive has no manifest at {mpath}", field="manifest.json") from None
    except json.JSONDecodeError as e:
        raise LoadError(f"weight manifest is not valid JSON: {e}", field="manifest.json") from None
    if manifest.get("version") != ARCHIVE_VERSION:
        raise LoadError(f"unsupported weight archive version {manifest.get('version')}", field="version")
    return manifest


def load_weights(path):
    """Returns ``(model, manifest)``."""
    manifest = read_manifest(path)
    cfg = NetConfig.from_dict(manifest["config"])
    model = EquiNet(cfg)
    with open(os.path.join(os.fspath(path), "weights.bin"), "rb") as f:
        blob = f.read()
    expected = model.state_dict()
    state = {}
    for e in manifest["tensors"]:
        name = e["name"]
        if name not in expected:
            raise LoadError(f"unexpected tensor '{name}' in weight archive", field=name)
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise LoadError(f"tensor '{name}' runs past the end of weights.bin", field=name)
        shape = tuple(e["shape"])
        if shape != tuple(expected[name].shape) or int(np.prod(shape)) * 4 != e["nbytes"]:
            raise LoadError(f"tensor '{name}' has shape {shape} ({e['nbytes']} bytes), expected "
                            f"{tuple(expected[name].shape)}", field=name)
        arr = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(state)
    if missing:
        raise LoadError(f"weight archive lacks tensors {sorted(missing)}", field=sorted(missing)[0])
    model.load_state_dict(state)
    return model, manifest


def pretrained_names(manifest):
    return {e["name"] for e in manifest["tensors"] if e.get("pretrained")}
