"""Tile-based Gaussian splatting with an analytic backward pass.

All arithmetic is float64. A Gaussian's screen footprint is its 3-sigma
ellipse: the kernel exp(-q/2) is evaluated where the Mahalanobis distance
q <= 9 and is exactly zero outside. Tiling is therefore only an acceleration
structure, and ``render_brute_force`` (every Gaussian at every pixel, no early
termination) is an exact oracle for ``render`` up to the early-termination
residual, which is bounded by ``T_MIN`` times the largest color or depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, RenderError
from .gaussians import SH_OFFSET, sh_basis, sh_basis_jacobian, sigmoid
from .geometry import NEAR_PLANE, CameraModel, quat_to_rotmat

TILE_SIZE = 16
BLUR = 0.3
T_MIN = 1e-6
FOOTPRINT_SIGMA = 3.0
CUTOFF_Q = FOOTPRINT_SIGMA ** 2


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


@dataclass
class ParamGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    logit_opacities: np.ndarray
    sh: np.ndarray
    # ambient gradients w.r.t. the camera's world-from-camera rotation matrix and center
    camera_rotation: np.ndarray | None = None
    camera_translation: np.ndarray | None = None

    FIELDS = ("means", "log_scales", "quats", "logit_opacities", "sh")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in self.FIELDS])


@dataclass
class Projection:
    """Screen-space quantities for every Gaussian, plus intermediates for backward."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    visible: np.ndarray
    # intermediates
    t_cam: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    dirs: np.ndarray
    dir_len: np.ndarray
    color_raw: np.ndarray


def _check_finite(scene):
    bad = np.zeros(len(scene), dtype=bool)
    if len(scene) == 0:
        return
    for name in ("means", "log_scales", "quats", "sh"):
        arr = getattr(scene, name).reshape(len(scene), -1)
        bad |= ~np.all(np.isfinite(arr), axis=1)
    bad |= ~np.isfinite(scene.logit_opacities)
    qn = np.linalg.norm(np.asarray(scene.quats, dtype=np.float64), axis=-1)
    bad |= ~(qn > 1e-12)
    # exp(log_scale) squared would overflow float64
    bad |= np.any(np.asarray(scene.log_scales, dtype=np.float64).reshape(len(scene), -1) > 300, axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise RenderError(f"Gaussian {i} has non-finite or degenerate parameters", index=i)


def project_gaussians(scene, cam: CameraModel, near=NEAR_PLANE, blur=BLUR) -> Projection:
    _check_finite(scene)
    n = len(scene)
    mu = np.asarray(scene.means, dtype=np.float64)
    q = np.asarray(scene.quats, dtype=np.float64)
    qnorm = np.linalg.norm(q, axis=-1) if n else np.zeros(0)
    qn = q / qnorm[:, None] if n else q
    R = quat_to_rotmat(qn) if n else np.zeros((0, 3, 3))
    s = np.exp(np.asarray(scene.log_scales, dtype=np.float64))
    opac = sigmoid(scene.logit_opacities)

    Rwc = cam.pose.rotation.matrix
    W = Rwc.T
    t = (mu - cam.pose.translation) @ Rwc  # == W @ (mu - c)
    z = t[:, 2]
    in_front = z > near
    zs = np.where(in_front, z, 1.0)
    x, y = t[:, 0], t[:, 1]

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2

    M = R * s[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    cov_cam = W @ cov3 @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += blur
    cov2d[:, 1, 1] += blur

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.empty_like(cov2d)
    conics[:, 0, 0] = c / det
    conics[:, 1, 1] = a / det
    conics[:, 0, 1] = conics[:, 1, 0] = -b / det
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radii = FOOTPRINT_SIGMA * np.sqrt(lam_max)

    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=-1)
    on_screen = ((means2d[:, 0] + radii >= 0) & (means2d[:, 0] - radii <= cam.width - 1)
                 & (means2d[:, 1] + radii >= 0) & (means2d[:, 1] - radii <= cam.height - 1))
    visible = in_front & on_screen & np.isfinite(radii)

    v = mu - cam.pose.translation
    dir_len = np.linalg.norm(v, axis=-1)
    dirs = v / np.maximum(dir_len, 1e-12)[:, None]
    sh = np.asarray(scene.sh, dtype=np.float64)
    color_raw = np.einsum("nk,nkc->nc", sh_basis(dirs, scene.sh_degree), sh) + SH_OFFSET
    colors = np.maximum(color_raw, 0.0)

    return Projection(means2d, cov2d, conics, z, radii, colors, opac, visible,
                      t, J, cov_cam, R, s, qn, qnorm, dirs, dir_len, color_raw)


def project_gaussian(g, cam: CameraModel, near=NEAR_PLANE):
    """(mean2d, cov2d, depth) of a single primitive, or None when culled."""
    from .gaussians import Scene
    scene = Scene(g.center[None], g.log_scale[None], g.quat[None], np.array([g.logit_opacity]), g.sh[None])
    p = project_gaussians(scene, cam, near)
    if not p.visible[0]:
        return None
    return p.means2d[0], p.cov2d[0], float(p.depths[0])


def _depth_order(proj):
    idx = np.flatnonzero(proj.visible)
    return idx[np.argsort(proj.depths[idx], kind="stable")]


def _bin_tiles(proj, order, width, height, tile_size):
    """Per-tile Gaussian id lists, each in global front-to-back order."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    m, r = proj.means2d[order], proj.radii[order]
    u0 = np.clip(np.ceil(m[:, 0] - r), 0, width - 1).astype(np.int64) // tile_size
    u1 = np.clip(np.floor(m[:, 0] + r), 0, width - 1).astype(np.int64) // tile_size
    v0 = np.clip(np.ceil(m[:, 1] - r), 0, height - 1).astype(np.int64) // tile_size
    v1 = np.clip(np.floor(m[:, 1] + r), 0, height - 1).astype(np.int64) // tile_size
    bins = [[] for _ in range(ntx * nty)]
    for rank, gid in enumerate(order):
        for ty in range(v0[rank], v1[rank] + 1):
            row = ty * ntx
            for tx in range(u0[rank], u1[rank] + 1):
                bins[row + tx].append(gid)
    return ntx, nty, [np.asarray(b, dtype=np.int64) for b in bins]


def _tile_pixels(tx, ty, tile_size, width, height):
    us = np.arange(tx * tile_size, min((tx + 1) * tile_size, width))
    vs = np.arange(ty * tile_size, min((ty + 1) * tile_size, height))
    uu, vv = np.meshgrid(us, vs)
    return vv.ravel(), uu.ravel()


def _tile_forward(pix, ids, proj, t_min=T_MIN):
    """Kernel values, weights and transmittances for one tile (pixels x Gaussians)."""
    d = pix[:, None, :] - proj.means2d[ids][None, :, :]
    A = proj.conics[ids]
    dx, dy = d[..., 0], d[..., 1]
    q = A[:, 0, 0] * dx * dx + 2.0 * A[:, 0, 1] * dx * dy + A[:, 1, 1] * dy * dy
    G = np.where(q <= CUTOFF_Q, np.exp(-0.5 * q), 0.0)
    alpha = proj.opacities[ids] * G
    one_m = 1.0 - alpha
    T_after = np.cumprod(one_m, axis=1)
    T_before = np.empty_like(T_after)
    T_before[:, 0] = 1.0
    T_before[:, 1:] = T_after[:, :-1]
    include = T_before >= t_min
    w = np.where(include, alpha * T_before, 0.0)
    T_final = np.prod(np.where(include, one_m, 1.0), axis=1)
    return dict(d=d, G=G, alpha=alpha, one_m=one_m, T_before=T_before, include=include, w=w, T_final=T_final)


def _prepare(scene, cam, tile_size):
    if tile_size <= 0:
        raise InvalidInputError("tile size must be positive")
    proj = project_gaussians(scene, cam)
    order = _depth_order(proj)
    ntx, nty, bins = _bin_tiles(proj, order, cam.width, cam.height, tile_size)
    return proj, ntx, nty, bins


def render(scene, cam: CameraModel, tile_size=TILE_SIZE, background=(0.0, 0.0, 0.0),
           t_min=T_MIN) -> RenderOutput:
    """Front-to-back alpha compositing over tiles, terminating per pixel once T < t_min."""
    bg = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    rgb = np.empty((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    rgb[:] = bg
    proj, ntx, nty, bins = _prepare(scene, cam, tile_size)
    for ty in range(nty):
        for tx in range(ntx):
            ids = bins[ty * ntx + tx]
            if ids.size == 0:
                continue
            rows, cols = _tile_pixels(tx, ty, tile_size, W, H)
            pix = np.stack([cols, rows], axis=-1).astype(np.float64)
            f = _tile_forward(pix, ids, proj, t_min)
            w = f["w"]
            rgb[rows, cols] = w @ proj.colors[ids] + f["T_final"][:, None] * bg
            depth[rows, cols] = w @ proj.depths[ids]
            alpha[rows, cols] = 1.0 - f["T_final"]
    return RenderOutput(rgb, depth, alpha)


def render_brute_force(scene, cam: CameraModel, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Reference renderer: global depth sort, every Gaussian at every pixel, no termination."""
    bg = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    proj = project_gaussians(scene, cam)
    vv, uu = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    for k in _depth_order(proj):
        mx, my = proj.means2d[k]
        dx, dy = uu - mx, vv - my
        A = proj.conics[k]
        q = A[0, 0] * dx * dx + 2.0 * A[0, 1] * dx * dy + A[1, 1] * dy * dy
        a = proj.opacities[k] * np.where(q <= CUTOFF_Q, np.exp(-0.5 * q), 0.0)
        C += (T * a)[..., None] * proj.colors[k]
        D += T * a * proj.depths[k]
        T = T * (1.0 - a)
    return RenderOutput(C + T[..., None] * bg, D, 1.0 - T)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _quat_backward(qn, qnorm, gR):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = gR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    radial = np.sum(gqn * qn, axis=-1, keepdims=True)
    return (gqn - radial * qn) / qnorm[:, None]


def render_backward(scene, cam: CameraModel, d_rgb, d_depth=None, tile_size=TILE_SIZE,
                    background=(0.0, 0.0, 0.0), t_min=T_MIN) -> ParamGradients:
    """Reverse-mode gradients of sum(d_rgb * rgb) + sum(d_depth * depth) w.r.t. scene parameters."""
    H, W = cam.height, cam.width
    d_rgb = np.asarray(d_rgb, dtype=np.float64)
    if d_rgb.shape != (H, W, 3):
        raise InvalidInputError(f"d_rgb must have shape {(H, W, 3)}, got {d_rgb.shape}")
    d_depth = np.zeros((H, W)) if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    if d_depth.shape != (H, W):
        raise InvalidInputError(f"d_depth must have shape {(H, W)}, got {d_depth.shape}")
    if not (np.all(np.isfinite(d_rgb)) and np.all(np.isfinite(d_depth))):
        raise InvalidInputError("upstream gradients must be finite")
    bg = np.asarray(background, dtype=np.float64)

    n = len(scene)
    proj, ntx, nty, bins = _prepare(scene, cam, tile_size)
    g_m2 = np.zeros((n, 2))
    g_A = np.zeros((n, 2, 2))
    g_op = np.zeros(n)
    g_col = np.zeros((n, 3))
    g_z = np.zeros(n)

    # tiles are independent; per-Gaussian accumulators are reduced in fixed tile order
    for ty in range(nty):
        for tx in range(ntx):
            ids = bins[ty * ntx + tx]
            if ids.size == 0:
                continue
            rows, cols = _tile_pixels(tx, ty, tile_size, W, H)
            pix = np.stack([cols, rows], axis=-1).astype(np.float64)
            # replaying the forward pass yields the same per-pixel terminal index
            f = _tile_forward(pix, ids, proj, t_min)
            gC = d_rgb[rows, cols]
            gD = d_depth[rows, cols]
            w, alpha = f["w"], f["alpha"]
            col = proj.colors[ids]
            zk = proj.depths[ids]

            np.add.at(g_col, ids, w.T @ gC)
            np.add.at(g_z, ids, w.T @ gD)

            e = gC @ col.T + gD[:, None] * zk[None, :]
            we = w * e
            suffix = np.cumsum(we[:, ::-1], axis=1)[:, ::-1] - we
            tail = suffix + (f["T_final"] * (gC @ bg))[:, None]
            g_alpha = np.where(f["include"], f["T_before"] * e - tail / f["one_m"], 0.0)

            np.add.at(g_op, ids, np.sum(g_alpha * f["G"], axis=0))
            g_q = g_alpha * (-0.5 * alpha)
            d = f["d"]
            dx, dy = d[..., 0], d[..., 1]
            A = proj.conics[ids]
            Ad_x = A[None, :, 0, 0] * dx + A[None, :, 0, 1] * dy
            Ad_y = A[None, :, 1, 0] * dx + A[None, :, 1, 1] * dy
            np.add.at(g_m2, ids, np.stack([np.sum(g_q * -2.0 * Ad_x, axis=0),
                                           np.sum(g_q * -2.0 * Ad_y, axis=0)], axis=-1))
            gxx = np.sum(g_q * dx * dx, axis=0)
            gxy = np.sum(g_q * dx * dy, axis=0)
            gyy = np.sum(g_q * dy * dy, axis=0)
            np.add.at(g_A, ids, np.stack([np.stack([gxx, gxy], -1), np.stack([gxy, gyy], -1)], -2))

    return _chain_to_params(scene, cam, proj, g_m2, g_A, g_op, g_col, g_z)


def _chain_to_params(scene, cam, proj, g_m2, g_A, g_op, g_col, g_z):
    n = len(scene)
    vis = proj.visible
    A = proj.conics
    g_cov2d = -(A @ g_A @ A)
    J, cov_cam = proj.J, proj.cov_cam
    g_cov_cam = np.swapaxes(J, 1, 2) @ g_cov2d @ J
    g_J = (g_cov2d + np.swapaxes(g_cov2d, 1, 2)) @ J @ cov_cam

    Rwc = cam.pose.rotation.matrix
    Wm = Rwc.T
    g_cov3 = Wm.T @ g_cov_cam @ Wm
    R, s = proj.R, proj.scales
    M = R * s[:, None, :]
    g_M = (g_cov3 + np.swapaxes(g_cov3, 1, 2)) @ M
    g_R = g_M * s[:, None, :]
    g_s = np.sum(g_M * R, axis=1)
    g_logs = g_s * s
    g_quat = _quat_backward(proj.qn, proj.qnorm, g_R) if n else np.zeros((0, 4))

    x, y = proj.t_cam[:, 0], proj.t_cam[:, 1]
    z = np.where(vis, proj.t_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    gt = np.zeros((n, 3))
    gt[:, 0] = g_m2[:, 0] * fx / z - g_J[:, 0, 2] * fx / z ** 2
    gt[:, 1] = g_m2[:, 1] * fy / z - g_J[:, 1, 2] * fy / z ** 2
    gt[:, 2] = (-(g_m2[:, 0] * fx * x + g_m2[:, 1] * fy * y) / z ** 2
                - g_J[:, 0, 0] * fx / z ** 2 + g_J[:, 0, 2] * 2 * fx * x / z ** 3
                - g_J[:, 1, 1] * fy / z ** 2 + g_J[:, 1, 2] * 2 * fy * y / z ** 3
                + g_z)
    g_mu = gt @ Wm  # Wᵀ g_t per row

    deg = scene.sh_degree
    g_raw = g_col * (proj.color_raw > 0)
    basis = sh_basis(proj.dirs, deg)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    if deg > 0:
        sh = np.asarray(scene.sh, dtype=np.float64)
        per_k = np.einsum("nkc,nc->nk", sh, g_raw)
        g_dir = np.einsum("nk,nkd->nd", per_k, sh_basis_jacobian(proj.dirs, deg))
        radial = np.sum(g_dir * proj.dirs, axis=-1, keepdims=True)
        g_mu = g_mu + (g_dir - radial * proj.dirs) / np.maximum(proj.dir_len, 1e-12)[:, None]

    o = proj.opacities
    g_logit = g_op * o * (1.0 - o)

    mask = vis.astype(np.float64)
    # t = W (mu - c) and cov_cam = W cov3 Wᵀ, with W = Rwcᵀ
    v = np.asarray(scene.means, dtype=np.float64) - cam.pose.translation
    cov3 = M @ np.swapaxes(M, 1, 2)
    g_W = np.einsum("ni,nj->ij", gt * mask[:, None], v)
    g_W += np.einsum("nij,jk,nkl->il", (g_cov_cam + np.swapaxes(g_cov_cam, 1, 2)) * mask[:, None, None], Wm, cov3)
    g_c = -np.sum(g_mu * mask[:, None], axis=0)
    return ParamGradients(
        means=g_mu * mask[:, None],
        log_scales=g_logs * mask[:, None],
        quats=g_quat * mask[:, None],
        logit_opacities=g_logit * mask,
        sh=g_sh * mask[:, None, None],
        camera_rotation=g_W.T,
        camera_translation=g_c,
    )


def transmittance_sequence(scene, cam, row, col, t_min=T_MIN):
    """Per-step transmittance at one pixel along the composited sequence (diagnostic)."""
    proj = project_gaussians(scene, cam)
    order = _depth_order(proj)
    pix = np.array([[float(col), float(row)]])
    if order.size == 0:
        return np.ones(1)
    f = _tile_forward(pix, order, proj, t_min)
    T = np.concatenate([[1.0], np.cumprod(np.where(f["include"][0], f["one_m"][0], 1.0))])
    return T
