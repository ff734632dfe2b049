"""Seeded synthetic scenes, cameras and datasets used by tests, fitting and toy training."""
from __future__ import annotations

import numpy as np

from .gaussians import Scene, logit, num_sh_coeffs, rgb_to_sh_dc
from .geometry import CameraModel, look_at, pixel_rays


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_camera(width, height, eye, target=(0.0, 0.0, 0.0), fov_deg=60.0, up=(0.0, 0.0, 1.0)):
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraModel(f, f, (width - 1) / 2, (height - 1) / 2, width, height, look_at(eye, target, up))


def orbit_cameras(n_views, width, height, radius=2.0, elevation_deg=25.0, target=(0.0, 0.0, 0.0),
                  fov_deg=60.0, phase=0.0, spread_deg=360.0):
    cams = []
    el = np.radians(elevation_deg)
    for i in range(n_views):
        az = np.radians(phase + spread_deg * i / max(n_views, 1))
        eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(make_camera(width, height, eye, target, fov_deg))
    return cams


def random_scene(rng, n, sh_degree=0, extent=0.5, log_scale_range=(-3.0, -1.5), opacity_range=(0.05, 0.95),
                 sh_scale=0.3, dtype=np.float64):
    K = num_sh_coeffs(sh_degree)
    means = rng.uniform(-extent, extent, size=(n, 3))
    log_scales = rng.uniform(*log_scale_range, size=(n, 3))
    quats = random_quats(rng, n)
    logits = logit(rng.uniform(*opacity_range, size=n))
    sh = np.zeros((n, K, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, size=(n, 3)))
    if K > 1:
        sh[:, 1:, :] = rng.normal(scale=sh_scale, size=(n, K - 1, 3))
    return Scene(means.astype(dtype), log_scales.astype(dtype), quats.astype(dtype), logits.astype(dtype),
                 sh.astype(dtype), sh_degree)


def random_camera(rng, width, height, radius_range=(1.8, 2.6)):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    r = rng.uniform(*radius_range)
    target = rng.uniform(-0.1, 0.1, size=3)
    return make_camera(width, height, target + r * d, target, fov_deg=rng.uniform(40, 70))


def three_gaussian_scene(dtype=np.float64):
    """A fixed, well-separated three-blob scene in front of a shared target point."""
    means = np.array([[0.0, 0.0, 0.0], [0.25, -0.15, 0.1], [-0.2, 0.2, -0.1]])
    log_scales = np.log(np.array([[0.12, 0.08, 0.10], [0.07, 0.10, 0.06], [0.09, 0.06, 0.11]]))
    quats = np.array([[1.0, 0.0, 0.0, 0.0], [0.9, 0.2, -0.1, 0.3], [0.8, -0.3, 0.4, 0.1]])
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    logits = logit(np.array([0.9, 0.8, 0.85]))
    sh = rgb_to_sh_dc(np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9]]))[:, None, :]
    return Scene(means.astype(dtype), log_scales.astype(dtype), quats.astype(dtype), logits.astype(dtype),
                 sh.astype(dtype), 0)


# ---------------------------------------------------------------------------
# toy multi-view dataset with teacher point maps and poses
# ---------------------------------------------------------------------------

def backdrop_scene(rng, n_blobs=4):
    """Colored blobs in front of a back wall, so every pixel of the toy views is covered."""
    g = np.linspace(-1.6, 1.6, 9)
    yy, zz = np.meshgrid(g, g)
    wall = np.stack([np.full(yy.size, -0.9), yy.ravel(), zz.ravel()], axis=1)
    nw = wall.shape[0]
    blobs = rng.uniform(-0.35, 0.35, size=(n_blobs, 3))
    means = np.concatenate([wall, blobs])
    scales = np.concatenate([np.tile([[0.02, 0.28, 0.28]], (nw, 1)),
                             rng.uniform(0.08, 0.18, size=(n_blobs, 3))])
    quats = np.concatenate([np.tile([[1.0, 0, 0, 0]], (nw, 1)), random_quats(rng, n_blobs)])
    logits = logit(np.concatenate([np.full(nw, 0.97), rng.uniform(0.7, 0.95, n_blobs)]))
    base = rng.uniform(0.2, 0.6, size=3)
    wall_rgb = np.clip(base + rng.normal(scale=0.05, size=(nw, 3)), 0, 1)
    rgb = np.concatenate([wall_rgb, rng.uniform(0.0, 1.0, size=(n_blobs, 3))])
    return Scene(means, np.log(scales), quats, logits, rgb_to_sh_dc(rgb)[:, None, :], 0)


def toy_views(rng, n_views=2, size=16):
    """Cameras on the +x side facing the back wall, jittered around a common target."""
    cams = []
    for _ in range(n_views):
        az = rng.uniform(-35, 35)
        el = rng.uniform(-15, 25)
        r = rng.uniform(1.6, 2.0)
        a, e = np.radians(az), np.radians(el)
        eye = r * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        cams.append(make_camera(size, size, eye, rng.uniform(-0.1, 0.1, size=3), fov_deg=55.0))
    return cams


def teacher_pointmap(scene, cam, render_fn):
    """Camera-frame point map from the expected depth of a covered scene."""
    out = render_fn(scene, cam)
    depth = out.depth / np.maximum(out.alpha, 1e-6)
    return pixel_rays(cam) * depth[..., None], out


def toy_dataset(n_scenes=20, n_views=2, size=16, seed=0):
    """List of dicts: images (V,H,W,3), cameras, teacher point maps (V,H,W,3), scene."""
    from .rasterizer import render
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n_scenes):
        scene = backdrop_scene(rng)
        cams = toy_views(rng, n_views, size)
        imgs, pms = [], []
        for cam in cams:
            pm, out = teacher_pointmap(scene, cam, render)
            imgs.append(np.clip(out.rgb, 0.0, 1.0))
            pms.append(pm)
        items.append({"images": np.stack(imgs).astype(np.float32), "cameras": cams,
                      "pointmaps": np.stack(pms).astype(np.float32), "scene": scene})
    return items


def toy_episode(seed=0, n_frames=10, size=16, n_external=2, wrist=True, action_dim=7, episode_id=None):
    """A short synthetic demonstration: a blob moving over the backdrop, seen by static cameras.

    Returns ``(episode, scenes)`` with one scene per frame in the episode's world frame.
    """
    from .io import Episode, Frame, to_uint8
    from .rasterizer import render
    rng = np.random.default_rng(seed)
    base = backdrop_scene(rng, n_blobs=2)
    cams = {}
    for k, cam in enumerate(toy_views(rng, n_external, size)):
        cams[f"ext{k}"] = cam
    wrist_names = ()
    if wrist:
        cams["wrist"] = make_camera(size, size, (0.9, 0.05, 0.6), (0.0, 0.0, 0.0), fov_deg=70.0)
        wrist_names = ("wrist",)
    start, end = rng.uniform(-0.3, 0.3, size=3), rng.uniform(-0.3, 0.3, size=3)
    scenes, frames = [], []
    for t in range(n_frames):
        s = t / max(n_frames - 1, 1)
        mover = Scene(((1 - s) * start + s * end)[None], np.log([[0.1, 0.1, 0.1]]), np.array([[1.0, 0, 0, 0]]),
                      logit(np.array([0.9])), rgb_to_sh_dc(np.array([[0.9, 0.8, 0.1]]))[:, None, :], 0)
        scene = Scene.concatenate([base, mover])
        scenes.append(scene)
        images = {n: to_uint8(render(scene, c).rgb) for n, c in cams.items()}
        action = rng.normal(size=action_dim).astype(np.float32)
        frames.append(Frame(0.1 * t, images, action))
    ep = Episode(episode_id or f"demo{seed:04d}", frames, "move the yellow block", cams, wrist_names)
    return ep, scenes
