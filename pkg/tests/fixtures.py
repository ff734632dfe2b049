"""Shared on-disk fixtures for the CLI and acceptance tests."""
import hashlib
import json
import os

import numpy as np

from splataug.equinet import EquiNet, NetConfig, save_weights
from splataug.gaussians import ply_export
from splataug.io import Manifest, ManifestEntry, save_episode, save_manifest, write_camera, write_png
from splataug.rasterizer import render
from splataug.synthetic import orbit_cameras, three_gaussian_scene, toy_episode

TINY_NET = NetConfig(token_dim=16, n_heads=2, n_aggregator_blocks=1, n_decoder_layers=1, head_channels=4)


def make_dataset(root, n_episodes=2, n_frames=3, with_scenes=True):
    """Source dataset directory with ``manifest.json`` and ``episodes/<id>``."""
    entries = []
    for s in range(n_episodes):
        ep, scenes = toy_episode(seed=s, n_frames=n_frames)
        rel = f"episodes/{ep.id}"
        save_episode(ep, os.path.join(root, rel), scenes if with_scenes else None)
        entries.append(ManifestEntry(ep.id, rel))
    save_manifest(Manifest(entries), os.path.join(root, "manifest.json"))
    return root


def make_render_inputs(root):
    """A scene PLY, two camera files and the matching rendered PNGs."""
    os.makedirs(root, exist_ok=True)
    scene = three_gaussian_scene(np.float32)
    ply_export(scene, os.path.join(root, "scene.ply"))
    paths = {"scene": os.path.join(root, "scene.ply"), "cameras": [], "images": []}
    for i, cam in enumerate(orbit_cameras(2, 16, 16, radius=1.6)):
        cp, ip = os.path.join(root, f"cam{i}.json"), os.path.join(root, f"view{i}.png")
        write_camera(cp, cam)
        write_png(ip, render(scene, cam).rgb)
        paths["cameras"].append(cp)
        paths["images"].append(ip)
    return paths


def make_weights(root, cfg=TINY_NET):
    return save_weights(EquiNet(cfg), os.path.join(root, "weights"))


def write_tiny_train_config(path):
    with open(path, "w") as f:
        json.dump({"net": TINY_NET.to_dict(), "batch_size": 1}, f)
    return path


def tree_digest(root):
    """Relative path -> sha256 of every file under ``root``."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = hashlib.sha256(f.read()).hexdigest()
    return out
