"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys

import numpy as np

from .errors import SplatAugError

log = logging.getLogger("splataug")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "GENSPLAT_THREADS"


class UsageError(Exception):
    def __init__(self, message, reported=False):
        super().__init__(message)
        self.reported = reported


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message, reported=True)


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        from .errors import ParseError
        raise ParseError(f"config {path} is not valid JSON: {e.msg}", offset=e.pos) from None
    if not isinstance(cfg, dict):
        from .errors import InvalidInputError
        raise InvalidInputError("config file must hold a JSON object")
    return cfg


def _emit(records, out=None):
    from .io import write_json
    text = "\n".join(json.dumps(r, sort_keys=True) for r in records)
    print(text)
    if out:
        write_json(out, records if len(records) != 1 else records[0])


def _metric(name, value, step=None):
    from .io import json_number
    return {"name": name, "value": json_number(value), "step": step}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_render(args):
    from .gaussians import ply_import
    from .io import read_camera, write_png, write_tensor
    from .rasterizer import render
    scene = ply_import(args.scene)
    cam = read_camera(args.camera)
    bg = tuple(float(x) for x in args.background.split(","))
    out = render(scene, cam, background=bg)
    write_png(args.out, out.rgb)
    if args.depth_out:
        write_tensor(args.depth_out, out.depth)
    return EXIT_OK


def cmd_fit(args):
    from dataclasses import fields, replace
    from .gaussians import ply_export, ply_import
    from .io import read_camera, read_png
    from .synthetic import random_scene
    from .trainer import FitConfig, fit_scene, scene_psnr
    if len(args.images) != len(args.cameras):
        raise UsageError("fit needs one --cameras entry per --images entry")
    views = [{"image": read_png(i).astype(np.float64) / 255.0, "camera": read_camera(c)}
             for i, c in zip(args.images, args.cameras)]
    cfg_d = _load_config(args.config)
    known = {f.name for f in fields(FitConfig)}
    bad = set(cfg_d) - known
    if bad:
        from .errors import InvalidInputError
        raise InvalidInputError(f"unknown fit config keys: {sorted(bad)}")
    cfg = FitConfig(**cfg_d)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.lr is not None:
        cfg = replace(cfg, lr=args.lr)
    rng = np.random.default_rng(args.seed)
    init = ply_import(args.init).astype(np.float64) if args.init else random_scene(rng, args.n_gaussians)
    res = fit_scene(views, init, cfg)
    ply_export(res.scene, args.out)
    recs = [_metric(f"psnr/view{i}", p, res.best_step) for i, p in enumerate(scene_psnr(res.scene, views))]
    _emit(recs, args.metrics_out)
    return EXIT_OK


def cmd_infer(args):
    import torch
    from .equinet import load_weights
    from .gaussians import ply_export
    from .io import read_png, write_json, write_tensor
    model, _ = load_weights(args.weights)
    images = np.stack([read_png(p).astype(np.float32) / 255.0 for p in args.images])
    with torch.no_grad():
        out = model(torch.as_tensor(images))
    if args.anchor:
        out = out.anchored(0)
    os.makedirs(args.out, exist_ok=True)
    ply_export(out.scene(), os.path.join(args.out, "scene.ply"))
    write_tensor(os.path.join(args.out, "pointmaps.gstf"), out.points.numpy())
    write_tensor(os.path.join(args.out, "confidence.gstf"), out.confidence.numpy())
    poses = [{"qw": float(p.rotation.quat[0]), "qx": float(p.rotation.quat[1]), "qy": float(p.rotation.quat[2]),
              "qz": float(p.rotation.quat[3]), "tx": float(p.translation[0]), "ty": float(p.translation[1]),
              "tz": float(p.translation[2])} for p in out.poses()]
    write_json(os.path.join(args.out, "poses.json"), {"poses": poses, "images": list(args.images)})
    return EXIT_OK


def _predicted_scenes(model, ep):
    """Per-frame scenes predicted from the episode's external views, moved into its world frame."""
    import torch
    from .gaussians import transform_scene
    names = ep.external_cameras
    anchor_pose = ep.cameras[names[0]].pose
    scenes = []
    for fr in ep.frames:
        imgs = np.stack([fr.images[n].astype(np.float32) / 255.0 for n in names])
        with torch.no_grad():
            out = model(torch.as_tensor(imgs)).anchored(0)
        scenes.append(transform_scene(out.scene(np.float64), anchor_pose))
    return scenes


def cmd_augment(args):
    from .augment import augment_episode, build_training_set, custom_level, preset
    from .io import Manifest, ManifestEntry, load_episode, load_manifest, load_scenes, save_episode, save_manifest
    if args.level == "custom":
        vals = (args.theta_min, args.theta_max, args.mu_min, args.mu_max)
        if any(v is None for v in vals):
            raise UsageError("--level custom needs --theta-min, --theta-max, --mu-min and --mu-max")
        level = custom_level(*vals)
    else:
        if any(v is not None for v in (args.theta_min, args.theta_max, args.mu_min, args.mu_max)):
            raise UsageError("--theta-*/--mu-* only apply to --level custom")
        level = preset(args.level)
    axes = {"x": ("X",), "y": ("Y",), "both": ("X", "Y")}[args.axis]
    level = dataclasses.replace(level, axes=axes)
    src_manifest_path = os.path.join(args.in_dir, "manifest.json")
    source = load_manifest(src_manifest_path)
    model = None
    if args.weights:
        from .equinet import load_weights
        model, _ = load_weights(args.weights)

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    src_entries, aug_entries = [], []
    for entry in source.entries:
        ep_dir = os.path.join(args.in_dir, entry.path)
        ep = load_episode(ep_dir)
        scenes = load_scenes(ep_dir, len(ep.frames))
        if any(s is None for s in scenes) and model is not None:
            scenes = _predicted_scenes(model, ep)
        # one child seed per episode, drawn in manifest order
        ep_seed = int(rng.integers(2 ** 63))
        augmented = augment_episode(ep, scenes, level, args.views, ep_seed, perturb_wrist=args.perturb_wrist,
                                    independent=args.independent)
        rel = os.path.join("episodes", ep.id)
        dst = os.path.join(args.out, rel)
        if os.path.exists(dst):
            shutil.rmtree(dst)
        shutil.copytree(ep_dir, dst)
        src_entries.append(ManifestEntry(ep.id, rel, "source"))
        for aug in augmented:
            arel = os.path.join("episodes", aug.id)
            save_episode(aug, os.path.join(args.out, arel))
            aug_entries.append(ManifestEntry(aug.id, arel, "augmented", aug.meta["perturbation"], ep.id))
    aug_manifest = Manifest(aug_entries)
    combined = build_training_set(Manifest(src_entries), aug_manifest)
    save_manifest(aug_manifest, os.path.join(args.out, "augmented.json"))
    save_manifest(combined, os.path.join(args.out, "manifest.json"))
    print(json.dumps({"source": len(src_entries), "augmented": len(aug_entries), "total": len(combined)},
                     sort_keys=True))
    return EXIT_OK


def cmd_train_toy(args):
    from dataclasses import replace
    from .equinet import NetConfig
    from .losses import PyramidL1
    from .synthetic import toy_dataset
    from .trainer import TrainConfig, dataset_loss, preset, train_feedforward
    cfg_d = _load_config(args.config)
    net_d = cfg_d.pop("net", {})
    cfg = TrainConfig.from_dict({**preset("toy").to_dict(), **cfg_d})
    cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps, warmup_steps=min(cfg.warmup_steps, max(args.steps - 1, 0)))
    net_cfg = NetConfig.from_dict({**NetConfig().to_dict(), "seed": args.seed, **net_d})
    data = toy_dataset(args.scenes, args.views, args.size, seed=args.seed)
    perceptual = PyramidL1()
    from .equinet import EquiNet
    model = EquiNet(net_cfg)
    initial = dataset_loss(model, data, cfg.weights, perceptual)
    res = train_feedforward(data, cfg, out_dir=args.out, perceptual=perceptual, model=model,
                            checkpoint_every=args.checkpoint_every)
    final = dataset_loss(res.model, data, cfg.weights, perceptual)
    _emit([_metric("total_loss/initial", initial, 0), _metric("total_loss/final", final, cfg.steps)],
          os.path.join(args.out, "summary.json"))
    return EXIT_OK


def _image_pairs(a, b):
    if os.path.isdir(a) and os.path.isdir(b):
        names = sorted(n for n in os.listdir(a) if n.lower().endswith(".png"))
        missing = [n for n in names if not os.path.isfile(os.path.join(b, n))]
        if missing:
            from .errors import LoadError
            raise LoadError(f"{b} lacks images {missing}", field=missing[0])
        return [(n, os.path.join(a, n), os.path.join(b, n)) for n in names]
    return [(os.path.basename(a), a, b)]


def cmd_metrics(args):
    from .errors import InvalidInputError
    from .io import read_png
    from .losses import psnr
    recs = []
    values = []
    for name, pa, pb in _image_pairs(args.a, args.b):
        A, B = read_png(pa), read_png(pb)
        if A.shape != B.shape:
            raise InvalidInputError(f"{name}: image shapes differ {A.shape} vs {B.shape}")
        v = psnr(A.astype(np.float64) / 255.0, B.astype(np.float64) / 255.0)
        values.append(v)
        recs.append(_metric(f"psnr/{name}", v))
    if len(values) > 1:
        recs.append(_metric("psnr/mean", float(np.mean(values))))
    _emit(recs, args.out)
    return EXIT_OK


def cmd_validate(args):
    from .io import load_episode, load_manifest
    path = args.path
    if os.path.isdir(path) and os.path.isfile(os.path.join(path, "episode.json")):
        ep = load_episode(path)
        print(json.dumps({"episode": ep.id, "frames": len(ep.frames), "ok": True}, sort_keys=True))
        return EXIT_OK
    mpath = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
    manifest = load_manifest(mpath)
    base = os.path.dirname(os.path.abspath(mpath))
    if not args.shallow:
        from .errors import LoadError
        for e in manifest.entries:
            try:
                ep = load_episode(os.path.join(base, e.path))
            except LoadError as err:
                raise LoadError(f"episode '{e.id}': {err}", field=e.id) from None
            if ep.id != e.id:
                raise LoadError(f"episode '{e.id}' stores id '{ep.id}'", field=e.id)
    print(json.dumps({"manifest": mpath, "episodes": len(manifest), "ok": True}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="splataug", description="Gaussian-splat reconstruction and novel-view augmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("render", cmd_render, "render a PLY scene from a camera")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--depth-out")
    sp.add_argument("--background", default="0,0,0")

    sp = add("fit", cmd_fit, "fit Gaussians to posed images")
    sp.add_argument("--images", nargs="+", required=True)
    sp.add_argument("--cameras", nargs="+", required=True)
    sp.add_argument("--init")
    sp.add_argument("--n-gaussians", type=int, default=32)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics-out")

    sp = add("infer", cmd_infer, "feed-forward reconstruction from images")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--images", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--anchor", action="store_true", help="express poses relative to the first view")

    sp = add("augment", cmd_augment, "re-render episodes from perturbed viewpoints")
    sp.add_argument("--level", required=True, choices=["small", "medium", "large", "extreme", "train", "custom"])
    sp.add_argument("--theta-min", type=float)
    sp.add_argument("--theta-max", type=float)
    sp.add_argument("--mu-min", type=float)
    sp.add_argument("--mu-max", type=float)
    sp.add_argument("--axis", choices=["x", "y", "both"], default="both")
    sp.add_argument("--views", type=int, default=1)
    sp.add_argument("--in", dest="in_dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", help="network used when an episode has no stored scenes")
    sp.add_argument("--perturb-wrist", action="store_true")
    sp.add_argument("--independent", action="store_true", help="perturb each external camera separately")

    sp = add("train-toy", cmd_train_toy, "train the toy network on synthetic scenes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--scenes", type=int, default=20)
    sp.add_argument("--views", type=int, default=2)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--checkpoint-every", type=int, default=100)

    sp = add("metrics", cmd_metrics, "PSNR between two images or two directories of PNGs")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--out")

    sp = add("validate", cmd_validate, "check a manifest or episode directory")
    sp.add_argument("path")
    sp.add_argument("--shallow", action="store_true", help="only check that referenced paths exist")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "augment" and args.views < 1:
            parser.error("--views must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        threads = _threads()
        if threads is not None:
            import torch
            torch.set_num_threads(threads)
        return args.func(args)
    except UsageError as e:
        if not e.reported:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except SplatAugError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
