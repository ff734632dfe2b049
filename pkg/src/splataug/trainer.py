"""Optimization drivers: per-scene Gaussian fitting and toy feed-forward training."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DegenerateOutputError, InvalidInputError, RenderError, TrainingError
from .gaussians import Scene
from .losses import LossWeights, depth_loss, depth_mask, psnr, rgb_loss
from .rasterizer import T_MIN, render, render_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    peak_lr: float = 2e-4
    warmup_steps: int = 25
    ema_decay: float = 0.999
    lr_scale_pretrained: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    momentum: float = 0.9
    pretrained_prefixes: tuple = ()

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.steps):
            raise InvalidInputError("warmup_steps must satisfy 0 <= warmup_steps < steps")
        if not self.peak_lr > 0:
            raise InvalidInputError("peak_lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise InvalidInputError("ema_decay must lie in [0, 1)")
        if self.lr_scale_pretrained < 0 or self.batch_size < 1:
            raise InvalidInputError("lr_scale_pretrained must be >= 0 and batch_size >= 1")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["pretrained_prefixes"] = list(self.pretrained_prefixes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "pretrained_prefixes" in d:
            d["pretrained_prefixes"] = tuple(d["pretrained_prefixes"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


PRESETS = {
    # large-scale schedule: 30k steps, batch 16, peak 2e-4, 1k warmup
    "paper": TrainConfig(steps=30_000, batch_size=16, peak_lr=2e-4, warmup_steps=1000, ema_decay=0.999,
                         lr_scale_pretrained=0.1,
                         pretrained_prefixes=("patch_embed", "aggregator", "pose_decoder", "point_decoder")),
    "toy": TrainConfig(steps=500, batch_size=2, peak_lr=0.05, warmup_steps=25, ema_decay=0.99),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidInputError(f"unknown training preset '{name}'; choose from {sorted(PRESETS)}") from None


def cosine_lr(step, cfg):
    """Linear warmup to ``peak_lr`` followed by cosine annealing to zero at ``steps``."""
    if not 0 <= step <= cfg.steps:
        raise InvalidInputError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def ema_update(ema, weights, decay):
    """decay * ema + (1 - decay) * w for every entry of a name -> array mapping (or one array)."""
    if isinstance(ema, dict):
        if set(ema) != set(weights):
            raise InvalidInputError("EMA and weight dictionaries have different keys")
        return {k: ema_update(ema[k], weights[k], decay) for k in ema}
    if tuple(np.shape(ema)) != tuple(np.shape(weights)):
        raise InvalidInputError(f"EMA shape {tuple(np.shape(ema))} != weight shape {tuple(np.shape(weights))}")
    if decay == 1:
        return ema
    if decay == 0:
        return weights.clone() if hasattr(weights, "clone") else np.array(weights, copy=True)
    mixed = decay * ema + (1.0 - decay) * weights
    # clamp away rounding so the result never leaves the [ema, w] interval
    if hasattr(mixed, "clamp"):
        import torch
        return torch.minimum(torch.maximum(mixed, torch.minimum(ema, weights)), torch.maximum(ema, weights))
    return np.clip(mixed, np.minimum(ema, weights), np.maximum(ema, weights))


# ---------------------------------------------------------------------------
# per-scene fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    steps: int = 2000
    lr: float = 0.3
    momentum: float = 0.9
    warmup_steps: int = 0
    ema_decay: float = 0.9
    l1: float = 1.0
    depth_weight: float = 0.0
    eval_every: int = 100
    # per-parameter-group multipliers on lr
    group_lr: dict = field(default_factory=lambda: {
        "means": 0.5, "log_scales": 5.0, "quats": 2.0, "logit_opacities": 20.0, "sh": 10.0})

    def schedule(self):
        return TrainConfig(steps=self.steps, peak_lr=self.lr, warmup_steps=self.warmup_steps, ema_decay=self.ema_decay)


@dataclass
class FitResult:
    scene: Scene
    history: list
    best_step: int


def _views_loss(scene, views, cfg, need_grad):
    total = 0.0
    grads = None
    nv = len(views)
    weights = LossWeights(l1=cfg.l1, perceptual=0.0)
    for v in views:
        out = render(scene, v["camera"])
        value, g_rgb = rgb_loss(v["image"], out.rgb, weights)
        g_depth = None
        if cfg.depth_weight > 0 and v.get("depth") is not None:
            mask = v.get("mask")
            mask = depth_mask(out.alpha) if mask is None else mask
            if mask.sum() > 0:
                dv, g_depth = depth_loss(v["depth"], out.depth, mask)
                value += cfg.depth_weight * dv
                g_depth = cfg.depth_weight * g_depth
        total += value / nv
        if need_grad:
            pg = render_backward(scene, v["camera"], g_rgb / nv, None if g_depth is None else g_depth / nv)
            grads = pg.as_dict() if grads is None else {k: grads[k] + pg.as_dict()[k] for k in grads}
    return total, grads


def fit_scene(views, init: Scene, cfg: FitConfig = FitConfig(), callback=None) -> FitResult:
    """Momentum-SGD photometric fit of ``init`` to target views.

    ``views`` is a list of dicts with ``image`` (H, W, 3) and ``camera`` and
    optionally ``depth``/``mask``. The EMA of the parameters is evaluated every
    ``eval_every`` steps and the best EMA snapshot is returned.
    """
    if not views:
        raise InvalidInputError("fit_scene needs at least one target view")
    if len(init) == 0:
        raise InvalidInputError("fit_scene needs a non-empty initial scene")
    sched = cfg.schedule()
    params = {k: np.array(v, dtype=np.float64) for k, v in init.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    ema = {k: v.copy() for k, v in params.items()}
    degree = init.sh_degree

    def as_scene(p):
        return Scene(**p, sh_degree=degree)

    best = (math.inf, init.astype(np.float64), 0)
    history = []
    for step in range(cfg.steps + 1):
        try:
            loss, grads = _views_loss(as_scene(params), views, cfg, need_grad=step < cfg.steps)
        except RenderError as e:
            # non-finite parameters are caught by the renderer before the loss sees them
            raise TrainingError(f"parameters became non-finite at step {step}: {e}", step=step) from e
        if not math.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}", step=step)
        history.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            ema_loss, _ = _views_loss(as_scene(ema), views, cfg, need_grad=False) if step else (loss, None)
            if ema_loss < best[0]:
                best = (ema_loss, as_scene({k: v.copy() for k, v in ema.items()}), step)
            if callback is not None:
                callback(step, loss, ema_loss)
        if step == cfg.steps:
            break
        lr = cosine_lr(step, sched)
        for k in params:
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            params[k] = params[k] - lr * cfg.group_lr.get(k, 1.0) * velocity[k]
        ema = ema_update(ema, params, cfg.ema_decay)
    return FitResult(best[1], history, best[2])


def scene_psnr(scene, views):
    return [psnr(v["image"], np.clip(render(scene, v["camera"]).rgb, 0.0, 1.0)) for v in views]


# ---------------------------------------------------------------------------
# feed-forward training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    ema_state: dict
    history: list
    paths: dict


def feedforward_loss(model, item, weights: LossWeights, perceptual=None, t_min=T_MIN):
    """Total loss of one multi-view item and its components (torch scalars).

    Every view is re-rendered from its predicted pose out of the fused scene
    of all views. The photometric and depth terms are averaged over views,
    the point-map term over views against the teacher point maps, and the
    camera term compares predicted and teacher relative poses.
    """
    import torch
    from .autodiff import camera_loss_t, depth_loss_t, pointmap_loss_t, render_t, rgb_loss_t

    images = np.asarray(item["images"])
    cams = item["cameras"]
    out = model(torch.as_tensor(images))
    params = out.gaussian_tensors()
    V = len(cams)
    zero = out.points.new_zeros(())
    l_rgb, l_depth, l_pm = zero, zero, zero
    for i, cam in enumerate(cams):
        rgb, depth, alpha = render_t(params, cam, out.rotations[i], out.translations[i], out.sh_degree,
                                     t_min=t_min)
        l_rgb = l_rgb + rgb_loss_t(images[i], rgb, weights, perceptual) / V
        mask = depth_mask(alpha.numpy())
        if weights.depth > 0 and mask.sum() > 0:
            l_depth = l_depth + depth_loss_t(out.points[i, ..., 2], depth, mask) / V
        if weights.pointmap > 0:
            l_pm = l_pm + pointmap_loss_t(out.points[i], item["pointmaps"][i]) / V
    l_cam = zero
    if weights.camera > 0 and V > 1:
        l_cam = camera_loss_t(out.rotations, out.translations, [c.pose for c in cams], weights.huber_delta)
    total = l_rgb + weights.depth * l_depth + weights.pointmap * l_pm + weights.camera * l_cam
    return total, {"rgb": l_rgb, "depth": l_depth, "pointmap": l_pm, "camera": l_cam}


def dataset_loss(model, dataset, weights: LossWeights, perceptual=None):
    import torch
    with torch.no_grad():
        return float(np.mean([float(feedforward_loss(model, item, weights, perceptual)[0]) for item in dataset]))


def _write_jsonl(path, records):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)


def train_feedforward(dataset, cfg: TrainConfig = PRESETS["toy"], net_cfg=None, out_dir=None, perceptual=None,
                      checkpoint_every=100, model=None, callback=None) -> TrainResult:
    """Momentum SGD on the total loss over network weights, with EMA and per-group LR scaling.

    Parameters whose names fall under ``cfg.pretrained_prefixes`` are flagged
    "pretrained" in the weight manifest and use ``lr * lr_scale_pretrained``.
    With ``out_dir`` the run writes ``loss.jsonl``, ``config.json``,
    periodic ``checkpoint-<step>`` archives and final ``weights`` and
    ``weights-ema`` archives.
    """
    import torch
    from .equinet import EquiNet, NetConfig, is_pretrained, save_weights

    if not dataset:
        raise InvalidInputError("train_feedforward needs a non-empty dataset")
    if model is None:
        net_cfg = NetConfig() if net_cfg is None else net_cfg
        model = EquiNet(net_cfg)
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    scale = {n: (cfg.lr_scale_pretrained if is_pretrained(n, cfg.pretrained_prefixes) else 1.0) for n in params}
    velocity = {n: torch.zeros_like(p) for n, p in params.items()}
    ema = {n: p.detach().clone() for n, p in params.items()}
    paths = {}
    extra = {"config_digest": cfg.digest()}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump({"train": cfg.to_dict(), "net": model.cfg.to_dict(), "digest": cfg.digest()}, f,
                      indent=1, sort_keys=True)
        paths["config"] = os.path.join(out_dir, "config.json")
    last_good = None
    history = []

    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg)
        batch = rng.choice(len(dataset), size=cfg.batch_size, replace=len(dataset) < cfg.batch_size)
        model.zero_grad(set_to_none=True)
        total = 0.0
        comps = {}
        for b in batch:
            try:
                loss, parts = feedforward_loss(model, dataset[int(b)], cfg.weights, perceptual)
            except (RenderError, DegenerateOutputError) as e:
                raise TrainingError(f"non-finite network output at step {step}: {e}; last good checkpoint: "
                                    f"{last_good}", step=step, checkpoint=last_good) from e
            (loss / cfg.batch_size).backward()
            total += float(loss.detach()) / cfg.batch_size
            for k, v in parts.items():
                comps[k] = comps.get(k, 0.0) + float(v.detach()) / cfg.batch_size
        grads_ok = all(p.grad is None or bool(torch.all(torch.isfinite(p.grad))) for p in params.values())
        if not (math.isfinite(total) and grads_ok):
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {last_good}",
                                step=step, checkpoint=last_good)
        with torch.no_grad():
            for n, p in params.items():
                if p.grad is None or scale[n] == 0:
                    continue
                velocity[n].mul_(cfg.momentum).add_(p.grad)
                p.sub_(lr * scale[n] * velocity[n])
            ema = ema_update(ema, {n: p.detach() for n, p in params.items()}, cfg.ema_decay)
        record = {"step": step, "lr": lr, "total": total, **comps}
        history.append(record)
        if callback is not None:
            callback(record)
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            last_good = save_weights(model, os.path.join(out_dir, f"checkpoint-{step + 1:06d}"),
                                     cfg.pretrained_prefixes, extra={**extra, "step": step + 1})
            _write_jsonl(os.path.join(out_dir, "loss.jsonl"), history)

    ema_state = {n: t.clone() for n, t in ema.items()}
    if out_dir is not None:
        full_ema = dict(model.state_dict())
        full_ema.update(ema_state)
        paths["weights"] = save_weights(model, os.path.join(out_dir, "weights"), cfg.pretrained_prefixes,
                                        extra={**extra, "step": cfg.steps})
        paths["weights_ema"] = save_weights(model, os.path.join(out_dir, "weights-ema"), cfg.pretrained_prefixes,
                                            extra={**extra, "step": cfg.steps, "ema": True}, state=full_ema)
        paths["loss_curve"] = os.path.join(out_dir, "loss.jsonl")
        _write_jsonl(paths["loss_curve"], history)
    return TrainResult(model, ema_state, history, paths)
