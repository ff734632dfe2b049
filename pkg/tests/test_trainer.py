import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from splataug.equinet import NetConfig, EquiNet, load_weights
from splataug.errors import InvalidInputError, TrainingError
from splataug.losses import LossWeights, PyramidL1
from splataug.synthetic import orbit_cameras, three_gaussian_scene, toy_dataset
from splataug.rasterizer import render
from splataug.trainer import (PRESETS, FitConfig, TrainConfig, cosine_lr, ema_update, feedforward_loss, fit_scene,
                              train_feedforward)

TINY_NET = NetConfig(token_dim=16, n_heads=2, n_aggregator_blocks=1, n_decoder_layers=1, head_channels=4)


@pytest.fixture(scope="module")
def data():
    return toy_dataset(n_scenes=3, n_views=2, size=16, seed=0)


# schedule ----------------------------------------------------------------------

def test_cosine_lr_points():
    cfg = TrainConfig(steps=1000, warmup_steps=100, peak_lr=2e-4)
    assert cosine_lr(100, cfg) == 2e-4
    assert abs(cosine_lr(1000, cfg)) < 1e-12
    assert cosine_lr(550, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert cosine_lr(0, cfg) == 0
    with pytest.raises(InvalidInputError):
        cosine_lr(1001, cfg)
    with pytest.raises(InvalidInputError):
        cosine_lr(-1, cfg)


def test_cosine_lr_continuous_and_non_increasing():
    cfg = TrainConfig(steps=300, warmup_steps=30, peak_lr=1.0)
    assert abs(cosine_lr(30, cfg) - cosine_lr(29, cfg)) <= 1.0 / 30 + 1e-12
    tail = [cosine_lr(s, cfg) for s in range(30, 301)]
    assert all(b <= a for a, b in zip(tail, tail[1:]))


def test_large_scale_preset():
    p = PRESETS["paper"]
    assert (p.steps, p.batch_size, p.peak_lr, p.warmup_steps, p.lr_scale_pretrained) == (30_000, 16, 2e-4, 1000, 0.1)


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(steps=10, warmup_steps=10)
    with pytest.raises(InvalidInputError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"nope": 1})
    c = TrainConfig(steps=7, warmup_steps=2, weights=LossWeights(depth=0.3), pretrained_prefixes=("a",))
    assert TrainConfig.from_dict(c.to_dict()) == c


# EMA -----------------------------------------------------------------------------

def test_ema_cases(rng):
    e, w = rng.normal(size=(2, 5))
    assert np.array_equal(ema_update(e, w, 0.0), w)
    assert np.array_equal(ema_update(e, w, 1.0), e)
    with pytest.raises(InvalidInputError):
        ema_update(e, w[:3], 0.5)


def test_ema_geometric_convergence(rng):
    e, w = rng.normal(size=(2, 5))
    gap = np.abs(e - w)
    for _ in range(50):
        e = ema_update(e, w, 0.9)
        gap_next = np.abs(e - w)
        assert np.allclose(gap_next, 0.9 * gap, rtol=1e-9, atol=1e-15)
        gap = gap_next


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 0.9999))
def test_ema_stays_in_envelope(seed, decay):
    rng = np.random.default_rng(seed)
    hist = rng.normal(size=(30, 4)) * 10.0 ** rng.integers(-3, 4)
    e = hist[0]
    for w in hist[1:]:
        e = ema_update(e, w, decay)
    assert np.all(e >= hist.min(axis=0)) and np.all(e <= hist.max(axis=0))


def test_ema_torch_dict():
    e = {"a": torch.zeros(3)}
    w = {"a": torch.ones(3)}
    assert torch.allclose(ema_update(e, w, 0.25)["a"], torch.full((3,), 0.75))


# fit_scene -----------------------------------------------------------------------

def _views(scene, n=2, size=16):
    return [{"image": render(scene, c).rgb, "camera": c} for c in orbit_cameras(n, size, size, radius=1.6)]


def test_fit_fixed_point():
    sc = three_gaussian_scene()
    res = fit_scene(_views(sc), sc, FitConfig(steps=100, eval_every=50))
    assert res.history[0] < 1e-12
    assert max(res.history) <= 1e-6
    for k, v in sc.params().items():
        assert np.max(np.abs(getattr(res.scene, k) - v)) < 1e-4


def test_fit_zero_lr_is_bitwise_noop():
    sc = three_gaussian_scene()
    init = sc.replace(means=sc.means + 0.02)
    res = fit_scene(_views(sc), init, FitConfig(steps=20, eval_every=10, group_lr={k: 0.0 for k in sc.params()}))
    for k, v in init.params().items():
        assert np.array_equal(getattr(res.scene, k), v)


def test_fit_divergence_raises_training_error():
    sc = three_gaussian_scene()
    with pytest.raises(TrainingError) as e:
        fit_scene(_views(sc), sc.replace(means=sc.means + 0.05), FitConfig(steps=200, lr=1e12))
    assert e.value.step is not None


def test_fit_needs_views():
    with pytest.raises(InvalidInputError):
        fit_scene([], three_gaussian_scene())


# feed-forward training -------------------------------------------------------------

def test_end_to_end_gradient_matches_fd(data):
    """Guard for the training path: every weight tensor vs a directional finite difference (float64)."""
    model = EquiNet(TINY_NET).double()
    item = dict(data[0])
    item["images"] = item["images"].astype(np.float64)
    weights = LossWeights()
    perceptual = PyramidL1()
    loss = lambda: feedforward_loss(model, item, weights, perceptual)[0]
    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    an_all, fd_all = [], []
    h = 1e-8
    for name, p in model.named_parameters():
        d = torch.from_numpy(rng.normal(size=tuple(p.shape)))
        an = float((p.grad * d).sum())
        with torch.no_grad():
            p.add_(h * d)
            fp = float(loss())
            p.sub_(2 * h * d)
            fm = float(loss())
            p.add_(h * d)
        fd = (fp - fm) / (2 * h)
        an_all.append(an)
        fd_all.append(fd)
        assert abs(an - fd) <= 1e-2 * max(abs(an), abs(fd)) + 1e-6, name
    an_all, fd_all = np.array(an_all), np.array(fd_all)
    assert np.linalg.norm(an_all - fd_all) / np.linalg.norm(fd_all) < 1e-2


def _short_cfg(**kw):
    base = dict(steps=4, batch_size=1, peak_lr=0.05, warmup_steps=1, ema_decay=0.9)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(data):
    a = train_feedforward(data, _short_cfg(), TINY_NET)
    b = train_feedforward(data, _short_cfg(), TINY_NET)
    assert a.history == b.history
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_zero_pretrained_scale_freezes_flagged_groups(data):
    cfg = _short_cfg(lr_scale_pretrained=0.0, pretrained_prefixes=("patch_embed", "aggregator"))
    init = EquiNet(TINY_NET)
    res = train_feedforward(data, cfg, TINY_NET)
    changed = set()
    for (n, p), (_, q) in zip(res.model.named_parameters(), init.named_parameters()):
        if n.startswith(("patch_embed.", "aggregator.")):
            assert torch.equal(p, q), n
        elif not torch.equal(p, q):
            changed.add(n)
    assert changed


def test_training_outputs(tmp_path, data):
    cfg = _short_cfg(pretrained_prefixes=("patch_embed",))
    res = train_feedforward(data, cfg, TINY_NET, out_dir=tmp_path, checkpoint_every=2)
    lines = (tmp_path / "loss.jsonl").read_text().splitlines()
    assert len(lines) == 4
    for k in ("step", "lr", "total", "rgb", "depth", "pointmap", "camera"):
        assert k in res.history[0]
    assert (tmp_path / "checkpoint-000002").is_dir() and (tmp_path / "config.json").is_file()
    model, manifest = load_weights(res.paths["weights_ema"])
    assert manifest["extra"]["ema"] is True
    for n, t in res.ema_state.items():
        assert torch.equal(model.state_dict()[n], t)
    flagged = {e["name"] for e in manifest["tensors"] if e["pretrained"]}
    assert flagged and all(n.startswith("patch_embed.") for n in flagged)


class PoisonedDataset:
    """Yields NaN images after ``good`` accesses."""

    def __init__(self, items, good):
        self.items, self.good, self.calls = items, good, 0

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        self.calls += 1
        item = dict(self.items[i])
        if self.calls > self.good:
            item["images"] = np.full_like(item["images"], np.nan)
        return item


def test_nan_aborts_with_last_good_checkpoint(tmp_path, data):
    with pytest.raises(TrainingError) as e:
        train_feedforward(PoisonedDataset(data, 3), _short_cfg(steps=6), TINY_NET, out_dir=tmp_path,
                          checkpoint_every=1)
    assert e.value.step == 3
    assert e.value.checkpoint.endswith("checkpoint-000003")
    load_weights(e.value.checkpoint)
