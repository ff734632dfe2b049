"""torch.autograd wrappers around the numpy renderer and losses.

The numpy implementations compute their own analytic gradients; these
wrappers only move arrays across the boundary, so the network can be trained
end to end with the same code the oracles test.
"""
from __future__ import annotations

import numpy as np
import torch

from .gaussians import Scene
from .geometry import SE3, Rotation
from .losses import LossWeights, camera_loss, depth_loss, pointmap_loss, rgb_loss
from .rasterizer import T_MIN, render, render_backward


def _np(t):
    return t.detach().cpu().numpy().astype(np.float64)


class _NumpyLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fn, *inputs):
        value, grads = fn(*[_np(x) for x in inputs])
        ctx.grads = [torch.as_tensor(np.asarray(g), dtype=x.dtype) for g, x in zip(grads, inputs)]
        return inputs[0].new_tensor(float(value))

    @staticmethod
    def backward(ctx, g):
        return (None, *[g * gr for gr in ctx.grads])


def numpy_loss(fn, *inputs):
    """``fn(*arrays) -> (value, grads)`` with one gradient per input, as a differentiable scalar."""
    return _NumpyLoss.apply(fn, *inputs)


def rgb_loss_t(target, pred, weights: LossWeights = LossWeights(), perceptual=None):
    target = np.asarray(target, dtype=np.float64)
    return numpy_loss(lambda p: (lambda r: (r.value, (r.grad,)))(rgb_loss(target, p, weights, perceptual)), pred)


def pointmap_loss_t(pred, target):
    target = np.asarray(target, dtype=np.float64)
    return numpy_loss(lambda p: (lambda r: (r.value, (r.grad,)))(pointmap_loss(p, target)), pred)


def depth_loss_t(pointmap_z, rendered_depth, mask):
    mask = np.asarray(mask, dtype=np.float64)

    def fn(pz, d):
        value, g = depth_loss(pz, d, mask)
        return value, (-g, g)
    return numpy_loss(fn, pointmap_z, rendered_depth)


def camera_loss_t(R, T, target_poses, delta):
    def fn(r, t):
        value, (gR, gT) = camera_loss((r, t), target_poses, delta)
        return value, (gR, gT)
    return numpy_loss(fn, R, T)


class _Render(torch.autograd.Function):
    @staticmethod
    def forward(ctx, cam, sh_degree, background, t_min, means, log_scales, quats, logits, sh, R, t):
        pose = SE3(Rotation.from_matrix(_np(R)), _np(t))
        cam = cam.with_pose(pose)
        scene = Scene(_np(means), _np(log_scales), _np(quats), _np(logits), _np(sh), sh_degree)
        out = render(scene, cam, background=background, t_min=t_min)
        ctx.cam, ctx.scene, ctx.background, ctx.t_min = cam, scene, background, t_min
        ctx.dtypes = [x.dtype for x in (means, log_scales, quats, logits, sh, R, t)]
        mk = lambda a: torch.as_tensor(a, dtype=means.dtype)
        alpha = mk(out.alpha)
        ctx.mark_non_differentiable(alpha)
        return mk(out.rgb), mk(out.depth), alpha

    @staticmethod
    def backward(ctx, g_rgb, g_depth, g_alpha):
        pg = render_backward(ctx.scene, ctx.cam, _np(g_rgb), _np(g_depth), background=ctx.background,
                             t_min=ctx.t_min)
        grads = [pg.means, pg.log_scales, pg.quats, pg.logit_opacities, pg.sh,
                 pg.camera_rotation, pg.camera_translation]
        return (None, None, None, None, *[torch.as_tensor(g, dtype=d) for g, d in zip(grads, ctx.dtypes)])


def render_t(params: dict, cam, R, t, sh_degree=0, background=(0.0, 0.0, 0.0), t_min=T_MIN):
    """Differentiable render of scene tensors from intrinsics ``cam`` at pose (R, t).

    Returns ``(rgb, depth, alpha)``; ``alpha`` carries no gradient.
    """
    rgb, depth, alpha = _Render.apply(cam, sh_degree, tuple(background), t_min, params["means"], params["log_scales"],
                                      params["quats"], params["logit_opacities"], params["sh"], R, t)
    return rgb, depth, alpha
