"""Root-mean-square restoration losses.

``rmse_loss`` is sqrt(mean((pred - gt)^2)); ``uc_loss`` weights each residual
by (1 + U) before squaring, where U is the uncertainty map. Pixels under the
metal mask are excluded and do not count towards M.

The gradient with respect to the prediction is closed form:

    dL/dpred = (pred - gt) * (1 + U)^2 / (M * L)

The torch path (:class:`WeightedRMS`) uses the same expression in its
backward pass rather than autograd's derivative of the forward graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateGradient, InvalidArgument, InvalidInput


@dataclass(frozen=True)
class LossValue:
    value: float
    pixel_count: int

    def __float__(self):
        return self.value


def _prepare(pred, gt, u, metal_mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != target shape {gt.shape}")
    if u is None:
        weight = np.ones_like(pred)
    else:
        u = np.asarray(getattr(u, "values", u), dtype=np.float64)
        if u.shape != pred.shape:
            raise InvalidArgument(f"uncertainty shape {u.shape} != prediction shape {pred.shape}")
        if not np.all((u >= 0) & (u <= 1)):
            raise InvalidInput("uncertainty values must lie in [0, 1]")
        weight = 1.0 + u
    keep = np.ones(pred.shape, dtype=bool)
    if metal_mask is not None:
        metal = np.asarray(getattr(metal_mask, "mask", metal_mask), dtype=bool)
        if metal.shape != pred.shape:
            raise InvalidArgument(f"mask shape {metal.shape} != prediction shape {pred.shape}")
        keep = ~metal
    m = int(keep.sum())
    if m == 0:
        raise InvalidArgument("no pixels left after metal masking")
    return pred - gt, weight, keep, m


def _weighted_rms(residual, weight, keep, m):
    w = np.where(keep, residual * weight, 0.0)
    return float(np.sqrt((w * w).sum() / m))


def rmse_loss(pred, gt, metal_mask=None) -> LossValue:
    residual, weight, keep, m = _prepare(pred, gt, None, metal_mask)
    return LossValue(_weighted_rms(residual, weight, keep, m), m)


def uc_loss(pred, gt, u, metal_mask=None) -> LossValue:
    residual, weight, keep, m = _prepare(pred, gt, u, metal_mask)
    return LossValue(_weighted_rms(residual, weight, keep, m), m)


def loss_gradient(kind, pred, gt, u=None, metal_mask=None):
    """Analytic gradient of the ``"rmse"`` or ``"uc"`` loss with respect to ``pred``.

    Raises :class:`DegenerateGradient` when the loss is exactly zero.
    """
    if kind == "rmse":
        u = None
    elif kind == "uc":
        if u is None:
            raise InvalidArgument("uc gradient needs an uncertainty map")
    else:
        raise InvalidArgument(f"unknown loss kind {kind!r}")
    residual, weight, keep, m = _prepare(pred, gt, u, metal_mask)
    value = _weighted_rms(residual, weight, keep, m)
    if value == 0.0:
        raise DegenerateGradient("loss is zero; the square root has no gradient there")
    return np.where(keep, residual * weight * weight / (m * value), 0.0)


# --------------------------------------------------------------------------
# Batched torch version used by the trainer


class WeightedRMS(torch.autograd.Function):
    """Per-sample weighted RMS over (B, H, W) tensors.

    Returns a length-B vector. ``weight`` is (1 + U) or None, ``keep`` a boolean
    mask of counted pixels or None. Samples with zero loss get a zero gradient.
    """

    @staticmethod
    def forward(ctx, pred, gt, weight, keep):
        residual = pred - gt
        w = residual if weight is None else residual * weight
        if keep is not None:
            w = w * keep
            m = keep.sum(dim=(1, 2)).to(pred.dtype)
        else:
            m = torch.full((pred.shape[0],), pred.shape[1] * pred.shape[2], dtype=pred.dtype)
        loss = torch.sqrt((w * w).sum(dim=(1, 2)) / m)
        ctx.save_for_backward(w, loss, m)
        ctx.weight = weight
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        w, loss, m = ctx.saved_tensors
        # w already carries the keep mask, so excluded pixels get exactly zero
        g = w if ctx.weight is None else w * ctx.weight
        scale = torch.where(loss > 0, grad_out / (m * torch.where(loss > 0, loss, 1.0)), 0.0)
        return g * scale[:, None, None], None, None, None


def batch_loss(pred, gt, u=None, keep=None):
    """Mean over the batch of per-sample RMS (UC when ``u`` is given) and the
    per-sample vector itself."""
    weight = None if u is None else 1.0 + u
    per_sample = WeightedRMS.apply(pred, gt, weight, keep)
    return per_sample.mean(), per_sample
