"""PSNR, SSIM and ablation reports.

Both metrics skip metal pixels when a mask is given: PSNR averages the squared
error over non-metal pixels, SSIM averages the SSIM map over windows whose
centre is non-metal.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_DOWN, Decimal

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, UcmarError

GAUSSIAN_SIGMA = 1.5


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2:
        raise InvalidArgument(f"expected 2-D images, got {pred.ndim}-D")
    return pred, gt


def _keep(metal_mask, shape):
    if metal_mask is None:
        return np.ones(shape, dtype=bool)
    metal = np.asarray(getattr(metal_mask, "mask", metal_mask), dtype=bool)
    if metal.shape != shape:
        raise InvalidArgument(f"mask shape {metal.shape} != image shape {shape}")
    return ~metal


def psnr(pred, gt, data_range=1.0, metal_mask=None):
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images agree exactly."""
    pred, gt = _pair(pred, gt)
    if not data_range > 0:
        raise InvalidArgument(f"data_range must be > 0, got {data_range}")
    keep = _keep(metal_mask, pred.shape)
    if not keep.any():
        raise InvalidArgument("no pixels left after metal masking")
    mse = np.mean((pred - gt)[keep] ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size, sigma=GAUSSIAN_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim_map(pred, gt, data_range=1.0, window=11, k1=0.01, k2=0.03):
    """SSIM for every window lying fully inside the image (valid region)."""
    pred, gt = _pair(pred, gt)
    if window < 3 or window % 2 == 0:
        raise InvalidArgument(f"window must be odd and >= 3, got {window}")
    if min(pred.shape) < window:
        raise InvalidArgument(f"image {pred.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter_valid(pred, g)
    mu_y = _filter_valid(gt, g)
    var_x = _filter_valid(pred * pred, g) - mu_x**2
    var_y = _filter_valid(gt * gt, g) - mu_y**2
    cov = _filter_valid(pred * gt, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(pred, gt, data_range=1.0, window=11, k1=0.01, k2=0.03, metal_mask=None):
    smap = ssim_map(pred, gt, data_range, window, k1, k2)
    r = window // 2
    keep = _keep(metal_mask, np.shape(pred))[r : np.shape(pred)[0] - r, r : np.shape(pred)[1] - r]
    if not keep.any():
        raise InvalidArgument("every SSIM window is centred on metal")
    return float(smap[keep].mean())


def relative_improvement(before, after):
    """Percentage change from ``before`` to ``after``."""
    return (after - before) / before * 100.0


def format_percent(value):
    """Two decimals, truncated toward zero (8.1654 -> "8.16")."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_DOWN))


# --------------------------------------------------------------------------
# Reports


@dataclass
class MetricRow:
    model_tag: str
    uc_loss: bool
    psnr: float
    ssim: float
    sample_count: int
    mask_policy: str
    failed: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        if math.isinf(self.psnr):
            d["psnr"] = "identical"
        return d


@dataclass
class MetricReport:
    rows: list

    def improvements(self):
        """Percentage gains of each UC row over the baseline row with the same tag."""
        base = {r.model_tag: r for r in self.rows if not r.uc_loss}
        out = {}
        for r in self.rows:
            b = base.get(r.model_tag)
            if r.uc_loss and b is not None:
                out[r.model_tag] = (relative_improvement(b.psnr, r.psnr), relative_improvement(b.ssim, r.ssim))
        return out

    def to_dict(self):
        return {
            "rows": [r.to_dict() for r in self.rows],
            "improvements": {k: {"psnr_pct": p, "ssim_pct": s} for k, (p, s) in self.improvements().items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self):
        gains = self.improvements()
        header = f"{'Method':<12} | {'UC loss':<7} | {'PSNR':<18} | {'SSIM':<18} | {'N':>4} | mask"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            p = "identical" if math.isinf(r.psnr) else f"{r.psnr:.2f}"
            s = f"{r.ssim:.3f}"
            if r.uc_loss and r.model_tag in gains:
                gp, gs = gains[r.model_tag]
                p += f" ({'+' if gp >= 0 else ''}{format_percent(gp)}%)"
                s += f" ({'+' if gs >= 0 else ''}{format_percent(gs)}%)"
            flag = "yes" if r.uc_loss else "no"
            lines.append(f"{r.model_tag:<12} | {flag:<7} | {p:<18} | {s:<18} | {r.sample_count:>4} | {r.mask_policy}")
        return "\n".join(lines)


def evaluate(model, samples, model_tag="UNet", uc_loss=False, exclude_metal=True, data_range=1.0):
    """Restore every sample and average PSNR/SSIM against the clean targets.

    ``model`` is a network from :mod:`ucmar.model` or any callable mapping an
    (N, H, W) stack to restorations of the same shape. Samples whose metrics
    fail are listed in the row's ``failed`` field and left out of the means.
    """
    from .model import UNet, restore_batch

    samples = list(samples)
    if not samples:
        raise InvalidArgument("test set is empty")
    stack = np.stack([s.corrupted for s in samples])
    outputs = restore_batch(model, stack) if isinstance(model, UNet) else np.asarray(model(stack))
    psnrs, ssims, failed = [], [], []
    for sample, out in zip(samples, outputs):
        mask = sample.mask.mask if exclude_metal else None
        try:
            psnrs.append(psnr(out, sample.clean, data_range, mask))
            ssims.append(ssim(out, sample.clean, data_range, metal_mask=mask))
        except UcmarError:
            failed.append(sample.sample_id)
    if not psnrs:
        raise InvalidArgument("every sample failed evaluation")
    return MetricRow(
        model_tag=model_tag,
        uc_loss=uc_loss,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        sample_count=len(psnrs),
        mask_policy="exclude-metal" if exclude_metal else "include-metal",
        failed=failed,
    )
