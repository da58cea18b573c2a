"""Checkpoint-ensemble uncertainty images.

Each early-epoch checkpoint restores the same corrupted input; the per-pixel
standard deviation of those restorations, min-max scaled to [0, 1] within the
image, is the uncertainty map used to weight the restoration loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompleteStore, InvalidArgument, InvalidInput
from .model import CheckpointSet, restore_batch
from .raster_io import read_raster, write_raster

STORE_MANIFEST = "uncertainty_manifest.json"
DEGENERATE_RTOL = 1e-12


@dataclass
class UncertaintyMap:
    values: np.ndarray
    source_sample_id: str = ""
    source_epochs: list = field(default_factory=list)


def ensemble_infer(checkpoints, image, models=None):
    """Restorations of ``image`` by every checkpoint, in ascending epoch order.

    ``models`` may carry the already-loaded networks of ``checkpoints`` to avoid
    re-reading the files for every image.
    """
    if not isinstance(checkpoints, CheckpointSet):
        checkpoints = CheckpointSet(checkpoints)
    if models is None:
        models = checkpoints.load_models()
    image = np.asarray(image)
    return [restore_batch(m, image[None])[0] for m in models]


def pixel_std(restorations, ddof=0):
    """Two-pass per-pixel standard deviation over a stack of rasters."""
    stack = np.asarray(restorations, dtype=np.float64)
    mean = stack.sum(axis=0) / stack.shape[0]
    dev = stack - mean
    return np.sqrt((dev * dev).sum(axis=0) / (stack.shape[0] - ddof))


def compute_uncertainty(restorations, ddof=0, sample_id="", epochs=()):
    """Normalized standard deviation of ``restorations`` (population std by default).

    Degenerate case: if every pixel has the same spread the map is all zeros.
    Spreads that differ by less than ``DEGENERATE_RTOL`` times the magnitude
    of the inputs are treated as equal, since that is rounding noise.
    """
    rasters = [np.asarray(r) for r in restorations]
    if len(rasters) < 2:
        raise InvalidArgument(f"need at least 2 restorations, got {len(rasters)}")
    shape = rasters[0].shape
    if any(r.shape != shape for r in rasters):
        raise InvalidArgument("restorations differ in shape")
    if ddof not in (0, 1):
        raise InvalidArgument(f"ddof must be 0 (population) or 1 (sample), got {ddof}")
    stack = np.stack(rasters).astype(np.float64)
    if np.isnan(stack).any():
        raise InvalidInput("restorations contain NaN")
    if not np.isfinite(stack).all():
        raise InvalidInput("restorations contain non-finite values")
    s = pixel_std(stack, ddof=ddof)
    lo, hi = s.min(), s.max()
    if hi - lo <= DEGENERATE_RTOL * max(hi, np.abs(stack).max()):
        u = np.zeros_like(s)
    else:
        u = (s - lo) / (hi - lo)
    return UncertaintyMap(values=u, source_sample_id=sample_id, source_epochs=list(epochs))


def uncertainty_profile(umap, mask_hi, mask_lo):
    """Mean uncertainty inside two disjoint regions, returned as (mean_hi, mean_lo)."""
    values = umap.values if isinstance(umap, UncertaintyMap) else np.asarray(umap)
    mask_hi = np.asarray(mask_hi, dtype=bool)
    mask_lo = np.asarray(mask_lo, dtype=bool)
    if mask_hi.shape != values.shape or mask_lo.shape != values.shape:
        raise InvalidArgument("masks must match the uncertainty map's shape")
    if not mask_hi.any() or not mask_lo.any():
        raise InvalidArgument("masks must be nonempty")
    if (mask_hi & mask_lo).any():
        raise InvalidArgument("masks overlap")
    return float(values[mask_hi].mean()), float(values[mask_lo].mean())


class UncertaintyStore:
    """Per-sample uncertainty maps on disk, keyed by sample id.

    Written once by a single builder, then read-only.
    """

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / STORE_MANIFEST
        if not manifest_path.exists():
            raise IncompleteStore(f"{manifest_path} does not exist")
        self.manifest = json.loads(manifest_path.read_text())
        self.sample_ids = list(self.manifest["sample_ids"])
        self._cache = {}

    @classmethod
    def write(cls, root, maps, source_epochs, ddof=0):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ids = []
        for umap in maps:
            write_raster(root / f"{umap.source_sample_id}.ucmr", umap.values)
            ids.append(umap.source_sample_id)
        manifest = {
            "sample_ids": ids,
            "source_epochs": list(source_epochs),
            "std_divisor": "N" if ddof == 0 else "N-1",
            "normalization_scope": "per-image",
        }
        (root / STORE_MANIFEST).write_text(json.dumps(manifest, indent=2))
        return cls(root)

    @property
    def source_epochs(self):
        return self.manifest["source_epochs"]

    def __len__(self):
        return len(self.sample_ids)

    def __contains__(self, sample_id):
        return sample_id in self._cache or sample_id in self.sample_ids

    def get(self, sample_id):
        if sample_id not in self._cache:
            path = self.root / f"{sample_id}.ucmr"
            if sample_id not in self.sample_ids or not path.exists():
                raise IncompleteStore(f"no uncertainty map for sample {sample_id!r}")
            self._cache[sample_id] = UncertaintyMap(
                values=read_raster(path), source_sample_id=sample_id, source_epochs=self.source_epochs
            )
        return self._cache[sample_id]

    def require(self, sample_ids):
        missing = [s for s in sample_ids if s not in self.sample_ids]
        if missing:
            raise IncompleteStore(f"uncertainty store lacks {len(missing)} samples, e.g. {missing[:3]}")
