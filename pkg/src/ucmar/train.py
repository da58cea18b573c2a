"""Two-phase training with an uncertainty-weighted loss.

Phase 1 trains with plain RMSE and keeps a few early-epoch checkpoints. Those
checkpoints restore every training input; the normalized spread of their
outputs becomes a per-sample uncertainty map. Phase 2 retrains a fresh network
with the (1 + U)-weighted loss. The baseline arm is a single RMSE run of the
same length as phase 2.

Epoch numbering is 1-based. The learning rate used during epoch ``k`` is
``cosine_lr(k - 1, config)``: the schedule is indexed by completed epochs.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IncompleteStore, InvalidArgument, TrainingDiverged
from .losses import batch_loss
from .metrics import psnr
from .model import ArchitectureConfig, CheckpointSet, build_unet, load_checkpoint, restore_batch, save_checkpoint
from .uncertainty import UncertaintyStore, compute_uncertainty, ensemble_infer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    total_epochs: int = 60
    anneal_period: int = 120
    phase1_epochs: int = 10
    checkpoint_epochs: tuple = (2, 4, 6, 8, 10)
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    grid_size: int = 64
    retrain_mode: str = "from_scratch"
    depth: int = 3
    base_channels: int = 16
    exclude_metal: bool = True
    std_ddof: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        ce = self.checkpoint_epochs
        if len(ce) < 2:
            raise ConfigError("checkpoint_epochs needs at least 2 entries")
        if any(b <= a for a, b in zip(ce, ce[1:])):
            raise ConfigError(f"checkpoint_epochs must be strictly increasing, got {list(ce)}")
        if ce[0] < 1 or ce[-1] > self.phase1_epochs:
            raise ConfigError(f"checkpoint_epochs must lie in [1, phase1_epochs={self.phase1_epochs}]")
        if not 0 < self.min_lr < self.base_lr:
            raise ConfigError("need 0 < min_lr < base_lr")
        if self.anneal_period < 1:
            raise ConfigError("anneal_period must be >= 1")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.retrain_mode not in ("from_scratch", "continue"):
            raise ConfigError(f"unknown retrain_mode {self.retrain_mode!r}")
        if self.std_ddof not in (0, 1):
            raise ConfigError("std_ddof must be 0 or 1")
        if len(self.adam_betas) != 2:
            raise ConfigError("adam_betas needs two values")

    @property
    def architecture(self):
        return ArchitectureConfig(depth=self.depth, base_channels=self.base_channels, grid_size=self.grid_size)

    def to_dict(self):
        d = asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


def cosine_lr(epoch, config):
    """Cosine annealing from ``base_lr`` down to ``min_lr``, restarting every ``anneal_period`` epochs."""
    period = config.anneal_period
    phase = (epoch % period) / period
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * phase))


def configure_determinism(deterministic):
    torch.use_deterministic_algorithms(bool(deterministic))


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    phase_boundaries: dict = field(default_factory=dict)
    final_checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def add(self, **record):
        self.records.append(record)

    def phase(self, name):
        return [r for r in self.records if r["phase"] == name]

    def same_run(self, other):
        """Equality ignoring timings."""
        return (
            self.records == other.records
            and self.phase_boundaries == other.phase_boundaries
            and self.config == other.config
        )

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "report.jsonl", "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        summary = {
            "phase_boundaries": self.phase_boundaries,
            "final_checkpoint": self.final_checkpoint,
            "config": self.config,
            "wall_clock": self.wall_clock,
        }
        (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        records = [json.loads(line) for line in (directory / "report.jsonl").read_text().splitlines() if line]
        summary = json.loads((directory / "summary.json").read_text())
        return cls(
            records=records,
            phase_boundaries=summary["phase_boundaries"],
            final_checkpoint=summary["final_checkpoint"],
            config=summary["config"],
            wall_clock=summary["wall_clock"],
        )


class _Tensors:
    """Training samples stacked once into tensors."""

    def __init__(self, samples, exclude_metal, store=None):
        self.ids = [s.sample_id for s in samples]
        self.x = torch.from_numpy(np.stack([s.corrupted for s in samples]).astype(np.float32))[:, None]
        self.y = torch.from_numpy(np.stack([s.clean for s in samples]).astype(np.float32))
        self.keep = None
        if exclude_metal:
            self.keep = torch.from_numpy(~np.stack([s.mask.mask for s in samples]))
        self.u = None
        if store is not None:
            store.require(self.ids)
            self.u = torch.from_numpy(np.stack([store.get(i).values for i in self.ids]).astype(np.float32))

    def __len__(self):
        return len(self.ids)


def epoch_order(seed, epoch, n):
    """Sample order for a 1-based ``epoch``; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _val_psnr(model, val, exclude_metal):
    if not val:
        return None
    outputs = restore_batch(model, np.stack([s.corrupted for s in val]))
    scores = [psnr(o, s.clean, 1.0, s.mask.mask if exclude_metal else None) for o, s in zip(outputs, val)]
    return float(np.mean(scores))


def _fit(model, data, config, epochs, phase, report, val=None, checkpoint_dir=None, checkpoint_epochs=()):
    """Adam on the per-sample RMS (UC-weighted when ``data.u`` is set)."""
    configure_determinism(config.deterministic)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr, betas=config.adam_betas)
    saved = []
    last_good = None
    n = len(data)
    for epoch in range(1, epochs + 1):
        lr = cosine_lr(epoch - 1, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = epoch_order(config.seed, epoch, n)
        losses, degenerate = [], 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            pred = model(data.x[idx])[:, 0]
            keep = None if data.keep is None else data.keep[idx]
            u = None if data.u is None else data.u[idx]
            loss, per_sample = batch_loss(pred, data.y[idx], u, keep)
            if not torch.isfinite(loss):
                if checkpoint_dir is not None:
                    last_good = save_checkpoint(
                        model, max(epoch - 1, 1), Path(checkpoint_dir) / "last_good.ckpt", rng_state_tag=phase
                    ).path
                elif saved:
                    last_good = saved[-1].path
                raise TrainingDiverged(f"{phase}: non-finite loss at epoch {epoch}", last_good)
            degenerate += int((per_sample == 0).sum())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item() * len(idx))
        mean_loss = sum(losses) / n
        rec = {
            "phase": phase,
            "epoch": epoch,
            "lr": lr,
            "train_loss": mean_loss,
            "val_psnr": _val_psnr(model, val, config.exclude_metal),
        }
        if degenerate:
            rec["degenerate_steps"] = degenerate
        report.add(**rec)
        log.info("%s epoch %d lr=%.3g loss=%.5f val_psnr=%s", phase, epoch, lr, mean_loss, rec["val_psnr"])
        if checkpoint_dir is not None and epoch in checkpoint_epochs:
            tag = f"{phase}-seed{config.seed}-epoch{epoch}"
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt"
            saved.append(save_checkpoint(model, epoch, path, train_loss=mean_loss, rng_state_tag=tag))
    return saved


def train_phase1(model, samples, config, checkpoint_dir, val=None, report=None):
    """RMSE training for ``phase1_epochs`` epochs, checkpointing at ``checkpoint_epochs``."""
    if not samples:
        raise InvalidArgument("training set is empty")
    if model.config != config.architecture:
        raise InvalidArgument(f"model architecture {model.config} != config {config.architecture}")
    report = report if report is not None else TrainReport(config=config.to_dict())
    t0 = time.perf_counter()
    data = _Tensors(samples, config.exclude_metal)
    saved = _fit(
        model, data, config, config.phase1_epochs, "phase1", report, val, checkpoint_dir, config.checkpoint_epochs
    )
    report.phase_boundaries["phase1"] = {"epochs": config.phase1_epochs, "checkpoints": list(config.checkpoint_epochs)}
    report.wall_clock["phase1_s"] = time.perf_counter() - t0
    return CheckpointSet(saved), report


def build_uncertainty_store(checkpoints, samples, root, ddof=0):
    """Uncertainty map for every training sample's corrupted input, written to ``root``."""
    if not isinstance(checkpoints, CheckpointSet):
        checkpoints = CheckpointSet(checkpoints)
    models = checkpoints.load_models()
    maps = []
    for sample in samples:
        outs = ensemble_infer(checkpoints, sample.corrupted, models=models)
        maps.append(compute_uncertainty(outs, ddof=ddof, sample_id=sample.sample_id, epochs=checkpoints.epochs))
    store = UncertaintyStore.write(root, maps, checkpoints.epochs, ddof=ddof)
    if len(store) != len(samples):
        raise IncompleteStore(f"store holds {len(store)} maps for {len(samples)} samples")
    return store


def train_phase2(samples, store, config, out_dir=None, val=None, report=None, init_checkpoint=None):
    """Retrain under the UC loss, each sample weighted by its cached map."""
    if not samples:
        raise InvalidArgument("training set is empty")
    report = report if report is not None else TrainReport(config=config.to_dict())
    t0 = time.perf_counter()
    data = _Tensors(samples, config.exclude_metal, store=store)
    if config.retrain_mode == "continue":
        if init_checkpoint is None:
            raise ConfigError("retrain_mode 'continue' needs the last phase-1 checkpoint")
        model = load_checkpoint(init_checkpoint, config.architecture)
    else:
        model = build_unet(config.architecture, config.seed)
    _fit(model, data, config, config.total_epochs, "phase2", report, val, out_dir)
    report.phase_boundaries["phase2"] = {"epochs": config.total_epochs, "retrain_mode": config.retrain_mode}
    report.wall_clock["phase2_s"] = time.perf_counter() - t0
    if out_dir is not None:
        ckpt = save_checkpoint(model, config.total_epochs, Path(out_dir) / "model_final.ckpt", rng_state_tag="phase2")
        report.final_checkpoint = str(ckpt.path)
    return model, report


def run_baseline(samples, config, out_dir=None, val=None):
    """Control arm: RMSE for ``total_epochs`` epochs with the same init and data order."""
    if not samples:
        raise InvalidArgument("training set is empty")
    report = TrainReport(config=config.to_dict())
    t0 = time.perf_counter()
    model = build_unet(config.architecture, config.seed)
    data = _Tensors(samples, config.exclude_metal)
    _fit(model, data, config, config.total_epochs, "baseline", report, val, out_dir)
    report.phase_boundaries["baseline"] = {"epochs": config.total_epochs}
    report.wall_clock["baseline_s"] = time.perf_counter() - t0
    if out_dir is not None:
        ckpt = save_checkpoint(model, config.total_epochs, Path(out_dir) / "model_final.ckpt", rng_state_tag="baseline")
        report.final_checkpoint = str(ckpt.path)
    return model, report


def run_uc(samples, config, run_dir, val=None):
    """Full UC arm: phase 1, uncertainty store, phase 2. Artifacts go under ``run_dir``."""
    run_dir = Path(run_dir)
    report = TrainReport(config=config.to_dict())
    model = build_unet(config.architecture, config.seed)
    checkpoints, _ = train_phase1(model, samples, config, run_dir / "checkpoints", val=val, report=report)
    t0 = time.perf_counter()
    store = build_uncertainty_store(checkpoints, samples, run_dir / "uncertainty", ddof=config.std_ddof)
    report.wall_clock["uncertainty_s"] = time.perf_counter() - t0
    report.phase_boundaries["uncertainty"] = {"source_epochs": checkpoints.epochs, "maps": len(store)}
    final, report = train_phase2(
        samples, store, config, run_dir, val=val, report=report, init_checkpoint=checkpoints.checkpoints[-1].path
    )
    return final, report, checkpoints, store
