import dataclasses
import math

import numpy as np
import pytest

from ucmar.errors import ConfigError, IncompleteStore, TrainingDiverged
from ucmar.model import build_unet, load_checkpoint, read_checkpoint
from ucmar.train import (
    TrainConfig,
    TrainReport,
    build_uncertainty_store,
    cosine_lr,
    epoch_order,
    run_baseline,
    run_uc,
    train_phase1,
    train_phase2,
)
from ucmar.uncertainty import UncertaintyMap, UncertaintyStore

LONG_SCHEDULE = TrainConfig(base_lr=1e-4, min_lr=1e-6, anneal_period=200)


class TestCosine:
    def test_start(self):
        assert cosine_lr(0, LONG_SCHEDULE) == pytest.approx(1e-4, rel=1e-15)

    def test_wraps(self):
        assert cosine_lr(200, LONG_SCHEDULE) == pytest.approx(1e-4, rel=1e-15)

    def test_midpoint(self):
        assert cosine_lr(100, LONG_SCHEDULE) == pytest.approx(5.05e-5, rel=1e-12)

    def test_bounds_and_monotone(self):
        values = [cosine_lr(e, LONG_SCHEDULE) for e in range(200)]
        assert all(1e-6 <= v <= 1e-4 for v in values)
        assert all(b < a for a, b in zip(values, values[1:]))


class TestConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"min_lr": 1e-3},
            {"min_lr": 0.0},
            {"checkpoint_epochs": (2,)},
            {"checkpoint_epochs": (4, 2)},
            {"checkpoint_epochs": (2, 12)},
            {"anneal_period": 0},
            {"optimizer": "sgd"},
            {"retrain_mode": "warm"},
            {"std_ddof": 2},
        ],
    )
    def test_rejected(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.base_lr, c.min_lr, c.total_epochs, c.anneal_period) == (4, 1e-4, 1e-6, 60, 120)
        assert c.checkpoint_epochs == (2, 4, 6, 8, 10)
        assert cosine_lr(0, c) == 1e-4


def test_epoch_order_depends_on_seed_and_epoch():
    assert np.array_equal(epoch_order(0, 1, 10), epoch_order(0, 1, 10))
    assert not np.array_equal(epoch_order(0, 1, 50), epoch_order(0, 2, 50))
    assert not np.array_equal(epoch_order(0, 1, 50), epoch_order(1, 1, 50))
    assert sorted(epoch_order(3, 4, 10)) == list(range(10))


class TestPhase1:
    def test_checkpoints_and_report(self, tiny_dataset, tiny_config, tmp_path):
        model = build_unet(tiny_config.architecture, tiny_config.seed)
        ckpts, report = train_phase1(model, tiny_dataset.train, tiny_config, tmp_path, val=tiny_dataset.test)
        assert ckpts.epochs == [1, 2, 3]
        assert [read_checkpoint(c.path).epoch for c in ckpts] == [1, 2, 3]
        rows = report.phase("phase1")
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert [r["lr"] for r in rows] == [cosine_lr(e - 1, tiny_config) for e in (1, 2, 3)]
        assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_psnr"]) for r in rows)
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]

    def test_deterministic(self, tiny_dataset, tiny_config, tmp_path):
        files = []
        for run in ("a", "b"):
            model = build_unet(tiny_config.architecture, tiny_config.seed)
            ckpts, _ = train_phase1(model, tiny_dataset.train, tiny_config, tmp_path / run)
            files.append([c.path.read_bytes() for c in ckpts])
        assert files[0] == files[1]

    def test_checkpoints_differ_across_epochs(self, tiny_dataset, tiny_config, tmp_path):
        model = build_unet(tiny_config.architecture, tiny_config.seed)
        ckpts, _ = train_phase1(model, tiny_dataset.train, tiny_config, tmp_path)
        a, b = (load_checkpoint(c.path) for c in ckpts.checkpoints[:2])
        sa, sb = a.state_dict(), b.state_dict()
        assert any(not np.array_equal(sa[k].numpy(), sb[k].numpy()) for k in sa)

    def test_divergence(self, tiny_dataset, tiny_config, tmp_path):
        bad = [dataclasses.replace(s, clean=np.full_like(s.clean, np.inf)) for s in tiny_dataset.train[:4]]
        model = build_unet(tiny_config.architecture, tiny_config.seed)
        with pytest.raises(TrainingDiverged) as info:
            train_phase1(model, bad, tiny_config, tmp_path)
        assert info.value.last_good_checkpoint is not None
        assert (tmp_path / "last_good.ckpt").exists()


class TestPhase2:
    def test_zero_store_matches_baseline(self, tiny_dataset, tiny_config, tmp_path):
        train = tiny_dataset.train
        maps = [UncertaintyMap(np.zeros((32, 32)), s.sample_id, [1, 2]) for s in train]
        store = UncertaintyStore.write(tmp_path / "u", maps, [1, 2])
        uc_model, uc_report = train_phase2(train, store, tiny_config)
        base_model, base_report = run_baseline(train, tiny_config)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "phase"} for r in rows]
        assert strip(uc_report.phase("phase2")) == strip(base_report.phase("baseline"))
        su, sb = uc_model.state_dict(), base_model.state_dict()
        assert all(np.array_equal(su[k].numpy(), sb[k].numpy()) for k in su)

    def test_missing_map(self, tiny_dataset, tiny_config, tmp_path):
        train = tiny_dataset.train
        maps = [UncertaintyMap(np.zeros((32, 32)), s.sample_id) for s in train[1:]]
        store = UncertaintyStore.write(tmp_path / "u", maps, [1, 2])
        with pytest.raises(IncompleteStore):
            train_phase2(train, store, tiny_config)

    def test_continue_mode_needs_checkpoint(self, tiny_dataset, tiny_config, tmp_path):
        maps = [UncertaintyMap(np.zeros((32, 32)), s.sample_id) for s in tiny_dataset.train]
        store = UncertaintyStore.write(tmp_path / "u", maps, [1, 2])
        config = dataclasses.replace(tiny_config, retrain_mode="continue")
        with pytest.raises(ConfigError):
            train_phase2(tiny_dataset.train, store, config)


class TestRuns:
    @pytest.fixture
    def uc_run(self, tiny_dataset, tiny_config, tmp_path):
        return run_uc(tiny_dataset.train, tiny_config, tmp_path, val=tiny_dataset.test), tmp_path

    def test_layout_and_report(self, uc_run, tiny_dataset, tiny_config):
        (model, report, ckpts, store), root = uc_run
        assert len(store) == len(tiny_dataset.train)
        assert store.source_epochs == [1, 2, 3]
        assert (root / "model_final.ckpt").exists()
        assert sorted(p.name for p in (root / "checkpoints").iterdir()) == [f"epoch_{e:03d}.ckpt" for e in (1, 2, 3)]
        assert len(report.phase("phase1")) == tiny_config.phase1_epochs
        assert len(report.phase("phase2")) == tiny_config.total_epochs
        for sid in store.manifest["sample_ids"]:
            u = store.get(sid).values
            assert u.min() >= 0 and u.max() <= 1

    def test_store_rebuild_bit_identical(self, uc_run, tiny_dataset, tmp_path):
        (_, _, ckpts, store), root = uc_run
        again = build_uncertainty_store(ckpts, tiny_dataset.train, tmp_path / "again")
        for sid in store.manifest["sample_ids"]:
            assert np.array_equal(store.get(sid).values, again.get(sid).values)

    def test_report_round_trip(self, uc_run, tmp_path):
        (_, report, _, _), _ = uc_run
        report.save(tmp_path / "rep")
        loaded = TrainReport.load(tmp_path / "rep")
        assert loaded.same_run(report)

    def test_baseline_shares_phase1_window(self, uc_run, tiny_dataset, tiny_config):
        (_, report, _, _), _ = uc_run
        _, base = run_baseline(tiny_dataset.train, tiny_config, val=tiny_dataset.test)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "phase"} for r in rows]
        n = tiny_config.phase1_epochs
        assert strip(base.phase("baseline")[:n]) == strip(report.phase("phase1"))
        assert len(base.records) == tiny_config.total_epochs

    def test_continue_mode(self, tiny_dataset, tiny_config, tmp_path):
        config = dataclasses.replace(tiny_config, retrain_mode="continue")
        model, report, _, _ = run_uc(tiny_dataset.train, config, tmp_path)
        assert report.phase_boundaries["phase2"]["retrain_mode"] == "continue"
        assert len(report.phase("phase2")) == config.total_epochs
