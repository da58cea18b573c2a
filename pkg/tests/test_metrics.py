import json
import math

import numpy as np
import pytest

from ucmar.errors import InvalidArgument
from ucmar.metrics import MetricReport, MetricRow, evaluate, format_percent, psnr, relative_improvement, ssim


def brute_psnr(pred, gt, data_range=1.0, keep=None):
    keep = np.ones(pred.shape, bool) if keep is None else keep
    errs = [(float(pred[i, j]) - float(gt[i, j])) ** 2 for i, j in zip(*np.nonzero(keep))]
    return 10 * math.log10(data_range**2 / math.fsum(errs) * len(errs))


def brute_ssim(pred, gt, data_range=1.0, keep=None, size=11, sigma=1.5):
    """Window-by-window SSIM with an explicit Gaussian weighting, valid windows only."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    r = size // 2
    offsets = [k - r for k in range(size)]
    w1 = [math.exp(-(o * o) / (2 * sigma * sigma)) for o in offsets]
    total = math.fsum(w1)
    w1 = [v / total for v in w1]
    h, w = pred.shape
    values = []
    for i in range(r, h - r):
        for j in range(r, w - r):
            if keep is not None and not keep[i, j]:
                continue
            mx = my = sxx = syy = sxy = 0.0
            for a in range(size):
                for b in range(size):
                    wt = w1[a] * w1[b]
                    x = float(pred[i + a - r, j + b - r])
                    y = float(gt[i + a - r, j + b - r])
                    mx += wt * x
                    my += wt * y
                    sxx += wt * x * x
                    syy += wt * y * y
                    sxy += wt * x * y
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return math.fsum(values) / len(values)


class TestPSNR:
    @pytest.mark.parametrize("seed", range(10))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(psnr(a, b) - brute_psnr(a, b)) <= 1e-9
        keep = rng.random((16, 16)) > 0.2
        assert abs(psnr(a, b, metal_mask=~keep) - brute_psnr(a, b, keep=keep)) <= 1e-9

    def test_twenty_db(self):
        gt = np.zeros((8, 8))
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-12)

    def test_identical(self):
        x = np.random.default_rng(0).random((8, 8))
        assert psnr(x, x) == math.inf

    def test_masking_metal_error_raises_score(self):
        gt = np.zeros((16, 16))
        pred = gt + 0.01
        metal = np.zeros((16, 16), bool)
        metal[4:6, 4:6] = True
        pred[metal] = 1.0
        assert psnr(pred, gt, metal_mask=metal) > psnr(pred, gt)

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(InvalidArgument):
            psnr(np.zeros((4, 4)), np.ones((4, 4)), metal_mask=np.ones((4, 4), bool))


class TestSSIM:
    @pytest.mark.parametrize("seed", range(5))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.random((16, 16))
        pred = np.clip(gt + rng.normal(0, 0.1, (16, 16)), 0, 1)
        assert abs(ssim(pred, gt) - brute_ssim(pred, gt)) <= 1e-6
        keep = rng.random((16, 16)) > 0.3
        assert abs(ssim(pred, gt, metal_mask=~keep) - brute_ssim(pred, gt, keep=keep)) <= 1e-6

    def test_identical_is_one(self):
        x = np.random.default_rng(1).random((24, 24))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_below_one(self):
        x = np.random.default_rng(2).random((24, 24))
        assert ssim(1 - x, x) < 1

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_more_noise_lower_score(self):
        rng = np.random.default_rng(4)
        gt = rng.random((32, 32))
        noise = rng.normal(size=(32, 32))
        scores = [ssim(gt + s * noise, gt) for s in (0.01, 0.05, 0.2)]
        assert scores[0] > scores[1] > scores[2]

    def test_image_smaller_than_window(self):
        with pytest.raises(InvalidArgument):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestReport:
    def test_table_improvement(self):
        assert format_percent(relative_improvement(38.21, 41.33)) == "8.16"

    @pytest.mark.parametrize(
        "before, after, shown",
        [(0.874, 0.891, "1.94"), (53.08, 54.71, "3.07"), (47.55, 50.05, "5.25"), (0.984, 0.991, "0.71"), (10.0, 9.0, "-10.00")],
    )
    def test_percent_format(self, before, after, shown):
        assert format_percent(relative_improvement(before, after)) == shown

    def _report(self):
        return MetricReport(
            [
                MetricRow("UNet", False, 38.21, 0.9, 50, "exclude-metal"),
                MetricRow("UNet", True, 41.33, 0.95, 50, "exclude-metal"),
            ]
        )

    def test_improvements(self):
        gp, gs = self._report().improvements()["UNet"]
        assert gp == pytest.approx(8.1654, abs=1e-4)
        assert gs == pytest.approx(5.5556, abs=1e-4)

    def test_table_and_json(self):
        rep = self._report()
        assert "41.33 (+8.16%)" in rep.to_table()
        data = json.loads(rep.to_json())
        assert [r["uc_loss"] for r in data["rows"]] == [False, True]
        assert data["improvements"]["UNet"]["psnr_pct"] == pytest.approx(8.1654, abs=1e-4)


class TestEvaluate:
    def test_identity_on_clean(self, tiny_dataset):
        row = evaluate(lambda stack: np.stack([s.clean for s in tiny_dataset.test]), tiny_dataset.test)
        assert row.psnr == math.inf
        assert row.ssim == pytest.approx(1.0, abs=1e-12)
        assert row.sample_count == len(tiny_dataset.test)
        assert row.mask_policy == "exclude-metal"

    def test_passthrough_matches_direct_metrics(self, tiny_dataset):
        row = evaluate(lambda stack: stack, tiny_dataset.test, exclude_metal=False)
        expected = np.mean([psnr(s.corrupted, s.clean) for s in tiny_dataset.test])
        assert row.psnr == pytest.approx(expected, abs=1e-9)

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            evaluate(lambda s: s, [])
