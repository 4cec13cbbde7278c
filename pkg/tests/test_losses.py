import math

import numpy as np
import pytest

from matchmap.encode import SizeTargets
from matchmap.grid import Heatmap
from matchmap.losses import (
    FocalParams,
    LossWeights,
    gaussian_focal_loss,
    size_l1_loss,
    total_loss,
)


def fd_gradient(fn, x: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = fn(x)
        x[idx] = orig - step
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


class TestGaussianFocalLoss:
    def test_perfect_prediction_is_zero(self):
        gt = np.zeros((4, 4))
        gt[1, 2] = 1.0
        loss, grad = gaussian_focal_loss(gt.copy(), gt)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_positive_cell_spot_value(self):
        loss, _ = gaussian_focal_loss(np.full((1, 1), 0.5), np.ones((1, 1)))
        assert loss == pytest.approx(0.173287, abs=1e-6)
        assert loss == pytest.approx(-0.25 * math.log(0.5), abs=1e-12)

    def test_negative_cell_spot_value(self):
        # gt = 0 so the beta weight is 1; N = 0 normalizes by 1
        loss, _ = gaussian_focal_loss(np.full((1, 1), 0.5), np.zeros((1, 1)))
        assert loss == pytest.approx(0.173287, abs=1e-6)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            gaussian_focal_loss(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_normalized_by_positive_count(self):
        gt = np.zeros((2, 2))
        gt[0, 0] = 1.0
        gt[1, 1] = 1.0
        pred = np.full((2, 2), 0.5)
        loss_two, _ = gaussian_focal_loss(pred, gt)
        single_pos, _ = gaussian_focal_loss(np.full((1, 1), 0.5), np.ones((1, 1)))
        single_neg, _ = gaussian_focal_loss(np.full((1, 1), 0.5), np.zeros((1, 1)))
        assert loss_two == pytest.approx((2 * single_pos + 2 * single_neg) / 2, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        gt = np.clip(rng.uniform(0, 1, size=(8, 8)), 0, 1)
        gt[rng.uniform(size=(8, 8)) < 0.2] = 1.0
        pred = rng.uniform(0.05, 0.95, size=(8, 8))
        params = FocalParams()
        _, grad = gaussian_focal_loss(pred, gt, params)
        fd = fd_gradient(lambda p: gaussian_focal_loss(p, gt, params)[0], pred.copy(), 1e-6)
        rel = np.abs(grad - fd) / np.maximum.reduce([np.abs(grad), np.abs(fd), np.full_like(fd, 1e-3)])
        assert rel.max() < 1e-5

    def test_monotone_at_positive_cell(self):
        gt = np.ones((1, 1))
        values = [gaussian_focal_loss(np.full((1, 1), p), gt)[0] for p in (0.2, 0.5, 0.8, 0.99)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_clamped_region_has_zero_gradient(self):
        params = FocalParams(eps=1e-6)
        pred = np.array([[0.0, 0.5]])
        gt = np.array([[1.0, 1.0]])
        _, grad = gaussian_focal_loss(pred, gt, params)
        assert grad[0, 0] == 0.0
        assert grad[0, 1] != 0.0

    def test_accepts_heatmap_types(self):
        gt = Heatmap(np.ones((2, 2)))
        pred = Heatmap(np.full((2, 2), 0.5))
        loss, grad = gaussian_focal_loss(pred, gt)
        assert grad.shape == (2, 2)
        assert loss > 0


def make_targets(entries, grid=8):
    h = np.zeros((grid, grid))
    w = np.zeros((grid, grid))
    pos = np.zeros((grid, grid), dtype=bool)
    for (r, c), (th, tw) in entries.items():
        pos[r, c] = True
        h[r, c] = th
        w[r, c] = tw
    return SizeTargets(h, w, pos)


class TestSizeL1Loss:
    def test_exact_prediction_is_zero(self):
        targets = make_targets({(2, 3): (4.0, 6.0)})
        pred_h = np.zeros((8, 8))
        pred_w = np.zeros((8, 8))
        pred_h[2, 3] = 4.0
        pred_w[2, 3] = 6.0
        loss, (gh, gw) = size_l1_loss(pred_h, pred_w, targets)
        assert loss == 0.0
        assert not gh.any() and not gw.any()

    def test_single_cell_value(self):
        targets = make_targets({(2, 3): (4.0, 6.0)})
        pred_h = np.zeros((8, 8))
        pred_w = np.zeros((8, 8))
        pred_h[2, 3] = 5.0
        pred_w[2, 3] = 6.0
        loss, _ = size_l1_loss(pred_h, pred_w, targets)
        assert loss == pytest.approx(0.5)

    def test_empty_mask_is_zero(self):
        targets = make_targets({})
        loss, (gh, gw) = size_l1_loss(np.full((8, 8), 9.0), np.full((8, 8), 9.0), targets)
        assert loss == 0.0
        assert not gh.any()

    def test_off_mask_prediction_ignored(self):
        targets = make_targets({(1, 1): (2.0, 2.0)})
        pred = np.full((8, 8), 100.0)
        loss, _ = size_l1_loss(pred, pred, targets)
        assert loss == pytest.approx(98.0)

    def test_gradient_is_sign_over_count(self):
        targets = make_targets({(1, 1): (2.0, 2.0), (4, 5): (3.0, 7.0)})
        rng = np.random.default_rng(0)
        pred_h = rng.uniform(0, 10, (8, 8))
        pred_w = rng.uniform(0, 10, (8, 8))
        _, (gh, gw) = size_l1_loss(pred_h, pred_w, targets)
        for (r, c), (th, tw) in {(1, 1): (2.0, 2.0), (4, 5): (3.0, 7.0)}.items():
            assert gh[r, c] == np.sign(pred_h[r, c] - th) / 4
            assert gw[r, c] == np.sign(pred_w[r, c] - tw) / 4
        assert gh[0, 0] == 0.0

    def test_gradient_matches_finite_differences(self):
        targets = make_targets({(1, 1): (2.0, 2.0), (4, 5): (3.0, 7.0)})
        rng = np.random.default_rng(1)
        pred_h = rng.uniform(0, 10, (8, 8))
        pred_w = rng.uniform(0, 10, (8, 8))
        _, (gh, gw) = size_l1_loss(pred_h, pred_w, targets)
        fd_h = fd_gradient(
            lambda p: size_l1_loss(p, pred_w, targets)[0], pred_h.copy(), 1e-6
        )
        fd_w = fd_gradient(
            lambda p: size_l1_loss(pred_h, p, targets)[0], pred_w.copy(), 1e-6
        )
        assert np.abs(gh - fd_h).max() < 1e-9
        assert np.abs(gw - fd_w).max() < 1e-9

    def test_shape_mismatch_raises(self):
        targets = make_targets({(1, 1): (2.0, 2.0)})
        with pytest.raises(ValueError):
            size_l1_loss(np.zeros((4, 4)), np.zeros((8, 8)), targets)


class TestTotalLoss:
    def test_zero_parts(self):
        assert total_loss(0.0, 0.0) == 0.0

    def test_weighted_sum(self):
        assert total_loss(0.2, 0.5, LossWeights(1.0, 0.1)) == pytest.approx(0.25)

    def test_zero_heatmap_weight(self):
        assert total_loss(7.0, 0.5, LossWeights(0.0, 0.1)) == pytest.approx(0.05)

    def test_non_finite_raises(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0.0)
        with pytest.raises(ValueError):
            total_loss(0.0, float("inf"))
