import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from aunet.losses import LossReport, au_loss, rec_loss, total_loss, triplet_loss
from aunet.training import gradient_check

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


class TestTriplet:
    def test_identical_anchor_positive_far_negative(self):
        a = t([0.3, -0.2])
        assert triplet_loss(a, a.clone(), t([2.0, 2.0]), 0.5).item() == 0.0

    def test_hand_example(self):
        # max(0, 1 - 1.21 + 0.5) + max(0, 1 - 0.01 + 0.5) = 0.29 + 1.49
        v = triplet_loss(t([0.0, 0.0]), t([1.0, 0.0]), t([1.1, 0.0]), 0.5).item()
        assert v == pytest.approx(1.78, abs=1e-12)

    def test_anchor_positive_swap(self):
        g = torch.Generator().manual_seed(0)
        a, p, n = (torch.randn(5, 16, dtype=D, generator=g) for _ in range(3))
        assert triplet_loss(a, p, n, 0.3).item() == pytest.approx(triplet_loss(p, a, n, 0.3).item(), abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            triplet_loss(t([0.0, 0.0]), t([1.0]), t([0.0, 1.0]), 0.2)

    def test_batch_is_mean_of_samples(self):
        g = torch.Generator().manual_seed(1)
        a, p, n = (torch.randn(7, 4, dtype=D, generator=g) for _ in range(3))
        per = [triplet_loss(a[i], p[i], n[i], 0.2).item() for i in range(7)]
        assert triplet_loss(a, p, n, 0.2).item() == pytest.approx(sum(per) / 7, abs=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 2))
    def test_nonnegative_and_zero_iff_hinges_inactive(self, seed, margin):
        rng = np.random.default_rng(seed)
        a, p, n = (rng.normal(size=3) for _ in range(3))
        v = triplet_loss(t(a), t(p), t(n), margin).item()
        assert v >= 0
        h1 = oracles.sqdist(a, p) - oracles.sqdist(a, n) + margin
        h2 = oracles.sqdist(a, p) - oracles.sqdist(p, n) + margin
        assert (v == 0) == (h1 <= 0 and h2 <= 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        a, p, n = (rng.normal(size=6) for _ in range(3))
        base = triplet_loss(t(a), t(p), t(n), 0.4).item()
        rot = triplet_loss(t(q @ a), t(q @ p), t(q @ n), 0.4).item()
        assert rot == pytest.approx(base, abs=1e-10)


class TestAULoss:
    def test_near_perfect_prediction(self):
        v = au_loss(t([1.0, 0.0]), t([1 - 1e-7, 1e-7])).item()
        assert v == pytest.approx(2e-7, rel=1e-3)

    def test_half(self):
        assert au_loss(t([1.0]), t([0.5])).item() == pytest.approx(0.693147, abs=1e-6)
        assert au_loss(t([1.0]), t([0.5])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_three_aus(self):
        v = au_loss(t([1.0, 0.0, 1.0]), t([0.9, 0.2, 0.8])).item()
        assert v == pytest.approx(-(math.log(0.9) + math.log(0.8) + math.log(0.8)), abs=1e-12)
        assert v == pytest.approx(0.551648, abs=1e-6)

    def test_clamp_keeps_loss_finite(self):
        v = au_loss(t([1.0, 0.0]), t([0.0, 1.0])).item()
        assert v == pytest.approx(-2 * math.log(1e-7), rel=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            au_loss(t([1.0, 0.0]), t([0.5]))
        with pytest.raises(ValueError):
            au_loss(t([2.0]), t([0.5]))

    def test_minimised_at_labels(self):
        # 1-D grid slices: with the other coordinate fixed, the minimum sits at the label
        grid = np.linspace(1e-6, 1 - 1e-6, 2001)
        for labels in ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]):
            for k in range(2):
                vals = []
                for g in grid:
                    q = [0.3, 0.6]
                    q[k] = g
                    vals.append(au_loss(t(labels), t(q)).item())
                best = grid[int(np.argmin(vals))]
                assert best == pytest.approx(labels[k], abs=1e-5)


class TestRecLoss:
    def test_zero(self):
        x = torch.rand(3, 4, 4, dtype=D)
        assert rec_loss(x, x.clone()).item() == 0.0

    def test_single_pixel(self):
        a = torch.zeros(3, 1, 1, dtype=D)
        a[0] = 1.0
        assert rec_loss(a, torch.zeros_like(a)).item() == 0.5

    def test_two_pixels(self):
        a = torch.zeros(3, 1, 2, dtype=D)
        a[0, 0, 0] = 1.0
        a[1, 0, 1] = 2.0
        assert rec_loss(a, torch.zeros_like(a)).item() == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rec_loss(torch.zeros(3, 2, 2), torch.zeros(3, 2, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
    def test_symmetric_and_quadratic(self, seed, alpha):
        g = torch.Generator().manual_seed(seed)
        x, y = torch.rand(2, 3, 5, 5, dtype=D, generator=g)
        assert rec_loss(x, y).item() == rec_loss(y, x).item()
        assert rec_loss(alpha * x, alpha * y).item() == pytest.approx(alpha ** 2 * rec_loss(x, y).item(),
                                                                       rel=1e-12, abs=1e-12)


class TestTotalLoss:
    def test_paper_lambda(self):
        r = total_loss(1.0, 100.0, 0.001)
        assert isinstance(r, LossReport)
        assert r.total == pytest.approx(1.1, abs=1e-12)

    def test_zero_lambda_and_zero_terms(self):
        assert total_loss(0.7, 5.0, 0.0).total == 0.7
        assert total_loss(0.0, 0.0, 0.001).total == 0.0

    def test_exact_sum(self):
        au, rec, lam = 0.123456789, 987.654321, 0.001
        assert total_loss(au, rec, lam).total == au + lam * rec

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            total_loss(-1.0, 0.0, 0.1)


class TestGradients:
    def test_triplet(self):
        g = torch.Generator().manual_seed(3)
        a, p, n = (torch.randn(8, 16, dtype=D, generator=g) for _ in range(3))
        assert gradient_check(lambda a, p, n: triplet_loss(a, p, n, 0.5), [a, p, n], eps=1e-6) < 1e-6

    def test_au(self):
        g = torch.Generator().manual_seed(4)
        labels = (torch.rand(6, 5, generator=g) > 0.5).to(D)
        probs = 0.05 + 0.9 * torch.rand(6, 5, dtype=D, generator=g)
        assert gradient_check(lambda q: au_loss(labels, q), [probs], eps=1e-6) < 1e-6

    def test_rec(self):
        g = torch.Generator().manual_seed(5)
        x, y = torch.rand(2, 2, 3, 6, 6, dtype=D, generator=g)
        assert gradient_check(lambda a: rec_loss(a, y), [x], eps=1e-6) < 1e-6

    def test_constant_function(self):
        x = torch.randn(4, dtype=D)
        assert gradient_check(lambda a: (a * 0).sum() + 3.0, [x]) == 0.0
