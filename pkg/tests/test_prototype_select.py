import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gauss_pdf, random_bank, unit_rows
from gengmm.gmm_density import GmmBank
from gengmm.prototype_select import (
    PrototypeSelection,
    component_sigma,
    gmm_alpha,
    select_batch,
    select_labeled_source,
    select_noisy_source,
    select_unlabeled_source,
)


def _planted(means, var=0.05):
    """Bank from an explicit (C, M, D) mean array with equal weights and variances."""
    means = np.asarray(means, dtype=float)
    C, M, D = means.shape
    bank = GmmBank(C, M, D)
    bank.means = means.copy()
    bank.variances = np.full((C, M, D), var)
    bank.initialized[:] = True
    return bank


def brute_joint_argmax(bank, f):
    best, arg = -np.inf, None
    for c, m in itertools.product(range(bank.C), range(bank.M)):
        v = np.log(bank.weights[c, m]) + np.log(gauss_pdf(f, bank.means[c, m], bank.variances[c, m]) + 1e-300)
        if v > best:
            best, arg = v, (c, m)
    return arg


def brute_within(bank, f, c):
    vals = [bank.weights[c, m] * gauss_pdf(f, bank.means[c, m], bank.variances[c, m]) for m in range(bank.M)]
    return int(np.argmax(vals))


class TestLabeledSource:
    def test_single_component(self, rng):
        bank = random_bank(rng, C=4, M=1, D=5)
        sel = select_labeled_source(bank, unit_rows(rng, 1, 5)[0], 2)
        assert sel.positive[:2] == (2, 0)
        assert [n[:2] for n in sel.negatives] == [(0, 0), (1, 0), (3, 0)]
        assert sel.alpha == 1.0

    def test_planted_two_class_example(self):
        # class 0 components: near f, far; class 1 components: far, moderately near
        bank = _planted([[[0.9, 0.1], [-1.0, 0.0]], [[0.0, -1.0], [0.5, 0.6]]])
        sel = select_labeled_source(bank, np.array([1.0, 0.0]), 0)
        assert sel.positive[:2] == (0, 0)
        assert sel.negatives[0][:2] == (1, 1)

    def test_brute_force(self, rng):
        for _ in range(30):
            bank = random_bank(rng, C=3, M=4, D=4, spread=0.3)
            f = unit_rows(rng, 1, 4)[0]
            y = int(rng.integers(3))
            sel = select_labeled_source(bank, f, y)
            assert sel.positive[:2] == (y, brute_within(bank, f, y))
            for c, m, q in sel.negatives:
                assert m == brute_within(bank, f, c)
                assert np.array_equal(q, bank.means[c, m])

    def test_bad_label(self, rng):
        with pytest.raises(ValueError):
            select_labeled_source(random_bank(rng), np.ones(6) / np.sqrt(6), 7)


class TestUnlabeledSource:
    def test_alpha_at_mean_is_one(self, rng):
        bank = random_bank(rng, C=3, M=2, D=6, spread=0.01)
        f = bank.means[1, 0].copy()
        sel = select_unlabeled_source(bank, f)
        assert sel.positive[:2] == (1, 0) and sel.alpha == 1.0

    @pytest.mark.parametrize("mode", ["trace", "mean"])
    def test_alpha_plug_in(self, mode):
        var = np.array([0.2, 0.4, 0.6])
        sigma = component_sigma(var, mode)
        mu = np.zeros(3)
        f = np.array([np.sqrt(2 * sigma), 0.0, 0.0])
        assert gmm_alpha(f, mu, sigma) == pytest.approx(np.exp(-1), rel=1e-14)

    def test_planted_orange_square(self):
        # sample sits on class-0 component 1 and is nearer class-1 component 0 than component 1
        bank = _planted([[[1.0, 0.0], [0.0, 1.0]], [[0.3, 1.0], [-1.0, -1.0]]])
        sel = select_unlabeled_source(bank, np.array([0.05, 0.95]))
        assert sel.positive[:2] == (0, 1)
        assert sel.negatives[0][:2] == (1, 0)

    def test_brute_force(self, rng):
        for _ in range(30):
            bank = random_bank(rng, C=4, M=3, D=4, spread=0.3)
            f = unit_rows(rng, 1, 4)[0]
            sel = select_unlabeled_source(bank, f)
            assert sel.positive[:2] == brute_joint_argmax(bank, f)

    def test_alpha_in_unit_interval(self, rng):
        bank = random_bank(rng, C=3, M=2, D=6, spread=1e-4)
        a = select_batch(bank, unit_rows(rng, 200, 6) * 50).alpha
        assert np.all(a > 0) and np.all(a <= 1)

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
    def test_alpha_radially_monotone(self, seed, t1, t2):
        r = np.random.default_rng(seed)
        mu, u = r.normal(size=5), unit_rows(r, 1, 5)[0]
        lo, hi = sorted((t1, t2))
        assert gmm_alpha(mu + hi * u, mu, 0.7) <= gmm_alpha(mu + lo * u, mu, 0.7)


class TestNoisySource:
    def test_equals_unlabeled(self, rng):
        bank = random_bank(rng, C=3, M=3, D=5)
        for _ in range(10):
            f = unit_rows(rng, 1, 5)[0]
            assert select_noisy_source(bank, f, 1).same_as(select_unlabeled_source(bank, f))

    def test_mislabeled_pixel_follows_gmm(self):
        bank = _planted([[[1.0, 0.0]], [[0.0, 1.0]]], var=0.01)
        f = np.array([0.02, 0.99])  # on class 1's mode, labeled 0
        sel = select_noisy_source(bank, f, 0)
        assert sel.positive_class == 1
        # the densities agree: class 1 is overwhelmingly more likely
        assert gauss_pdf(f, [0, 1], [0.01] * 2) > 1e6 * gauss_pdf(f, [1, 0], [0.01] * 2)

    def test_clean_pixel_on_mode(self):
        bank = _planted([[[1.0, 0.0]], [[0.0, 1.0]]], var=0.01)
        sel = select_noisy_source(bank, np.array([1.0, 0.0]), 0)
        assert sel.positive_class == 0 and sel.alpha == pytest.approx(1.0)


class TestSelectionType:
    def test_alpha_range_checked(self):
        with pytest.raises(ValueError):
            PrototypeSelection((0, 0, np.zeros(2)), [(1, 0, np.zeros(2))], 0.0)

    def test_negatives_cover_other_classes(self):
        with pytest.raises(ValueError):
            PrototypeSelection((0, 0, np.zeros(2)), [(0, 1, np.zeros(2))], 1.0)

    def test_batch_matches_single(self, rng):
        bank = random_bank(rng, C=3, M=2, D=4)
        f = unit_rows(rng, 9, 4)
        batch = select_batch(bank, f)
        for n in range(9):
            assert batch.pixel(n).same_as(select_unlabeled_source(bank, f[n]))
