import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dspi.errors import DomainError
from dspi.regularizers import (
    ENTROPY,
    NEG_SQ_NORM,
    ZERO,
    Regularizer,
    greedy,
    max_point,
    nu_max,
    nu_value,
    project_simplex,
    regularized_argmax,
    smoothed_max,
)

KINDS = [ZERO, ENTROPY, NEG_SQ_NORM]


def objective(r, q, eta, mu):
    return float(mu @ q + eta * nu_value(r, mu))


def simplex_grid_2(step):
    p = np.arange(0.0, 1.0 + step / 2, step)
    return np.stack([p, 1.0 - p], axis=1)


def random_simplex(rng, count, m):
    return rng.dirichlet(np.ones(m) * 0.5, size=count)


class TestNuValue:
    def test_entropy_uniform_four(self):
        assert nu_value(ENTROPY, np.full(4, 0.25)) == pytest.approx(1.3862943611, abs=1e-10)

    def test_entropy_point_mass(self):
        assert nu_value(ENTROPY, [0.0, 1.0, 0.0]) == 0.0

    def test_neg_sq_norm(self):
        assert nu_value(NEG_SQ_NORM, [1.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
        for m in (1, 2, 5):
            assert nu_value(NEG_SQ_NORM, np.full(m, 1 / m)) == pytest.approx(0.5 * (1 - 1 / m), abs=1e-15)

    def test_rejects_non_distribution(self):
        with pytest.raises(DomainError):
            nu_value(ENTROPY, [0.6, 0.6])
        with pytest.raises(DomainError):
            nu_value(ENTROPY, [1.2, -0.2])

    @pytest.mark.parametrize("r", KINDS, ids=lambda r: r.key)
    def test_nonnegative_and_concave(self, r, rng):
        for _ in range(200):
            m = int(rng.integers(1, 7))
            mu1, mu2 = random_simplex(rng, 2, m)
            lam = rng.uniform()
            assert nu_value(r, mu1) >= 0
            mix = lam * mu1 + (1 - lam) * mu2
            assert nu_value(r, mix) >= lam * nu_value(r, mu1) + (1 - lam) * nu_value(r, mu2) - 1e-12


class TestNuMax:
    def test_values(self):
        assert nu_max(ENTROPY, 2) == pytest.approx(math.log(2))
        assert nu_max(ZERO, 7) == 0.0
        assert nu_max(NEG_SQ_NORM, 4) == pytest.approx(0.375)

    @pytest.mark.parametrize("r", KINDS, ids=lambda r: r.key)
    def test_dominates_samples(self, r, rng):
        mus = random_simplex(rng, 1000, 5)
        assert np.all(nu_value(r, mus) <= nu_max(r, 5) + 1e-15)

    @pytest.mark.parametrize("r", KINDS, ids=lambda r: r.key)
    def test_max_point_attains(self, r):
        assert np.allclose(max_point(r, 3), [1 / 3] * 3)
        assert nu_value(r, max_point(r, 6)) == pytest.approx(nu_max(r, 6), abs=1e-14)

    def test_zero_max_point_uniform(self):
        assert np.array_equal(max_point(ZERO, 2), [0.5, 0.5])

    def test_from_key(self):
        assert Regularizer.from_key("entropy") is ENTROPY or Regularizer.from_key("entropy") == ENTROPY
        with pytest.raises(Exception):
            Regularizer.from_key("tsallis")


class TestRegularizedArgmax:
    def test_symmetric(self):
        assert np.allclose(regularized_argmax(ENTROPY, [0.0, 0.0], 0.3), [0.5, 0.5])

    def test_entropy_closed_form_against_grid(self):
        mu = regularized_argmax(ENTROPY, [1.0, 0.0], 1.0)
        assert np.allclose(mu, [0.7310585786, 0.2689414214], atol=1e-10)
        grid = simplex_grid_2(1e-4)
        best = max(objective(ENTROPY, np.array([1.0, 0.0]), 1.0, g) for g in grid)
        assert objective(ENTROPY, np.array([1.0, 0.0]), 1.0, mu) >= best - 1e-12
        assert objective(ENTROPY, np.array([1.0, 0.0]), 1.0, mu) - best <= 1e-7

    def test_zero_tie_break_lowest(self):
        assert np.array_equal(regularized_argmax(ZERO, [0.3, 0.9, 0.9], 1.0), [0, 1, 0])
        assert np.array_equal(regularized_argmax(ZERO, [0.3, 0.9, 0.9], 1.0, "highest"), [0, 0, 1])

    def test_small_eta_limit(self):
        assert np.allclose(regularized_argmax(ENTROPY, [1.0, 0.0], 1e-8), [1.0, 0.0], atol=1e-6)

    def test_eta_zero_is_greedy(self):
        q = np.array([[0.1, 0.5, 0.2], [0.4, 0.4, 0.0]])
        for r in KINDS:
            assert np.array_equal(regularized_argmax(r, q, 0.0), greedy(q))

    def test_huge_logits_stay_finite(self):
        mu = regularized_argmax(ENTROPY, [1e6, 0.0, -1e6], 1e-300)
        assert np.all(np.isfinite(mu)) and mu[0] == 1.0

    def test_neg_sq_norm_against_grid(self):
        q = np.array([0.4, 0.1])
        for eta in (0.05, 0.3, 2.0):
            mu = regularized_argmax(NEG_SQ_NORM, q, eta)
            best = max(objective(NEG_SQ_NORM, q, eta, g) for g in simplex_grid_2(1e-4))
            assert objective(NEG_SQ_NORM, q, eta, mu) >= best - 1e-12

    def test_rejects_bad_eta(self):
        with pytest.raises(DomainError):
            regularized_argmax(ENTROPY, [0.0, 1.0], -1.0)
        with pytest.raises(DomainError):
            regularized_argmax(ENTROPY, [0.0, np.nan], 1.0)

    @pytest.mark.parametrize("r", KINDS, ids=lambda r: r.key)
    def test_optimality_certificate(self, r, rng):
        for _ in range(500):
            m = int(rng.integers(1, 6))
            q = rng.normal(size=m) * rng.choice([0.1, 1, 10])
            eta = float(rng.choice([0.0, 1e-3, 0.1, 1.0, 10.0]))
            mu = regularized_argmax(r, q, eta)
            assert abs(mu.sum() - 1) <= 1e-12 and mu.min() >= 0
            best = objective(r, q, eta, mu)
            others = random_simplex(rng, 1000, m)
            vals = others @ q + eta * nu_value(r, others)
            assert best >= vals.max() - 1e-9
            assert smoothed_max(r, q, eta) == pytest.approx(best, abs=1e-9)


finite = st.floats(-50, 50, allow_nan=False)


class TestInvariances:
    @settings(max_examples=200, deadline=None)
    @given(arrays(float, st.integers(1, 6), elements=finite), st.floats(1e-3, 10), st.floats(0.01, 100))
    def test_entropy_scale_covariance(self, q, eta, c):
        assert np.allclose(regularized_argmax(ENTROPY, q, eta), regularized_argmax(ENTROPY, c * q, c * eta), atol=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(
        st.sampled_from(KINDS),
        arrays(float, st.integers(1, 6), elements=finite),
        st.floats(0, 10),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, r, q, eta, shift):
        a = regularized_argmax(r, q, eta)
        b = regularized_argmax(r, q + shift, eta)
        if eta == 0 or r == ZERO:
            # greedy: only compare where the shift does not merge near-ties
            gaps = np.diff(np.sort(q))
            if gaps.size and gaps.min() < 1e-9 * max(1, abs(shift)):
                return
        assert np.allclose(a, b, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(arrays(float, st.integers(1, 8), elements=st.floats(-1e3, 1e3)))
    def test_projection_is_distribution(self, v):
        mu = project_simplex(v)
        assert mu.min() >= 0 and abs(mu.sum() - 1) <= 1e-12
