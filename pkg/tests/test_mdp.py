import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain_mdp, one_state, random_policy
from dspi.errors import DomainError, ShapeError
from dspi.garnet import GarnetSpec, generate_garnet
from dspi.mdp import (
    TabularMdp,
    apply_bellman_optimality,
    apply_bellman_policy,
    apply_smoothed_bellman_optimality,
    apply_smoothed_bellman_policy,
    deterministic_policy,
    evaluate_policy_exact,
    load_mdp,
    optimal_q,
    save_mdp,
    smoothing_term,
    uniform_policy,
    value_of,
)
from dspi.oracles import enumerate_deterministic_policies
from dspi.regularizers import ENTROPY, NEG_SQ_NORM, ZERO, nu_value


# definitional oracles written as explicit loops


def loop_bellman_policy(q, pi, mdp):
    n, m = mdp.n, mdp.m
    out = np.zeros((n, m))
    for s in range(n):
        for a in range(m):
            acc = mdp.reward[s, a]
            for t in range(n):
                acc += mdp.gamma * mdp.transition[s, a, t] * sum(pi[t, b] * q[t, b] for b in range(m))
            out[s, a] = acc
    return out


def loop_bellman_optimality(q, mdp):
    n, m = mdp.n, mdp.m
    out = np.zeros((n, m))
    for s in range(n):
        for a in range(m):
            out[s, a] = mdp.reward[s, a] + mdp.gamma * sum(
                mdp.transition[s, a, t] * max(q[t]) for t in range(n)
            )
    return out


def loop_f(pi, nu, mdp):
    n, m = mdp.n, mdp.m
    out = np.zeros((n, m))
    for s in range(n):
        for a in range(m):
            out[s, a] = mdp.gamma * sum(mdp.transition[s, a, t] * nu_value(nu, pi[t]) for t in range(n))
    return out


def grid_smoothed_max_2(qrow, eta, nu, step=1e-3):
    best = -math.inf
    for p in np.arange(0.0, 1.0 + step / 2, step):
        mu = np.array([p, 1.0 - p])
        best = max(best, float(mu @ qrow + eta * nu_value(nu, mu)))
    return best


def random_mdp(rng, n, m, gamma=None):
    p = rng.uniform(size=(n, m, n)) ** 2
    p /= p.sum(axis=2, keepdims=True)
    return TabularMdp(p, rng.uniform(size=(n, m)), gamma if gamma is not None else rng.uniform(0.1, 0.99))


class TestValidation:
    def test_accepts_valid(self, small_mdp):
        small_mdp.validate()

    def test_rejects_bad_rows(self):
        p = np.ones((1, 1, 1)) * 0.9
        with pytest.raises(DomainError):
            TabularMdp(p, [[0.5]], 0.9)

    def test_rejects_negative_entry(self):
        p = np.array([[[1.5, -0.5]]] * 2).reshape(2, 1, 2)
        with pytest.raises(DomainError):
            TabularMdp(p, [[0.5], [0.5]], 0.9)

    def test_rejects_reward_range(self):
        with pytest.raises(DomainError):
            TabularMdp(np.ones((1, 1, 1)), [[1.5]], 0.9)

    @pytest.mark.parametrize("g", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_gamma(self, g):
        with pytest.raises(DomainError):
            TabularMdp(np.ones((1, 1, 1)), [[0.5]], g)

    def test_rejects_shape(self):
        with pytest.raises(ShapeError):
            TabularMdp(np.ones((2, 1, 1)), [[0.5]], 0.9)

    def test_immutable(self, small_mdp):
        with pytest.raises(ValueError):
            small_mdp.transition[0, 0, 0] = 1.0

    def test_json_round_trip(self, small_mdp, tmp_path):
        path = tmp_path / "m.json"
        save_mdp(small_mdp, path)
        assert load_mdp(path) == small_mdp
        doc = json.loads(path.read_text())
        assert set(doc) == {"n", "m", "gamma", "reward", "transition"}

    def test_loader_rejects_invalid(self, tmp_path):
        doc = {"n": 1, "m": 1, "gamma": 0.9, "reward": [[0.5]], "transition": [[[0.7]]]}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(DomainError):
            load_mdp(path)


class TestPolicyOperator:
    def test_one_state_first_application(self):
        mdp = one_state([1.0], 0.5)
        assert apply_bellman_policy(np.zeros((1, 1)), [[1.0]], mdp)[0, 0] == 1.0

    def test_one_state_fixed_point(self):
        mdp = one_state([1.0], 0.5)
        assert apply_bellman_policy(np.full((1, 1), 2.0), [[1.0]], mdp)[0, 0] == 2.0

    def test_monotone_against_loop(self, rng):
        mdp = random_mdp(rng, 3, 2)
        for _ in range(20):
            pi = random_policy(rng, 3, 2)
            q1 = rng.normal(size=(3, 2))
            q2 = q1 + rng.uniform(size=(3, 2))
            h1, h2 = apply_bellman_policy(q1, pi, mdp), apply_bellman_policy(q2, pi, mdp)
            assert np.allclose(h1, loop_bellman_policy(q1, pi, mdp), atol=1e-13)
            assert np.all(h1 <= h2 + 1e-12)


class TestOptimalityOperator:
    def test_one_state(self):
        assert apply_bellman_optimality(np.full((1, 1), 2.0), one_state([1.0], 0.5))[0, 0] == 2.0

    def test_constant_shift(self, small_mdp):
        c = 3.7
        out = apply_bellman_optimality(np.full((small_mdp.n, small_mdp.m), c), small_mdp)
        assert np.allclose(out, small_mdp.reward + small_mdp.gamma * c, atol=1e-14)

    def test_contraction_against_loop(self, rng):
        mdp = random_mdp(rng, 4, 3)
        q1, q2 = rng.normal(size=(2, 4, 3))
        h1, h2 = apply_bellman_optimality(q1, mdp), apply_bellman_optimality(q2, mdp)
        assert np.allclose(h1, loop_bellman_optimality(q1, mdp), atol=1e-13)
        assert np.max(np.abs(h1 - h2)) <= mdp.gamma * np.max(np.abs(q1 - q2)) + 1e-12


class TestSmoothedOperators:
    def test_eta_zero_matches_unsmoothed(self, small_mdp, rng):
        q = rng.normal(size=(small_mdp.n, small_mdp.m))
        pi = random_policy(rng, small_mdp.n, small_mdp.m)
        for nu in (ZERO, ENTROPY, NEG_SQ_NORM):
            assert np.array_equal(
                apply_smoothed_bellman_optimality(q, 0.0, nu, small_mdp), apply_bellman_optimality(q, small_mdp)
            )
            assert np.array_equal(
                apply_smoothed_bellman_policy(q, pi, 0.0, nu, small_mdp), apply_bellman_policy(q, pi, small_mdp)
            )

    def test_entropy_at_zero_q(self, small_mdp):
        eta = 2.5
        out = apply_smoothed_bellman_optimality(np.zeros((small_mdp.n, small_mdp.m)), eta, ENTROPY, small_mdp)
        assert np.allclose(out, small_mdp.reward + small_mdp.gamma * eta * math.log(small_mdp.m), atol=1e-13)

    def test_entropy_large_eta_mean_field(self, small_mdp, rng):
        q = rng.normal(size=(small_mdp.n, small_mdp.m))
        eta = 1e6
        out = apply_smoothed_bellman_optimality(q, eta, ENTROPY, small_mdp)
        approx = small_mdp.reward + small_mdp.gamma * (
            small_mdp.transition @ (eta * math.log(small_mdp.m) + q.mean(axis=1))
        )
        assert np.allclose(out, approx, rtol=0, atol=1e-4)

    def test_inner_max_matches_grid(self, rng):
        mdp = random_mdp(rng, 3, 2, gamma=0.9)
        q = rng.normal(size=(3, 2))
        eta = 0.7
        out = apply_smoothed_bellman_optimality(q, eta, ENTROPY, mdp)
        inner = np.array([grid_smoothed_max_2(q[t], eta, ENTROPY) for t in range(3)])
        expected = mdp.reward + mdp.gamma * mdp.transition @ inner
        assert np.allclose(out, expected, atol=1e-5)

    def test_zero_regularizer_policy_operator(self, small_mdp, rng):
        q = rng.normal(size=(small_mdp.n, small_mdp.m))
        pi = random_policy(rng, small_mdp.n, small_mdp.m)
        assert np.allclose(
            apply_smoothed_bellman_policy(q, pi, 4.0, ZERO, small_mdp), apply_bellman_policy(q, pi, small_mdp)
        )

    @pytest.mark.parametrize("nu", [ENTROPY, NEG_SQ_NORM], ids=lambda r: r.key)
    def test_policy_operator_offset(self, nu, rng):
        mdp = random_mdp(rng, 4, 3)
        q = rng.normal(size=(4, 3))
        pi = random_policy(rng, 4, 3)
        eta = 0.37
        diff = apply_smoothed_bellman_policy(q, pi, eta, nu, mdp) - apply_bellman_policy(q, pi, mdp)
        assert np.allclose(diff, eta * loop_f(pi, nu, mdp), atol=1e-12)
        assert np.allclose(smoothing_term(pi, nu, mdp), loop_f(pi, nu, mdp), atol=1e-14)

    def test_negative_eta(self, small_mdp):
        with pytest.raises(DomainError):
            apply_smoothed_bellman_optimality(np.zeros((small_mdp.n, small_mdp.m)), -1.0, ENTROPY, small_mdp)


class TestEvaluation:
    def test_one_state(self):
        assert evaluate_policy_exact([[1.0]], one_state([1.0], 0.5))[0, 0] == pytest.approx(2.0, abs=1e-14)

    def test_chain(self):
        q = evaluate_policy_exact([[1.0], [1.0]], chain_mdp(0.5))
        assert q[1, 0] == pytest.approx(2.0, abs=1e-14)
        assert q[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_fixed_point_residual(self, small_mdp, rng):
        for _ in range(20):
            pi = random_policy(rng, small_mdp.n, small_mdp.m)
            q = evaluate_policy_exact(pi, small_mdp)
            assert np.max(np.abs(q - apply_bellman_policy(q, pi, small_mdp))) <= 1e-10

    def test_matches_full_system(self, small_mdp, rng):
        n, m, g = small_mdp.n, small_mdp.m, small_mdp.gamma
        pi = random_policy(rng, n, m)
        big = np.zeros((n * m, n * m))
        for s, a, t, b in itertools.product(range(n), range(m), range(n), range(m)):
            big[s * m + a, t * m + b] = small_mdp.transition[s, a, t] * pi[t, b]
        ref = np.linalg.solve(np.eye(n * m) - g * big, small_mdp.reward.ravel()).reshape(n, m)
        assert np.allclose(evaluate_policy_exact(pi, small_mdp), ref, atol=1e-12)

    def test_invalid_policy(self, small_mdp):
        with pytest.raises(DomainError):
            evaluate_policy_exact(np.full((small_mdp.n, small_mdp.m), 0.5), small_mdp)


class TestOptimalQ:
    def test_one_state_two_actions(self):
        sol = optimal_q(one_state([1.0, 0.5], 0.9))
        assert sol.q[0] == pytest.approx([10.0, 9.5], abs=1e-9)
        assert np.array_equal(sol.policy, [[1.0, 0.0]])

    def test_dominates_random_policies(self, small_mdp, rng):
        tol = 1e-10
        sol = optimal_q(small_mdp, tol)
        for _ in range(100):
            q = evaluate_policy_exact(random_policy(rng, small_mdp.n, small_mdp.m), small_mdp)
            assert np.all(sol.q >= q - 2 * tol)
        assert np.max(np.abs(sol.q - apply_bellman_optimality(sol.q, small_mdp))) <= 2 * tol

    def test_matches_enumeration(self, rng):
        for seed in range(5):
            mdp = generate_garnet(GarnetSpec(5, 3, 2, 0.9, seed))
            ref = enumerate_deterministic_policies(mdp)
            assert np.max(np.abs(optimal_q(mdp).q.max(axis=1) - ref.v_star)) <= 1e-9

    def test_unpolished_within_tol(self, small_mdp):
        exact = optimal_q(small_mdp, 1e-12).q
        rough = optimal_q(small_mdp, 1e-4, polish=False).q
        assert np.max(np.abs(rough - exact)) <= 1e-4


class TestValueOf:
    def test_deterministic(self, rng):
        q = rng.normal(size=(4, 3))
        assert np.array_equal(value_of(q, deterministic_policy([0] * 4, 3)), q[:, 0])

    def test_uniform(self, rng):
        q = rng.normal(size=(4, 2))
        assert np.allclose(value_of(q, uniform_policy(4, 2)), q.mean(axis=1), atol=1e-15)

    def test_loop(self, rng):
        q = rng.normal(size=(5, 3))
        pi = random_policy(rng, 5, 3)
        ref = [sum(pi[s, a] * q[s, a] for a in range(3)) for s in range(5)]
        assert np.allclose(value_of(q, pi), ref, atol=1e-14)


# operator suite: contraction, monotonicity, translation over random tuples

OPERATORS = ["H", "H_pi", "H_eta", "H_eta_pi"]


def apply_op(name, q, mdp, pi, eta, nu):
    if name == "H":
        return apply_bellman_optimality(q, mdp)
    if name == "H_pi":
        return apply_bellman_policy(q, pi, mdp)
    if name == "H_eta":
        return apply_smoothed_bellman_optimality(q, eta, nu, mdp)
    return apply_smoothed_bellman_policy(q, pi, eta, nu, mdp)


@st.composite
def operator_tuples(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    n, m = draw(st.integers(1, 5)), draw(st.integers(1, 4))
    mdp = random_mdp(rng, n, m)
    scale = draw(st.sampled_from([1e-3, 1.0, 30.0]))
    q1 = rng.normal(size=(n, m)) * scale
    q2 = rng.normal(size=(n, m)) * scale
    eta = draw(st.sampled_from([0.0, 1e-6, 0.05, 1.0, 20.0]))
    nu = draw(st.sampled_from([ZERO, ENTROPY, NEG_SQ_NORM]))
    return mdp, q1, q2, random_policy(rng, n, m), eta, nu


class TestOperatorSuite:
    @pytest.mark.parametrize("op", OPERATORS)
    @settings(max_examples=200, deadline=None)
    @given(t=operator_tuples())
    def test_contraction(self, op, t):
        mdp, q1, q2, pi, eta, nu = t
        lhs = np.max(np.abs(apply_op(op, q1, mdp, pi, eta, nu) - apply_op(op, q2, mdp, pi, eta, nu)))
        assert lhs <= mdp.gamma * np.max(np.abs(q1 - q2)) + 1e-12

    @pytest.mark.parametrize("op", OPERATORS)
    @settings(max_examples=200, deadline=None)
    @given(t=operator_tuples())
    def test_monotone(self, op, t):
        mdp, q1, q2, pi, eta, nu = t
        hi = np.maximum(q1, q2)
        assert np.all(apply_op(op, q1, mdp, pi, eta, nu) <= apply_op(op, hi, mdp, pi, eta, nu) + 1e-12)

    @pytest.mark.parametrize("op", OPERATORS)
    @settings(max_examples=100, deadline=None)
    @given(t=operator_tuples(), c=st.floats(-10, 10))
    def test_translation(self, op, t, c):
        mdp, q1, _, pi, eta, nu = t
        lhs = apply_op(op, q1 + c, mdp, pi, eta, nu)
        rhs = apply_op(op, q1, mdp, pi, eta, nu) + mdp.gamma * c
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(q1)) + abs(c)) * 10
