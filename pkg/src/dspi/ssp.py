"""Stochastic shortest path problems with an absorbing, cost-free terminal state.

Transitions are stored as ``(n, m, n + 1)`` with the last column the terminal
state; rewards are costs in [-1, 0]. Operators are undiscounted and sum only
over non-terminal successors. Convergence arguments use a weighted sup-norm
``||Q||_xi = max |Q| / xi`` under which the optimality operator contracts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import bounds
from .errors import ConfigError, DomainError, InternalConsistencyError, ShapeError
from .mdp import ROW_SUM_TOL, check_policy, check_q, sup_norm, value_of
from .regularizers import ENTROPY, Regularizer, greedy, nu_value, smoothed_max
from .solvers import (
    EquivalenceReport,
    StepsizeSchedule,
    _finalize,
    _npg_schedule,
    _raw_npg_records,
    _validate_k_max,
    averaged_loop,
    beta_from_alpha,
    compare_policy_sequences,
    geometric_alphas,
)
from .trace import SolverTrace

FIXED_POINT_TOL = 1e-10
CONTRACTION_SLACK = 1e-10
CONTRACTION_PAIRS = 200
MAX_MARGIN = 2.0**10


class ProperCertificate(NamedTuple):
    """Largest expected number of stages before termination, per (s, a)."""

    stages: np.ndarray


class ImproperWitness(NamedTuple):
    state: int
    actions: np.ndarray  # deterministic policy that never terminates from ``state``
    trap: tuple  # closed set of non-terminal states


@dataclass(frozen=True, eq=False)
class WeightedNorm:
    xi: np.ndarray
    kappa: float
    margin: float = 1.0

    def __call__(self, q) -> float:
        return float(np.max(np.abs(q) / self.xi))

    @property
    def kappa_prime(self) -> float:
        return bounds.kappa_prime(self.kappa)


@dataclass(frozen=True, eq=False)
class SspMdp:
    transition: np.ndarray
    reward: np.ndarray
    require_proper: bool = True
    certificate: ProperCertificate | None = field(default=None, init=False)
    _norm: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if r.ndim != 2 or r.size == 0:
            raise ShapeError(f"reward must be a nonempty (n, m) matrix, got shape {r.shape}")
        n, m = r.shape
        if p.shape != (n, m, n + 1):
            raise ShapeError(f"transition must have shape {(n, m, n + 1)}, got {p.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
            raise DomainError("transition and reward must be finite")
        if np.any(p < 0):
            raise DomainError("transition probabilities must be nonnegative")
        worst = np.max(np.abs(p.sum(axis=2) - 1.0))
        if worst > ROW_SUM_TOL:
            raise DomainError(f"transition rows must sum to 1 (max deviation {worst:.3e})")
        if np.any(r < -1) or np.any(r > 0):
            raise DomainError("SSP rewards must lie in [-1, 0]")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        if self.require_proper:
            result = check_all_proper(self)
            if isinstance(result, ImproperWitness):
                raise DomainError(
                    f"some stationary policy is improper: from state {result.state} the actions "
                    f"{result.actions.tolist()} never reach the terminal state"
                )
            object.__setattr__(self, "certificate", result)

    @property
    def n(self) -> int:
        return self.reward.shape[0]

    @property
    def m(self) -> int:
        return self.reward.shape[1]

    @property
    def inner(self) -> np.ndarray:
        """Transition mass among non-terminal states, shape (n, m, n)."""
        return self.transition[:, :, : self.n]

    @property
    def weighted_norm(self) -> WeightedNorm:
        if not self._norm:
            self._norm.append(compute_weighted_norm(self))
        return self._norm[0]

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "reward": self.reward.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SspMdp":
        try:
            ssp = cls(doc["transition"], doc["reward"])
        except KeyError as exc:
            raise DomainError(f"SSP document is missing field {exc}") from None
        if (doc.get("n", ssp.n), doc.get("m", ssp.m)) != (ssp.n, ssp.m):
            raise ShapeError("declared n/m do not match the reward matrix")
        ssp.weighted_norm  # certify at load time
        return ssp


def save_ssp(ssp: SspMdp, path) -> None:
    Path(path).write_text(json.dumps(ssp.to_dict()))


def load_ssp(path) -> SspMdp:
    return SspMdp.from_dict(json.loads(Path(path).read_text()))


def _trap_set(ssp: SspMdp) -> np.ndarray:
    """Greatest set C of non-terminal states such that every state in C has an
    action keeping the chain inside C with probability one."""
    support = ssp.transition > 0
    inside = np.ones(ssp.n, dtype=bool)
    while True:
        # action stays inside iff no terminal mass and all successors in C
        stays = ~support[:, :, ssp.n] & ~np.any(support[:, :, : ssp.n] & ~inside[None, None, :], axis=2)
        nxt = inside & stays.any(axis=1)
        if np.array_equal(nxt, inside):
            return inside
        inside = nxt


def _max_stages(ssp: SspMdp, max_iter: int = 10_000) -> np.ndarray:
    """Solve T = 1 + P max T by policy iteration on the worst-case policy."""
    inner = ssp.inner
    acts = np.zeros(ssp.n, dtype=int)
    idx = np.arange(ssp.n)
    for _ in range(max_iter):
        p_pi = inner[idx, acts]
        t_state = np.linalg.solve(np.eye(ssp.n) - p_pi, np.ones(ssp.n))
        t = 1.0 + inner @ t_state
        best = t.max(axis=1)
        improve = best > t[idx, acts] * (1 + 1e-12) + 1e-12
        if not improve.any():
            return t
        acts = np.where(improve, np.argmax(t, axis=1), acts)
    raise InternalConsistencyError("stage-count policy iteration did not settle")


def check_all_proper(ssp: SspMdp) -> ProperCertificate | ImproperWitness:
    """Certificate that every stationary policy terminates, or a trapping witness."""
    trap = _trap_set(ssp)
    if trap.any():
        support = ssp.transition > 0
        stays = ~support[:, :, ssp.n] & ~np.any(support[:, :, : ssp.n] & ~trap[None, None, :], axis=2)
        actions = np.where(trap, np.argmax(stays, axis=1), 0)
        members = tuple(int(s) for s in np.flatnonzero(trap))
        return ImproperWitness(members[0], actions, members)
    t = _max_stages(ssp)
    resid = np.max(np.abs(t - (1.0 + ssp.inner @ t.max(axis=1))))
    if not resid <= FIXED_POINT_TOL * max(1.0, t.max()):
        raise InternalConsistencyError(f"stage-count fixed point residual {resid:.3e}")
    return ProperCertificate(t)


def _contraction_violation(ssp: SspMdp, xi, kappa, pairs: int, seed: int):
    rng = np.random.default_rng(seed)
    scale = max(1.0, float(xi.max()))
    for i in range(pairs):
        q1 = rng.uniform(-scale, scale, size=xi.shape)
        q2 = q1 + rng.uniform(-1.0, 1.0, size=xi.shape) * xi * rng.uniform(0.01, 2.0)
        lhs = np.max(np.abs(apply_ssp_bellman_optimality(q1, ssp) - apply_ssp_bellman_optimality(q2, ssp)) / xi)
        rhs = kappa * np.max(np.abs(q1 - q2) / xi)
        if lhs > rhs + CONTRACTION_SLACK:
            return {"pair": i, "q1": q1, "q2": q2, "lhs": lhs, "rhs": rhs}
    return None


def compute_weighted_norm(
    ssp: SspMdp, margin: float = 1.0, pairs: int = CONTRACTION_PAIRS, seed: int = 0
) -> WeightedNorm:
    """xi = T + margin with T the largest expected stage count, certified empirically.

    The margin doubles until ``pairs`` random pairs satisfy the contraction
    inequality, up to 2**10.
    """
    if ssp.certificate is None:
        result = check_all_proper(ssp)
        if isinstance(result, ImproperWitness):
            raise DomainError(f"no weighted norm exists: state {result.state} can be trapped")
        stages = result.stages
    else:
        stages = ssp.certificate.stages
    if not margin > 0:
        raise ConfigError("margin must be positive")
    last = None
    while margin <= MAX_MARGIN:
        xi = stages + margin
        kappa = float(np.max((xi - 1.0) / xi))
        last = _contraction_violation(ssp, xi, kappa, pairs, seed)
        if last is None:
            xi.setflags(write=False)
            return WeightedNorm(xi, kappa, margin)
        margin *= 2
    raise InternalConsistencyError("weighted-norm contraction certificate failed", last)


def apply_ssp_bellman_policy(q, pi, ssp: SspMdp) -> np.ndarray:
    q = check_q(q, ssp.n, ssp.m)
    pi = check_policy(pi, ssp.n, ssp.m)
    return ssp.reward + ssp.inner @ value_of(q, pi)


def apply_ssp_bellman_optimality(q, ssp: SspMdp) -> np.ndarray:
    q = check_q(q, ssp.n, ssp.m)
    return ssp.reward + ssp.inner @ q.max(axis=1)


def apply_ssp_smoothed_bellman_optimality(q, eta: float, nu: Regularizer, ssp: SspMdp) -> np.ndarray:
    q = check_q(q, ssp.n, ssp.m)
    return ssp.reward + ssp.inner @ np.atleast_1d(smoothed_max(nu, q, eta))


def ssp_smoothing_term(pi, nu: Regularizer, ssp: SspMdp) -> np.ndarray:
    """g(pi)(s, a) = sum over non-terminal s' of p(s'|s,a) nu(pi(s'))."""
    pi = check_policy(pi, ssp.n, ssp.m)
    return ssp.inner @ np.atleast_1d(nu_value(nu, pi))


def apply_ssp_smoothed_bellman_policy(q, pi, eta: float, nu: Regularizer, ssp: SspMdp) -> np.ndarray:
    if eta < 0 or not math.isfinite(eta):
        raise DomainError(f"eta must be a finite nonnegative number, got {eta}")
    return apply_ssp_bellman_policy(q, pi, ssp) + eta * ssp_smoothing_term(pi, nu, ssp)


def evaluate_policy_ssp(pi, ssp: SspMdp) -> np.ndarray:
    pi = check_policy(pi, ssp.n, ssp.m)
    p_pi = np.einsum("sa,sat->st", pi, ssp.inner)
    a = np.eye(ssp.n) - p_pi
    if np.linalg.cond(a) > 1e12:
        raise InternalConsistencyError("policy evaluation system is singular: the policy is improper")
    v = np.linalg.solve(a, value_of(ssp.reward, pi))
    q = ssp.reward + ssp.inner @ v
    resid = np.max(np.abs(q - apply_ssp_bellman_policy(q, pi, ssp)))
    if not resid <= FIXED_POINT_TOL:
        raise InternalConsistencyError(f"SSP policy evaluation residual {resid:.3e}")
    return q


def ssp_optimal_q(ssp: SspMdp, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Value iteration stopped in the weighted norm, then exact policy-iteration polish."""
    norm = ssp.weighted_norm
    threshold = tol * (1 - norm.kappa) / (2 * norm.kappa)
    q = np.zeros((ssp.n, ssp.m))
    for _ in range(max_iter):
        nxt = apply_ssp_bellman_optimality(q, ssp)
        diff = norm(nxt - q)
        q = nxt
        if diff <= max(threshold, 8 * np.finfo(float).eps * max(1.0, sup_norm(q))):
            break
    else:
        raise InternalConsistencyError("SSP value iteration did not reach the stopping rule")
    noise = 1e3 * np.finfo(float).eps * max(1.0, sup_norm(q)) / (1 - norm.kappa)
    for _ in range(1000):
        q_pi = evaluate_policy_ssp(greedy(q), ssp)
        if np.max(apply_ssp_bellman_optimality(q_pi, ssp) - q_pi) <= noise:
            return q_pi
        q = q_pi
    raise InternalConsistencyError("SSP policy-iteration polish did not settle")


def _ssp_trace(name, params, ssp, nu_max, tau, q_star, records, beta) -> SolverTrace:
    norm = ssp.weighted_norm
    v_star = q_star.max(axis=1)
    for r in records:
        r.extra["qbar_gap_xi"] = norm(q_star - r.qbar)
    trace = SolverTrace(
        solver=name, params=params, gamma=None, nu_max=nu_max, tau=tau, q_star=q_star, v_star=v_star,
        meta={"n": ssp.n, "m": ssp.m, "kappa": norm.kappa, "xi_margin": norm.margin, "beta": beta},
    )

    def envelope(t):
        return [bounds.ssp_envelope(r.k, norm.kappa, beta, t.gap0, tau, nu_max) for r in t]

    return _finalize(trace, records, envelope)


def run_dspi_ssp(
    ssp: SspMdp, nu: Regularizer | str, tau: float, schedule: StepsizeSchedule, k_max: int, *, q_star=None
) -> SolverTrace:
    nu = Regularizer.from_key(nu)
    k_max = _validate_k_max(k_max)
    q_star = ssp_optimal_q(ssp) if q_star is None else q_star
    records, _ = averaged_loop(
        lambda pi: evaluate_policy_ssp(pi, ssp),
        nu,
        tau,
        schedule.betas(k_max + 1),
        k_max,
        ssp.n,
        ssp.m,
        q_star=q_star,
        v_star=q_star.max(axis=1),
    )
    beta = schedule.beta if schedule.kind == "constant_after_one" else math.nan
    params = {"nu": nu.key, "tau": tau, "schedule": schedule.to_dict(), "k_max": k_max}
    return _ssp_trace("dspi-ssp", params, ssp, nu.max_value(ssp.m), float(tau), q_star, records, beta)


def run_npg_ssp(
    ssp: SspMdp,
    alpha0: float | None = None,
    beta: float = 0.5,
    k_max: int = 100,
    *,
    alphas=None,
    mode: str = "normalized",
    q_star=None,
) -> SolverTrace:
    k_max = _validate_k_max(k_max)
    betas, tau, alpha_list = _npg_schedule(ssp.m, alpha0, beta, alphas, k_max + 1)
    q_star = ssp_optimal_q(ssp) if q_star is None else q_star
    v_star = q_star.max(axis=1)
    evaluate = lambda pi: evaluate_policy_ssp(pi, ssp)  # noqa: E731
    if mode == "normalized":
        records, _ = averaged_loop(
            evaluate, ENTROPY, tau, betas, k_max, ssp.n, ssp.m, q_star=q_star, v_star=v_star
        )
    elif mode == "raw":
        if alpha_list is None:
            alpha_list = geometric_alphas(1.0 / tau, beta, k_max + 1)
        records = _raw_npg_records(evaluate, alpha_list, betas, k_max, ssp.n, ssp.m)
        for r in records:
            r.v_gap = sup_norm(v_star - value_of(r.q_pi, r.policy))
            r.qbar_gap = sup_norm(q_star - r.qbar)
    else:
        raise ConfigError(f"unknown NPG mode {mode!r}; expected normalized or raw")
    env_beta = beta if alphas is None else math.nan
    params = {"alpha0": 1.0 / tau, "beta": beta, "k_max": k_max, "mode": mode}
    return _ssp_trace("npg-ssp", params, ssp, ENTROPY.max_value(ssp.m), tau, q_star, records, env_beta)


def check_ssp_equivalence(ssp: SspMdp, alphas, k_max: int, tol: float = 1e-10) -> EquivalenceReport:
    alphas = [float(a) for a in alphas][: k_max + 1]
    q_star = ssp_optimal_q(ssp)
    raw = run_npg_ssp(ssp, alphas=alphas, k_max=k_max, mode="raw", q_star=q_star)
    avg = run_dspi_ssp(
        ssp, ENTROPY, 1.0 / alphas[0], StepsizeSchedule.custom(beta_from_alpha(alphas)), k_max, q_star=q_star
    )
    return compare_policy_sequences(raw, avg, tol)
