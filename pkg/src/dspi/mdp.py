"""Finite discounted MDPs and their (smoothed) Bellman operators.

Q-functions are ``(n, m)`` arrays, value functions ``(n,)`` arrays and
policies ``(n, m)`` row-stochastic arrays. Flattening is row-major, so the
index of ``(s, a)`` in the mn-vector is ``s * m + a``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InternalConsistencyError, ShapeError
from .regularizers import Regularizer, greedy, nu_value, smoothed_max

# Arithmetic slack for operator inequalities and fixed-point residual tolerance.
ARITH_SLACK = 1e-12
FIXED_POINT_TOL = 1e-10
ROW_SUM_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with transition tensor ``p[s, a, s']``, rewards in [0, 1] and discount gamma."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "gamma", float(self.gamma))
        self.validate()

    @property
    def n(self) -> int:
        return self.reward.shape[0]

    @property
    def m(self) -> int:
        return self.reward.shape[1]

    def validate(self) -> None:
        p, r = self.transition, self.reward
        if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
            raise ShapeError(f"reward must be a nonempty (n, m) matrix, got shape {r.shape}")
        n, m = r.shape
        if p.shape != (n, m, n):
            raise ShapeError(f"transition must have shape {(n, m, n)}, got {p.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
            raise DomainError("transition and reward must be finite")
        if np.any(p < 0):
            raise DomainError("transition probabilities must be nonnegative")
        worst = np.max(np.abs(p.sum(axis=2) - 1.0))
        if worst > ROW_SUM_TOL:
            raise DomainError(f"transition rows must sum to 1 (max deviation {worst:.3e})")
        if np.any(r < 0) or np.any(r > 1):
            raise DomainError("rewards must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise DomainError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return (
            self.gamma == other.gamma
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "gamma": self.gamma,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        try:
            mdp = cls(doc["transition"], doc["reward"], doc["gamma"])
        except KeyError as exc:
            raise DomainError(f"MDP document is missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise ShapeError(f"malformed MDP document: {exc}") from None
        if (doc.get("n", mdp.n), doc.get("m", mdp.m)) != (mdp.n, mdp.m):
            raise ShapeError("declared n/m do not match the reward matrix")
        return mdp


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


def load_mdp(path) -> TabularMdp:
    return TabularMdp.from_dict(json.loads(Path(path).read_text()))


class OptimalSolution(NamedTuple):
    q: np.ndarray
    policy: np.ndarray
    iterations: int


def check_q(q, n: int, m: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (n, m):
        raise ShapeError(f"Q-function must have shape {(n, m)}, got {q.shape}")
    return q


def check_policy(pi, n: int, m: int, tol: float = ROW_SUM_TOL) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (n, m):
        raise ShapeError(f"policy must have shape {(n, m)}, got {pi.shape}")
    if np.any(pi < -tol) or np.any(np.abs(pi.sum(axis=1) - 1.0) > tol * max(1, m)):
        raise DomainError("policy rows must be probability distributions")
    return pi


def uniform_policy(n: int, m: int) -> np.ndarray:
    return np.full((n, m), 1.0 / m)


def deterministic_policy(actions, m: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((actions.size, m))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


def value_of(q, pi) -> np.ndarray:
    """V(s) = sum_a pi(a|s) Q(s, a)."""
    q = np.asarray(q, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if q.shape != pi.shape or q.ndim != 2:
        raise ShapeError(f"Q {q.shape} and policy {pi.shape} must be matching (n, m) arrays")
    return np.einsum("sa,sa->s", pi, q)


def _expect_next(mdp: TabularMdp, v) -> np.ndarray:
    # sum_{s'} p(s'|s,a) v(s')
    return mdp.transition @ v


def apply_bellman_policy(q, pi, mdp: TabularMdp) -> np.ndarray:
    q = check_q(q, mdp.n, mdp.m)
    pi = check_policy(pi, mdp.n, mdp.m)
    return mdp.reward + mdp.gamma * _expect_next(mdp, value_of(q, pi))


def apply_bellman_optimality(q, mdp: TabularMdp) -> np.ndarray:
    q = check_q(q, mdp.n, mdp.m)
    return mdp.reward + mdp.gamma * _expect_next(mdp, q.max(axis=1))


def _check_eta(eta):
    if eta < 0 or not np.isfinite(eta):
        raise DomainError(f"eta must be a finite nonnegative number, got {eta}")


def apply_smoothed_bellman_optimality(q, eta: float, nu: Regularizer, mdp: TabularMdp) -> np.ndarray:
    _check_eta(eta)
    q = check_q(q, mdp.n, mdp.m)
    return mdp.reward + mdp.gamma * _expect_next(mdp, smoothed_max(nu, q, eta))


def smoothing_term(pi, nu: Regularizer, mdp: TabularMdp) -> np.ndarray:
    """f(pi)(s, a) = gamma * sum_{s'} p(s'|s,a) nu(pi(s'))."""
    pi = check_policy(pi, mdp.n, mdp.m)
    return mdp.gamma * _expect_next(mdp, np.atleast_1d(nu_value(nu, pi)))


def apply_smoothed_bellman_policy(q, pi, eta: float, nu: Regularizer, mdp: TabularMdp) -> np.ndarray:
    _check_eta(eta)
    return apply_bellman_policy(q, pi, mdp) + eta * smoothing_term(pi, nu, mdp)


def policy_transition(pi, mdp: TabularMdp) -> np.ndarray:
    """State-to-state kernel P_pi(s, s') = sum_a pi(a|s) p(s'|s,a)."""
    return np.einsum("sa,sat->st", pi, mdp.transition)


def evaluate_policy_exact(pi, mdp: TabularMdp) -> np.ndarray:
    """Q^pi by a dense direct solve.

    The n x n system (I - gamma P_pi) V = r_pi is solved and lifted to
    Q = R + gamma P V; this is the same fixed point as the mn x mn system and
    keeps duplicated (s, a) rows bitwise identical.
    """
    pi = check_policy(pi, mdp.n, mdp.m)
    p_pi = policy_transition(pi, mdp)
    r_pi = value_of(mdp.reward, pi)
    try:
        v = np.linalg.solve(np.eye(mdp.n) - mdp.gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise InternalConsistencyError(f"policy evaluation solve failed: {exc}") from exc
    q = mdp.reward + mdp.gamma * _expect_next(mdp, v)
    resid = np.max(np.abs(q - apply_bellman_policy(q, pi, mdp)))
    if not resid <= FIXED_POINT_TOL:
        raise InternalConsistencyError(f"policy evaluation residual {resid:.3e} exceeds tolerance")
    return q


def optimal_q(
    mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000, polish: bool = True
) -> OptimalSolution:
    """Q* by value iteration with the a-posteriori stopping rule.

    Stops once ||Q_{t+1} - Q_t|| <= tol (1 - gamma) / (2 gamma), which
    guarantees ||Q_{t+1} - Q*|| <= tol. Requests below floating resolution stop
    at the rounding floor instead. With ``polish`` the greedy policy is then
    refined by exact policy iteration, so the returned Q is a solved fixed
    point rather than an iterate. The policy is greedy with lowest-index ties.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    g = mdp.gamma
    threshold = tol * (1 - g) / (2 * g)
    q = np.zeros((mdp.n, mdp.m))
    for it in range(1, max_iter + 1):
        nxt = mdp.reward + g * _expect_next(mdp, q.max(axis=1))
        diff = np.max(np.abs(nxt - q))
        q = nxt
        if diff <= max(threshold, 8 * np.finfo(float).eps * max(1.0, np.max(np.abs(q)))):
            break
    else:
        raise InternalConsistencyError("value iteration did not reach the stopping rule")
    if polish:
        q = _polish(q, mdp)
    return OptimalSolution(q, greedy(q), it)


def _polish(q, mdp: TabularMdp, max_iter: int = 1000) -> np.ndarray:
    noise = 1e3 * np.finfo(float).eps / (1 - mdp.gamma)
    for _ in range(max_iter):
        q_pi = evaluate_policy_exact(greedy(q), mdp)
        if np.max(apply_bellman_optimality(q_pi, mdp) - q_pi) <= noise:
            return q_pi
        q = q_pi
    raise InternalConsistencyError("policy-iteration polish did not settle")


def sup_norm(x) -> float:
    return float(np.max(np.abs(x)))
