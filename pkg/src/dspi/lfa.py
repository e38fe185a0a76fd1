"""Averaged policy iteration with linear Q-function approximation.

Each iteration fits Q^{pi_k} by weighted least squares over the span of a
fixed feature matrix, with weights given by the discounted state visitation
of pi_k times pi_k itself, and averages the fitted tables instead of the exact
ones.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .mdp import TabularMdp, check_policy, evaluate_policy_exact, optimal_q, policy_transition, sup_norm, value_of
from .regularizers import ENTROPY, Regularizer, check_distribution, softmax
from .solvers import (
    REFERENCE_TOL,
    EquivalenceReport,
    StepsizeSchedule,
    _finalize,
    _new_trace,
    _npg_schedule,
    _validate_k_max,
    averaged_loop,
    beta_from_alpha,
    compare_policy_sequences,
    general_envelope,
    geometric_alphas,
)
from .trace import IterationRecord, SolverTrace

GRAM_RANK_TOL = 1e-8
PINV_RCOND = 1e-10
VISITATION_SUM_TOL = 1e-10
WEIGHT_FLOOR = 1e-250


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix with one row per (s, a), flattened as s * m + a."""

    phi: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[0] != self.n * self.m:
            raise ShapeError(f"phi must have {self.n * self.m} rows, got shape {phi.shape}")
        if phi.shape[1] < 1 or phi.shape[1] > phi.shape[0]:
            raise ShapeError(f"feature dimension must lie in [1, nm], got {phi.shape[1]}")
        if not np.all(np.isfinite(phi)):
            raise DomainError("features must be finite")
        rank = np.linalg.matrix_rank(phi.T @ phi, tol=GRAM_RANK_TOL)
        if rank < phi.shape[1]:
            raise DomainError(f"feature columns are linearly dependent (Gram rank {rank} < d={phi.shape[1]})")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def table(self, w) -> np.ndarray:
        """Phi w as an (n, m) table."""
        return (self.phi @ np.asarray(w, dtype=float)).reshape(self.n, self.m)

    def to_dict(self) -> dict:
        return {"d": self.d, "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, doc: dict, n: int, m: int) -> "FeatureMap":
        try:
            phi = np.asarray(doc["phi"], dtype=float)
        except KeyError:
            raise DomainError("feature document is missing 'phi'") from None
        if "d" in doc and phi.ndim == 2 and phi.shape[1] != doc["d"]:
            raise ShapeError(f"declared d={doc['d']} but phi has {phi.shape[1]} columns")
        return cls(phi, n, m)


def load_features(path, n: int, m: int) -> FeatureMap:
    return FeatureMap.from_dict(json.loads(Path(path).read_text()), n, m)


def identity_features(n: int, m: int) -> FeatureMap:
    return FeatureMap(np.eye(n * m), n, m)


def gaussian_features(n: int, m: int, d: int, seed: int = 0) -> FeatureMap:
    """d orthonormal columns from the QR factor of a Gaussian matrix."""
    if not 1 <= d <= n * m:
        raise ConfigError(f"d must lie in [1, {n * m}], got {d}")
    g = np.random.default_rng(seed).standard_normal((n * m, d))
    q, _ = np.linalg.qr(g)
    return FeatureMap(q, n, m)


def tile_features(n: int, m: int, group: int) -> FeatureMap:
    """Indicator of (state tile, action), with consecutive states grouped ``group`` at a time."""
    if group < 1:
        raise ConfigError("tile size must be positive")
    tiles = math.ceil(n / group)
    phi = np.zeros((n * m, tiles * m))
    for s in range(n):
        for a in range(m):
            phi[s * m + a, (s // group) * m + a] = 1.0
    return FeatureMap(phi, n, m)


def constant_features(n: int, m: int) -> FeatureMap:
    return FeatureMap(np.ones((n * m, 1)), n, m)


@dataclass(frozen=True)
class InitialDistribution:
    rho: np.ndarray

    def __post_init__(self):
        rho = check_distribution(np.asarray(self.rho, dtype=float))
        if rho.ndim != 1:
            raise ShapeError("initial distribution must be a vector")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def uniform(cls, n: int) -> "InitialDistribution":
        return cls(np.full(n, 1.0 / n))


def _rho_vector(rho, n: int) -> np.ndarray:
    if rho is None:
        return np.full(n, 1.0 / n)
    vec = rho.rho if isinstance(rho, InitialDistribution) else InitialDistribution(rho).rho
    if vec.shape != (n,):
        raise ShapeError(f"initial distribution must have length {n}")
    return vec


def discounted_visitation(mdp: TabularMdp, pi, rho=None) -> np.ndarray:
    """(1 - gamma) rho^T (I - gamma P_pi)^-1 by a direct solve."""
    pi = check_policy(pi, mdp.n, mdp.m)
    r = _rho_vector(rho, mdp.n)
    a = np.eye(mdp.n) - mdp.gamma * policy_transition(pi, mdp)
    d = (1 - mdp.gamma) * np.linalg.solve(a.T, r)
    if abs(d.sum() - 1.0) > VISITATION_SUM_TOL:
        raise DomainError(f"visitation distribution sums to {d.sum()!r}")
    return np.clip(d, 0.0, None)


def fit_linear_q(q, features: FeatureMap, state_dist, pi) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least-squares projection of q onto span(phi).

    Solves phi^T D phi w = phi^T D q with D = diag(d(s) pi(a|s)) through an
    SVD of the column-equilibrated matrix sqrt(D) phi, dropping directions
    whose Gram eigenvalue is below 1e-10 of the largest. Tiny but positive
    weights are therefore still fitted exactly. Directions the
    weights leave undetermined (e.g. actions whose probability underflowed to
    zero) are set by an unweighted least-squares fit to q, which leaves the
    weighted objective unchanged.
    """
    q = np.asarray(q, dtype=float)
    n, m = features.n, features.m
    if q.shape != (n, m):
        raise ShapeError(f"Q-function must have shape {(n, m)}, got {q.shape}")
    pi = check_policy(pi, n, m)
    mu = (np.asarray(state_dist, dtype=float)[:, None] * pi).ravel()
    # weights this small would only enter through subnormal arithmetic
    mu = np.where(mu > WEIGHT_FLOOR * mu.max(), mu, 0.0)
    phi = features.phi
    sq = np.sqrt(mu)
    a = sq[:, None] * phi
    norms = np.linalg.norm(a, axis=0)
    live = norms > 0
    w = np.zeros(features.d)
    null = np.eye(features.d)[:, ~live]
    if np.any(live):
        u, s, vt = np.linalg.svd(a[:, live] / norms[live], full_matrices=False)
        # cutoff on Gram eigenvalues, i.e. squared singular values
        keep = s**2 > PINV_RCOND * s[0] ** 2
        y = vt[keep].T @ ((u[:, keep].T @ (sq * q.ravel())) / s[keep])
        w[live] = y / norms[live]
        drop = vt[~keep].T / norms[live][:, None]
        if drop.size:
            extra = np.zeros((features.d, drop.shape[1]))
            extra[live] = drop
            null = np.hstack([null, extra])
    if null.shape[1]:
        z, *_ = np.linalg.lstsq(phi @ null, q.ravel() - phi @ w, rcond=None)
        w = w + null @ z
    return w, features.table(w)


def _lfa_fit(mdp, features, rho):
    def fit(q_pi, pi):
        d = discounted_visitation(mdp, pi, rho)
        _, w_full = fit_linear_q(q_pi, features, d, pi)
        return w_full, sup_norm(w_full - q_pi)

    return fit


def _attach_running_eps(records):
    running = 0.0
    for r in records:
        running = max(running, r.eps)
        r.extra["eps_running"] = running
    return running


def _lfa_envelope(beta):
    def envelope(trace: SolverTrace):
        base = general_envelope(trace)
        out = []
        for r, b in zip(trace.records, base):
            if r.k == 0:
                out.append(b)
            else:
                out.append(b + 2 * r.extra["eps_running"] / (beta * (1 - trace.gamma) ** 2))
        return out

    return envelope


def _lfa_trace(name, params, mdp, features, nu_max, tau, q_star, records, beta) -> SolverTrace:
    eps = _attach_running_eps(records)
    trace = _new_trace(name, params, mdp, nu_max, tau, q_star, q_star.max(axis=1))
    trace.meta.update({"d": features.d, "eps_observed": eps, "beta": beta})
    return _finalize(trace, records, _lfa_envelope(beta))


def run_dspi_lfa(
    mdp: TabularMdp,
    features: FeatureMap,
    rho,
    nu: Regularizer | str,
    tau: float,
    schedule: StepsizeSchedule,
    k_max: int,
    *,
    q_star=None,
) -> SolverTrace:
    nu = Regularizer.from_key(nu)
    k_max = _validate_k_max(k_max)
    _check_features(mdp, features)
    q_star = optimal_q(mdp, tol=REFERENCE_TOL).q if q_star is None else q_star
    records, _ = averaged_loop(
        lambda pi: evaluate_policy_exact(pi, mdp),
        nu,
        tau,
        schedule.betas(k_max + 1),
        k_max,
        mdp.n,
        mdp.m,
        fit=_lfa_fit(mdp, features, rho),
        q_star=q_star,
        v_star=q_star.max(axis=1),
    )
    beta = schedule.beta if schedule.kind == "constant_after_one" else math.nan
    params = {"nu": nu.key, "tau": tau, "schedule": schedule.to_dict(), "k_max": k_max}
    return _lfa_trace("dspi-lfa", params, mdp, features, nu.max_value(mdp.m), float(tau), q_star, records, beta)


def _check_features(mdp, features):
    if (features.n, features.m) != (mdp.n, mdp.m):
        raise ShapeError(f"features built for {(features.n, features.m)}, MDP is {(mdp.n, mdp.m)}")


def run_npg_lfa(
    mdp: TabularMdp,
    features: FeatureMap,
    rho=None,
    alpha0: float | None = None,
    beta: float = 0.5,
    k_max: int = 100,
    *,
    alphas=None,
    mode: str = "normalized",
    q_star=None,
) -> SolverTrace:
    """NPG with log-linear policies pi(a|s) proportional to exp(phi_{s,a}^T theta)."""
    k_max = _validate_k_max(k_max)
    _check_features(mdp, features)
    betas, tau, alpha_list = _npg_schedule(mdp.m, alpha0, beta, alphas, k_max + 1)
    q_star = optimal_q(mdp, tol=REFERENCE_TOL).q if q_star is None else q_star
    v_star = q_star.max(axis=1)
    fit = _lfa_fit(mdp, features, rho)
    if mode == "normalized":
        records, _ = averaged_loop(
            lambda pi: evaluate_policy_exact(pi, mdp),
            ENTROPY,
            tau,
            betas,
            k_max,
            mdp.n,
            mdp.m,
            fit=fit,
            q_star=q_star,
            v_star=v_star,
        )
    elif mode == "raw":
        if alpha_list is None:
            alpha_list = geometric_alphas(1.0 / tau, beta, k_max + 1)
        records = _raw_npg_lfa(mdp, features, rho, alpha_list, betas, k_max)
        for r in records:
            r.v_gap = sup_norm(v_star - value_of(r.q_pi, r.policy))
            r.qbar_gap = sup_norm(q_star - r.qbar)
    else:
        raise ConfigError(f"unknown NPG mode {mode!r}; expected normalized or raw")
    # geometric schedule: constant beta after the first step; explicit lists have no single beta
    env_beta = beta if alphas is None else math.nan
    params = {"alpha0": 1.0 / tau, "beta": beta, "k_max": k_max, "mode": mode}
    return _lfa_trace("npg-lfa", params, mdp, features, ENTROPY.max_value(mdp.m), tau, q_star, records, env_beta)


def _raw_npg_lfa(mdp, features, rho, alphas, betas, k_max) -> list[IterationRecord]:
    n, m = mdp.n, mdp.m
    theta = np.zeros(features.d)
    pi = np.full((n, m), 1.0 / m)
    total = 0.0
    records = []
    for k in range(k_max + 1):
        t0 = time.perf_counter()
        q_pi = evaluate_policy_exact(pi, mdp)
        d = discounted_visitation(mdp, pi, rho)
        w, w_full = fit_linear_q(q_pi, features, d, pi)
        wbar = features.table(theta) / total if total > 0 else np.zeros((n, m))
        rec = IterationRecord(
            k=k, policy=pi, q_pi=q_pi, qbar=wbar, beta=betas[k], eta=math.nan, target=w_full,
            eps=sup_norm(w_full - q_pi),
        )
        rec.extra["theta"] = theta
        records.append(rec)
        if k < k_max:
            theta = theta + alphas[k] * w
            if not np.all(np.isfinite(theta)):
                raise DomainError("raw accumulator overflowed; use the normalized mode")
            total += alphas[k]
            rec.eta = 1.0 / total
            pi = softmax(features.table(theta))
        rec.wallclock = time.perf_counter() - t0
    return records


def check_lfa_equivalence(
    mdp: TabularMdp, features: FeatureMap, rho, alphas, k_max: int, tol: float = 1e-10
) -> EquivalenceReport:
    """Raw log-linear NPG against entropic averaged PI on fitted Q-tables."""
    alphas = [float(a) for a in alphas][: k_max + 1]
    q_star = optimal_q(mdp, tol=REFERENCE_TOL).q
    raw = run_npg_lfa(mdp, features, rho, alphas=alphas, k_max=k_max, mode="raw", q_star=q_star)
    avg = run_dspi_lfa(
        mdp, features, rho, ENTROPY, 1.0 / alphas[0], StepsizeSchedule.custom(beta_from_alpha(alphas)), k_max,
        q_star=q_star,
    )
    return compare_policy_sequences(raw, avg, tol)
