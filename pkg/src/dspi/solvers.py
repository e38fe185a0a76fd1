"""Policy-iteration family: PI, VI, averaged/smoothed PI, NPG, PDA and greedy dual averaging.

Every solver returns a :class:`~dspi.trace.SolverTrace` whose record ``k``
holds pi_k, Q^{pi_k}, the running average before Q^{pi_k} is folded in, the
stepsize beta_k and the smoothing weight eta_k used to produce pi_{k+1}.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import bounds
from .errors import ConfigError, DomainError
from .mdp import (
    TabularMdp,
    apply_bellman_optimality,
    check_policy,
    deterministic_policy,
    evaluate_policy_exact,
    optimal_q,
    sup_norm,
    value_of,
)
from .regularizers import ENTROPY, NEG_SQ_NORM, ZERO, Regularizer, greedy, softmax
from .trace import IterationRecord, SolverTrace

# Below this smoothing weight the regularized step is numerically a point mass.
ETA_FLOOR = 1e-300
REFERENCE_TOL = 1e-12
EQUIVALENCE_TOL = 1e-10
OPTIMALITY_TOL = 1e-9


@dataclass(frozen=True)
class StepsizeSchedule:
    """Averaging weights beta_k in (0, 1].

    ``constant_after_one``: beta_0 = 1 then beta_k = beta.
    ``nonsummable``: beta_k = (k + 1)^-power with power in (0, 1].
    ``custom``: an explicit finite list.
    """

    kind: str
    beta: float = 1.0
    power: float = 1.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "constant_after_one":
            if not 0.0 < self.beta <= 1.0:
                raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        elif self.kind == "nonsummable":
            if not 0.0 < self.power <= 1.0:
                raise ConfigError(f"power must lie in (0, 1], got {self.power}")
        elif self.kind == "custom":
            vals = tuple(float(v) for v in self.values)
            if not vals:
                raise ConfigError("custom schedule needs at least one value")
            bad = [v for v in vals if not 0.0 < v <= 1.0]
            if bad:
                raise ConfigError(f"stepsizes must lie in (0, 1], got {bad[0]}")
            object.__setattr__(self, "values", vals)
        else:
            raise ConfigError(
                f"unknown schedule kind {self.kind!r}; expected constant_after_one, nonsummable or custom"
            )

    @classmethod
    def constant_after_one(cls, beta: float) -> "StepsizeSchedule":
        return cls("constant_after_one", beta=float(beta))

    @classmethod
    def nonsummable(cls, power: float = 1.0) -> "StepsizeSchedule":
        return cls("nonsummable", power=float(power))

    @classmethod
    def custom(cls, values: Sequence[float]) -> "StepsizeSchedule":
        return cls("custom", values=tuple(values))

    def at(self, k: int) -> float:
        if k < 0:
            raise DomainError("iteration index must be nonnegative")
        if self.kind == "constant_after_one":
            return 1.0 if k == 0 else self.beta
        if self.kind == "nonsummable":
            return (k + 1.0) ** -self.power
        if k >= len(self.values):
            raise ConfigError(f"custom schedule has {len(self.values)} values, iteration {k} requested")
        return self.values[k]

    def betas(self, count: int) -> np.ndarray:
        return np.array([self.at(k) for k in range(count)])

    def to_dict(self) -> dict:
        if self.kind == "constant_after_one":
            return {"kind": self.kind, "beta": self.beta}
        if self.kind == "nonsummable":
            return {"kind": self.kind, "power": self.power}
        return {"kind": self.kind, "values": list(self.values)}


@dataclass
class DspiState:
    """Normalized averaged-PI state at iteration k.

    ``eta`` is the weight that produced ``policy`` (eta_{k-1}); at k = 0 it
    holds tau. It is only ever updated by multiplying with (1 - beta).
    """

    qbar: np.ndarray
    eta: float
    policy: np.ndarray
    k: int
    tau: float
    greedy_floor: bool = False

    @classmethod
    def initial(cls, n: int, m: int, nu: Regularizer, tau: float, pi0=None) -> "DspiState":
        if tau < 0 or not math.isfinite(tau):
            raise ConfigError(f"tau must be finite and nonnegative, got {tau}")
        pi = np.tile(nu.max_point(m), (n, 1)) if pi0 is None else check_policy(pi0, n, m).copy()
        return cls(np.zeros((n, m)), float(tau), pi, 0, float(tau))

    def step(self, target, beta: float, nu: Regularizer, tie_break: str = "lowest") -> "DspiState":
        """Fold ``target`` in with weight beta_k and take the regularized greedy step."""
        if not 0.0 < beta <= 1.0:
            raise ConfigError(f"stepsize must lie in (0, 1], got {beta}")
        qbar = (1.0 - beta) * self.qbar + beta * target
        eta = self.eta if self.k == 0 else self.eta * (1.0 - beta)
        floor = 0.0 < eta < ETA_FLOOR
        pi = nu.argmax(qbar, 0.0 if floor else eta, tie_break)
        return DspiState(qbar, eta, pi, self.k + 1, self.tau, floor)


@dataclass
class NpgState:
    """Raw dual accumulator theta_k = sum_{i<k} alpha_i Q^{pi_i}."""

    theta: np.ndarray
    policy: np.ndarray
    alphas: list = field(default_factory=list)

    @classmethod
    def initial(cls, n: int, m: int) -> "NpgState":
        return cls(np.zeros((n, m)), np.full((n, m), 1.0 / m), [])

    def step(self, q, alpha: float) -> "NpgState":
        if not alpha > 0:
            raise DomainError(f"alpha must be positive, got {alpha}")
        with np.errstate(over="ignore", invalid="ignore"):
            theta = self.theta + alpha * q
        if not np.all(np.isfinite(theta)):
            raise DomainError("raw accumulator overflowed; use the normalized mode")
        return NpgState(theta, softmax(theta), self.alphas + [float(alpha)])


def beta_from_alpha(alphas) -> list[float]:
    """beta_k = alpha_k / sum_{i<=k} alpha_i."""
    alphas = [float(a) for a in alphas]
    if any(not a > 0 for a in alphas):
        raise DomainError("all alphas must be positive")
    out, total = [], 0.0
    for a in alphas:
        total += a
        out.append(a / total)
    if out:
        out[0] = 1.0
    return out


def alpha_from_beta(betas, alpha0: float) -> list[float]:
    """Inverse of :func:`beta_from_alpha` anchored at alpha_0."""
    betas = [float(b) for b in betas]
    if not alpha0 > 0:
        raise DomainError("alpha0 must be positive")
    if not betas or betas[0] != 1.0:
        raise DomainError("the first stepsize must equal 1")
    out, total = [float(alpha0)], float(alpha0)
    for b in betas[1:]:
        if not 0.0 < b < 1.0:
            raise DomainError(f"stepsizes after the first must lie in (0, 1), got {b}")
        a = b * total / (1.0 - b)
        out.append(a)
        total += a
    return out


def geometric_alphas(alpha0: float, beta: float, count: int) -> list[float]:
    """alpha_k = beta alpha_0 / (1 - beta)^k for k >= 1."""
    return [float(alpha0)] + [beta * alpha0 / (1.0 - beta) ** k for k in range(1, count)]


def _validate_k_max(k_max):
    if int(k_max) != k_max or k_max < 0:
        raise ConfigError(f"k_max must be a nonnegative integer, got {k_max}")
    return int(k_max)


def _reference(mdp: TabularMdp, q_star=None):
    if q_star is None:
        q_star = optimal_q(mdp, tol=REFERENCE_TOL).q
    return q_star, q_star.max(axis=1)


def _new_trace(solver, params, mdp, nu_max, tau, q_star, v_star) -> SolverTrace:
    return SolverTrace(
        solver=solver,
        params=params,
        gamma=mdp.gamma,
        nu_max=nu_max,
        tau=tau,
        q_star=q_star,
        v_star=v_star,
        meta={"n": mdp.n, "m": mdp.m},
    )


def averaged_loop(
    evaluate: Callable,
    nu: Regularizer,
    tau: float,
    betas,
    k_max: int,
    n: int,
    m: int,
    *,
    pi0=None,
    fit: Callable | None = None,
    tie_break: str = "lowest",
    q_star=None,
    v_star=None,
    stop: Callable | None = None,
) -> tuple[list[IterationRecord], DspiState]:
    """Shared averaged-PI loop for the tabular, approximate and shortest-path settings.

    ``fit(q_pi, pi)`` returns ``(target, eps)``; without it the exact Q^{pi_k}
    is averaged. ``stop(record)`` may end the run after a record is stored.
    """
    state = DspiState.initial(n, m, nu, tau, pi0)
    records = []
    for k in range(k_max + 1):
        t0 = time.perf_counter()
        q_pi = evaluate(state.policy)
        if fit is None:
            target, eps = q_pi, 0.0
        else:
            target, eps = fit(q_pi, state.policy)
        beta = float(betas[k])
        eta_k = state.eta if k == 0 else state.eta * (1.0 - beta)
        rec = IterationRecord(
            k=k,
            policy=state.policy,
            q_pi=q_pi,
            qbar=state.qbar,
            beta=beta,
            eta=eta_k,
            target=None if fit is None else target,
            eps=eps,
            greedy_floor=state.greedy_floor,
        )
        if q_star is not None:
            rec.v_gap = sup_norm(v_star - value_of(q_pi, state.policy))
            rec.qbar_gap = sup_norm(q_star - state.qbar)
        records.append(rec)
        if k < k_max and not (stop is not None and stop(rec)):
            state = state.step(target, beta, nu, tie_break)
        rec.wallclock = time.perf_counter() - t0
        if state.k == k:
            break
    return records, state


def _finalize(trace: SolverTrace, records, envelope) -> SolverTrace:
    trace.records = records
    trace.gap0 = records[0].v_gap
    env = envelope(trace)
    for r, e in zip(records, env):
        r.envelope = float(e)
    floors = [r.k for r in records if r.greedy_floor]
    if floors:
        trace.notes.append(f"smoothing weight fell below {ETA_FLOOR:g}; greedy step used from k={floors[0]}")
    return trace


def general_envelope(trace: SolverTrace) -> np.ndarray:
    betas = [r.beta for r in trace.records]
    return bounds.dspi_envelope_general(betas, trace.gamma, trace.gap0, trace.tau, trace.nu_max)


def run_dspi(
    mdp: TabularMdp,
    nu: Regularizer | str,
    tau: float,
    schedule: StepsizeSchedule,
    k_max: int,
    *,
    pi0=None,
    tie_break: str = "lowest",
    q_star=None,
    solver_name: str = "dspi",
) -> SolverTrace:
    nu = Regularizer.from_key(nu)
    k_max = _validate_k_max(k_max)
    betas = schedule.betas(k_max + 1)
    q_star, v_star = _reference(mdp, q_star)
    records, _ = averaged_loop(
        lambda pi: evaluate_policy_exact(pi, mdp),
        nu,
        tau,
        betas,
        k_max,
        mdp.n,
        mdp.m,
        pi0=pi0,
        tie_break=tie_break,
        q_star=q_star,
        v_star=v_star,
    )
    params = {"nu": nu.key, "tau": tau, "schedule": schedule.to_dict(), "k_max": k_max, "tie_break": tie_break}
    trace = _new_trace(solver_name, params, mdp, nu.max_value(mdp.m), float(tau), q_star, v_star)
    return _finalize(trace, records, general_envelope)


def run_pda(mdp: TabularMdp, tau: float, beta: float, k_max: int, **kw) -> SolverTrace:
    """Policy dual averaging: the averaged loop with the shifted negative squared norm."""
    return run_dspi(
        mdp, NEG_SQ_NORM, tau, StepsizeSchedule.constant_after_one(beta), k_max, solver_name="pda", **kw
    )


def run_pi(mdp: TabularMdp, k_max: int, *, pi0=None, tie_break: str = "lowest", q_star=None) -> SolverTrace:
    """Exact policy iteration; stops once the greedy policy repeats."""
    k_max = _validate_k_max(k_max)
    if k_max < 1:
        raise ConfigError("policy iteration needs k_max >= 1")
    q_star, v_star = _reference(mdp, q_star)
    pi = np.full((mdp.n, mdp.m), 1.0 / mdp.m) if pi0 is None else check_policy(pi0, mdp.n, mdp.m)
    records = []
    for k in range(k_max + 1):
        t0 = time.perf_counter()
        q_pi = evaluate_policy_exact(pi, mdp)
        rec = IterationRecord(k=k, policy=pi, q_pi=q_pi, qbar=q_pi, beta=1.0, eta=0.0)
        rec.v_gap = sup_norm(v_star - value_of(q_pi, pi))
        rec.qbar_gap = sup_norm(q_star - q_pi)
        records.append(rec)
        nxt = greedy(q_pi, tie_break)
        rec.wallclock = time.perf_counter() - t0
        if np.array_equal(nxt, pi):
            rec.extra["stable"] = True
            break
        pi = nxt
    trace = _new_trace("pi", {"k_max": k_max, "tie_break": tie_break}, mdp, 0.0, 0.0, q_star, v_star)
    trace = _finalize(trace, records, lambda t: [bounds.pi_envelope(r.k, t.gamma, t.gap0) for r in t])
    trace.meta["stable_policy"] = bool(records[-1].extra.get("stable", False))
    return trace


def run_vi(mdp: TabularMdp, k_max: int, *, q_star=None) -> SolverTrace:
    """Value iteration from Q = 0; pi_k is greedy with respect to the k-th iterate."""
    k_max = _validate_k_max(k_max)
    q_star, v_star = _reference(mdp, q_star)
    q = np.zeros((mdp.n, mdp.m))
    records = []
    for k in range(k_max + 1):
        t0 = time.perf_counter()
        pi = greedy(q)
        q_pi = evaluate_policy_exact(pi, mdp)
        rec = IterationRecord(k=k, policy=pi, q_pi=q_pi, qbar=q, beta=1.0, eta=0.0)
        rec.v_gap = sup_norm(v_star - value_of(q_pi, pi))
        rec.qbar_gap = sup_norm(q_star - q)
        records.append(rec)
        q = apply_bellman_optimality(q, mdp)
        rec.wallclock = time.perf_counter() - t0
    trace = _new_trace("vi", {"k_max": k_max}, mdp, 0.0, 0.0, q_star, v_star)
    qn = sup_norm(q_star)
    return _finalize(trace, records, lambda t: [bounds.vi_envelope(r.k, t.gamma, qn) for r in t])


def _npg_schedule(m, alpha0, beta, alphas, count):
    """(betas, tau, alphas-or-None) for NPG in normalized form."""
    if alphas is not None:
        alphas = [float(a) for a in alphas]
        if len(alphas) < count:
            raise ConfigError(f"need {count} alphas, got {len(alphas)}")
        alphas = alphas[:count]
        return beta_from_alpha(alphas), 1.0 / alphas[0], alphas
    if alpha0 is None:
        alpha0 = math.log(m) if m > 1 else 1.0
    if not alpha0 > 0:
        raise ConfigError(f"alpha0 must be positive, got {alpha0}")
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    # geometric alphas give beta_k = beta exactly; never form the alphas themselves
    return [1.0] + [beta] * (count - 1), 1.0 / alpha0, None


def run_npg(
    mdp: TabularMdp,
    alpha0: float | None = None,
    beta: float = 0.5,
    k_max: int = 100,
    *,
    alphas=None,
    mode: str = "normalized",
    q_star=None,
) -> SolverTrace:
    """Natural policy gradient with softmax policies.

    By default alpha_k = beta alpha_0 / (1 - beta)^k with alpha_0 = log m. An
    explicit ``alphas`` list overrides the geometric schedule. ``mode="raw"``
    accumulates theta directly and is only safe for moderate k.
    """
    k_max = _validate_k_max(k_max)
    betas, tau, alpha_list = _npg_schedule(mdp.m, alpha0, beta, alphas, k_max + 1)
    q_star, v_star = _reference(mdp, q_star)
    params = {"alpha0": 1.0 / tau, "beta": beta, "k_max": k_max, "mode": mode}
    if alpha_list is not None:
        params["alphas"] = alpha_list
    if mode == "normalized":
        records, _ = averaged_loop(
            lambda pi: evaluate_policy_exact(pi, mdp),
            ENTROPY,
            tau,
            betas,
            k_max,
            mdp.n,
            mdp.m,
            q_star=q_star,
            v_star=v_star,
        )
    elif mode == "raw":
        if alpha_list is None:
            alpha_list = geometric_alphas(1.0 / tau, beta, k_max + 1)
        records = _raw_npg_records(lambda pi: evaluate_policy_exact(pi, mdp), alpha_list, betas, k_max, mdp.n, mdp.m)
        for r in records:
            r.v_gap = sup_norm(v_star - value_of(r.q_pi, r.policy))
            r.qbar_gap = sup_norm(q_star - r.qbar)
    else:
        raise ConfigError(f"unknown NPG mode {mode!r}; expected normalized or raw")
    trace = _new_trace("npg", params, mdp, ENTROPY.max_value(mdp.m), tau, q_star, v_star)
    return _finalize(trace, records, general_envelope)


def _raw_npg_records(evaluate, alphas, betas, k_max, n, m) -> list[IterationRecord]:
    state = NpgState.initial(n, m)
    records = []
    total = 0.0
    for k in range(k_max + 1):
        t0 = time.perf_counter()
        q_pi = evaluate(state.policy)
        qbar = state.theta / total if total > 0 else np.zeros((n, m))
        rec = IterationRecord(k=k, policy=state.policy, q_pi=q_pi, qbar=qbar, beta=betas[k], eta=math.nan)
        rec.extra["theta"] = state.theta
        records.append(rec)
        if k < k_max:
            state = state.step(q_pi, alphas[k])
            total += alphas[k]
            rec.eta = 1.0 / total
        rec.wallclock = time.perf_counter() - t0
    return records


class EquivalenceReport(NamedTuple):
    max_deviation: float
    deviations: list
    tol: float
    passed: bool


def compare_policy_sequences(a: SolverTrace, b: SolverTrace, tol: float = EQUIVALENCE_TOL) -> EquivalenceReport:
    if len(a) != len(b):
        return EquivalenceReport(math.inf, [], tol, False)
    devs = [float(np.max(np.abs(x.policy - y.policy))) for x, y in zip(a, b)]
    worst = max(devs) if devs else 0.0
    return EquivalenceReport(worst, devs, tol, worst <= tol)


def check_npg_dspi_equivalence(mdp: TabularMdp, alphas, k_max: int, tol: float = EQUIVALENCE_TOL) -> EquivalenceReport:
    """Run raw-accumulator NPG and entropic averaged PI side by side and compare policies."""
    k_max = _validate_k_max(k_max)
    alphas = [float(a) for a in alphas][: k_max + 1]
    if len(alphas) < k_max + 1:
        raise ConfigError(f"need {k_max + 1} alphas, got {len(alphas)}")
    q_star = optimal_q(mdp, tol=REFERENCE_TOL).q
    npg = run_npg(mdp, alphas=alphas, k_max=k_max, mode="raw", q_star=q_star)
    dspi = run_dspi(
        mdp, ENTROPY, 1.0 / alphas[0], StepsizeSchedule.custom(beta_from_alpha(alphas)), k_max, q_star=q_star
    )
    return compare_policy_sequences(npg, dspi, tol)


@dataclass
class TerminationReport:
    first_optimal_k: int | None
    budget: int
    phase_length: int
    optimal_policy: np.ndarray
    within_budget: bool
    value_optimal_k: int | None = None


def is_canonical_optimal(pi, q_pi, q_star, tol: float = OPTIMALITY_TOL) -> bool:
    """Value-optimal and identical to the lowest-index greedy policy of Q*."""
    return sup_norm(q_pi - q_star) <= tol and np.array_equal(pi, greedy(q_star))


def run_dual_averaged_pi(
    mdp: TabularMdp,
    beta: float,
    k_max: int | None = None,
    *,
    pi0=None,
    tie_break: str = "lowest",
    q_star=None,
    stop_at_optimal: bool = True,
) -> tuple[SolverTrace, TerminationReport]:
    """Greedy steps on the running average of past Q-functions (no smoothing).

    Starts from the deterministic policy choosing action 0 unless ``pi0`` is
    given. ``k_max`` defaults to the finite-termination budget.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    budget = bounds.dpi_budget(mdp.n, mdp.m, beta, mdp.gamma)
    k_max = budget if k_max is None else _validate_k_max(k_max)
    if pi0 is None:
        pi0 = deterministic_policy(np.zeros(mdp.n, dtype=int), mdp.m)
    q_star, v_star = _reference(mdp, q_star)
    canonical = greedy(q_star)
    stop = (lambda r: is_canonical_optimal(r.policy, r.q_pi, q_star)) if stop_at_optimal else None
    records, _ = averaged_loop(
        lambda pi: evaluate_policy_exact(pi, mdp),
        ZERO,
        0.0,
        StepsizeSchedule.constant_after_one(beta).betas(k_max + 1),
        k_max,
        mdp.n,
        mdp.m,
        pi0=pi0,
        tie_break=tie_break,
        q_star=q_star,
        v_star=v_star,
        stop=stop,
    )
    params = {"beta": beta, "k_max": k_max, "tie_break": tie_break}
    trace = _finalize(_new_trace("dpi", params, mdp, 0.0, 0.0, q_star, v_star), records, general_envelope)
    first = next((r.k for r in records if is_canonical_optimal(r.policy, r.q_pi, q_star)), None)
    value_first = next((r.k for r in records if sup_norm(r.q_pi - q_star) <= OPTIMALITY_TOL), None)
    report = TerminationReport(
        first_optimal_k=first,
        budget=budget,
        phase_length=bounds.dpi_phase_length(beta, mdp.gamma),
        optimal_policy=canonical,
        within_budget=first is not None and first <= budget,
        value_optimal_k=value_first,
    )
    trace.meta["termination"] = {
        "first_optimal_k": first,
        "value_optimal_k": value_first,
        "budget": budget,
    }
    return trace, report


def first_k_below(trace: SolverTrace, eps: float) -> int | None:
    return next((r.k for r in trace if r.v_gap <= eps), None)
