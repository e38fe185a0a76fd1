"""Per-iteration inequality checks evaluated on solver traces.

Each check turns a trace (plus the instance it came from) into a
:class:`CheckResult` whose ``max_slack`` is the largest observed
``lhs - rhs``; a check passes when that never exceeds its tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import bounds
from .errors import ConfigError
from .mdp import sup_norm
from .oracles import ENUMERATION_LIMIT, enumerate_deterministic_policies
from .solvers import check_npg_dspi_equivalence, geometric_alphas
from .trace import SolverTrace

ENVELOPE_SLACK = 1e-9
SSP_SLACK = 1e-8
MONOTONE_SLACK = 1e-10
RECURSION_SLACK = 1e-9
EQUIVALENCE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    anchor: str
    passed: bool
    max_slack: float | None
    worst_k: int | None
    detail: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        slack = None if self.max_slack is None or not math.isfinite(self.max_slack) else float(self.max_slack)
        return {
            "name": self.name,
            "anchor": self.anchor,
            "passed": bool(self.passed),
            "max_slack": slack,
            "worst_k": self.worst_k,
            "detail": self.detail,
        }


@dataclass
class CheckContext:
    """Everything a check may need beyond the trace itself.

    ``settings`` keys read by checks: ``envelope_constant_scale`` (multiplies
    the smoothing constant in envelope checks; 1 by default), ``eps``
    (complexity target), ``equivalence_schedule`` (constant | geometric |
    random), ``equivalence_k``, ``seed``, ``features`` and ``rho`` (LFA).
    """

    trace: SolverTrace
    instance: Any = None
    settings: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.settings.get(key, default)


def inequality(name, anchor, rows, tol) -> CheckResult:
    """rows: iterable of (k, lhs, rhs) with scalar lhs, rhs."""
    rows = list(rows)
    if not rows:
        return CheckResult(name, anchor, True, None, None, {"tol": tol, "note": "no iterations to check"})
    slacks = np.array([lhs - rhs for _, lhs, rhs in rows], dtype=float)
    if np.any(np.isnan(slacks)):
        i = int(np.flatnonzero(np.isnan(slacks))[0])
        return CheckResult(name, anchor, False, math.inf, rows[i][0], {"tol": tol, "error": "undefined bound"})
    i = int(np.argmax(slacks))
    k, lhs, rhs = rows[i]
    passed = bool(slacks[i] <= tol)
    detail = {"tol": tol, "lhs": float(lhs), "rhs": float(rhs), "checked": len(rows)}
    if not passed:
        detail["violations"] = [int(r[0]) for r, s in zip(rows, slacks) if s > tol][:20]
    return CheckResult(name, anchor, passed, float(slacks[i]), int(k), detail)


def _componentwise(rows):
    """Collapse (k, A, B) array pairs to (k, max(A - B), 0)."""
    return [(k, float(np.max(a - b)), 0.0) for k, a, b in rows]


def _not_applicable(name, anchor, why) -> CheckResult:
    return CheckResult(name, anchor, False, math.inf, None, {"error": why})


def _scale(ctx):
    return float(ctx.get("envelope_constant_scale", 1.0))


def _constant_beta(trace):
    betas = [r.beta for r in trace.records]
    if not betas or betas[0] != 1.0:
        return None
    rest = set(betas[1:])
    if len(rest) > 1:
        return None
    return rest.pop() if rest else 1.0


# --- tabular -----------------------------------------------------------------


def check_dspi_envelope(ctx: CheckContext, name="thm1.2-envelope") -> CheckResult:
    anchor = "v_gap_k <= prod(1-(1-gamma)beta_j) gamma gap0 + smoothing terms, beta_0 = 1"
    t = ctx.trace
    betas = [r.beta for r in t.records]
    if betas[0] != 1.0:
        return _not_applicable(name, anchor, "requires beta_0 = 1")
    env = bounds.dspi_envelope_general(betas, t.gamma, t.gap0, t.tau * _scale(ctx), t.nu_max)
    rows = [(r.k, r.v_gap, env[r.k]) for r in t.records if r.k >= 1]
    return inequality(name, anchor, rows, ENVELOPE_SLACK)


def check_npg_envelope(ctx: CheckContext, name="thm2-envelope") -> CheckResult:
    anchor = "v_gap_k <= (1-(1-gamma)beta)^(k-1) (gamma gap0 + 1) for alpha_0 = log m"
    t = ctx.trace
    beta = _constant_beta(t)
    if beta is None:
        return _not_applicable(name, anchor, "requires a geometric stepsize schedule")
    if abs(t.tau * t.nu_max - 1.0) > 1e-12:
        return _not_applicable(name, anchor, "requires alpha_0 = log m")
    c = _scale(ctx)
    rows = [
        (r.k, r.v_gap, (1 - (1 - t.gamma) * beta) ** (r.k - 1) * (t.gamma * t.gap0 + c))
        for r in t.records
        if r.k >= 1
    ]
    return inequality(name, anchor, rows, ENVELOPE_SLACK)


def check_pi_rate(ctx: CheckContext, name="thm7-pi-rate") -> CheckResult:
    t = ctx.trace
    rows = [(r.k, r.v_gap, bounds.pi_envelope(r.k, t.gamma, t.gap0)) for r in t.records]
    return inequality(name, "v_gap_k <= gamma^k gap0", rows, ENVELOPE_SLACK)


def check_monotone(ctx: CheckContext, name="lemma1-monotone", tol=MONOTONE_SLACK) -> CheckResult:
    recs = ctx.trace.records
    rows = _componentwise((a.k, a.q_pi, b.q_pi) for a, b in zip(recs, recs[1:]))
    return inequality(name, "Q^{pi_k} <= Q^{pi_{k+1}} componentwise", rows, tol)


def check_recursion(ctx: CheckContext, name="lemma2-recursion") -> CheckResult:
    t = ctx.trace
    recs = t.records
    rows = []
    for k in range(1, len(recs) - 1):
        b = recs[k].beta
        rhs = (1 - (1 - t.gamma) * b) * recs[k].qbar_gap + t.gamma * b * recs[k - 1].eta * t.nu_max
        rows.append((k, recs[k + 1].qbar_gap, rhs))
    anchor = "|Q*-Qbar_{k+1}| <= (1-(1-gamma)beta_k)|Q*-Qbar_k| + gamma beta_k eta_{k-1} nu_max"
    return inequality(name, anchor, rows, RECURSION_SLACK)


def check_qbar_dominance(ctx: CheckContext, name="qbar-dominance") -> CheckResult:
    rows = _componentwise((r.k, r.qbar, r.q_pi) for r in ctx.trace.records)
    return inequality(name, "Qbar_k <= Q^{pi_k} componentwise", rows, MONOTONE_SLACK)


def check_vgap_nonincreasing(ctx: CheckContext, name="v_gap-nonincreasing") -> CheckResult:
    recs = ctx.trace.records
    rows = [(b.k, b.v_gap, a.v_gap) for a, b in zip(recs, recs[1:])]
    return inequality(name, "v_gap_{k+1} <= v_gap_k", rows, MONOTONE_SLACK)


def check_termination(ctx: CheckContext, name="thm3-termination") -> CheckResult:
    anchor = "first optimal iteration <= n(m-1) ceil(log(2/(1-gamma)) / (beta(1-gamma)))"
    t = ctx.trace
    term = t.meta.get("termination")
    if term is None:
        return _not_applicable(name, anchor, "trace has no termination data")
    budget = term["budget"]
    first = term["first_optimal_k"]
    detail = {"budget": budget, "first_optimal_k": first, "value_optimal_k": term.get("value_optimal_k")}
    mdp = ctx.instance
    if mdp is not None and mdp.m**mdp.n <= ENUMERATION_LIMIT:
        ref = enumerate_deterministic_policies(mdp)
        detail["enumeration_gap"] = sup_norm(ref.v_star - t.v_star)
        if detail["enumeration_gap"] > ENVELOPE_SLACK:
            return CheckResult(name, anchor, False, detail["enumeration_gap"], None, detail)
        if first is not None:
            v_first = np.einsum("sa,sa->s", t[first].policy, t[first].q_pi)
            detail["enumeration_first_gap"] = sup_norm(ref.v_star - v_first)
            if detail["enumeration_first_gap"] > ENVELOPE_SLACK:
                return CheckResult(name, anchor, False, detail["enumeration_first_gap"], first, detail)
    if first is None:
        return CheckResult(name, anchor, False, math.inf, t.records[-1].k, detail)
    return CheckResult(name, anchor, first <= budget, float(first - budget), first, detail)


def _equivalence_alphas(ctx, m, count):
    kind = ctx.get("equivalence_schedule", "geometric")
    if kind == "constant":
        return [1.0] * count
    if kind == "geometric":
        return geometric_alphas(math.log(m) if m > 1 else 1.0, float(ctx.get("equivalence_beta", 0.5)), count)
    if kind == "random":
        rng = np.random.default_rng(int(ctx.get("seed", 0)))
        return list(rng.uniform(0.1, 2.0, size=count))
    raise ConfigError(f"unknown equivalence schedule {kind!r}; expected constant, geometric or random")


def check_prop1(ctx: CheckContext, name="prop1-equivalence") -> CheckResult:
    anchor = "raw-accumulator NPG and entropic averaged PI give the same policies"
    mdp = ctx.instance
    k = int(ctx.get("equivalence_k", min(50, ctx.trace.records[-1].k)))
    rep = check_npg_dspi_equivalence(mdp, _equivalence_alphas(ctx, mdp.m, k + 1), k, EQUIVALENCE_TOL)
    worst = int(np.argmax(rep.deviations)) if rep.deviations else None
    return CheckResult(
        name, anchor, rep.passed, rep.max_deviation - rep.tol, worst,
        {"tol": rep.tol, "max_deviation": rep.max_deviation, "schedule": ctx.get("equivalence_schedule", "geometric")},
    )


def check_complexity(ctx: CheckContext, name="cor1-complexity") -> CheckResult:
    anchor = "first k with v_gap <= eps is at most ceil(2/(1-gamma) log(1/(eps(1-gamma))))"
    t = ctx.trace
    eps = float(ctx.get("eps", 1e-3))
    budget = bounds.complexity_budget(t.gamma, eps)
    first = next((r.k for r in t.records if r.v_gap <= eps), None)
    detail = {"eps": eps, "budget": budget, "first_k": first}
    if first is None:
        detail["error"] = "target accuracy not reached within the run"
        return CheckResult(name, anchor, False, math.inf, t.records[-1].k, detail)
    return CheckResult(name, anchor, first <= budget, float(first - budget), first, detail)


# --- linear function approximation -------------------------------------------


def _lfa_beta(t):
    beta = t.meta.get("beta")
    if beta is None or not math.isfinite(beta) or _constant_beta(t) is None:
        return None
    return beta


def _eps_at(r):
    return r.extra["eps_running"]


def check_lfa_envelope(ctx: CheckContext, name="thmC1-envelope", unit_constant=False) -> CheckResult:
    anchor = "v_gap_k <= (1-beta(1-gamma))^(k-1)(gamma gap0 + C) + 2 eps / (beta (1-gamma)^2)"
    t = ctx.trace
    beta = _lfa_beta(t)
    if beta is None:
        return _not_applicable(name, anchor, "requires beta_0 = 1 and constant beta afterwards")
    if unit_constant and abs(t.tau * t.nu_max - 1.0) > 1e-12:
        return _not_applicable(name, anchor, "requires alpha_0 = log m")
    c = (1.0 if unit_constant else t.tau * t.nu_max) * _scale(ctx)
    g = t.gamma
    rows = [
        (
            r.k,
            r.v_gap,
            (1 - beta * (1 - g)) ** (r.k - 1) * (g * t.gap0 + c) + 2 * _eps_at(r) / (beta * (1 - g) ** 2),
        )
        for r in t.records
        if r.k >= 1
    ]
    return inequality(name, anchor, rows, ENVELOPE_SLACK)


def check_lfa_monotone(ctx: CheckContext, name="lemmaC1-almost-monotone") -> CheckResult:
    t = ctx.trace
    g = t.gamma
    recs = t.records
    rows = [
        (a.k, float(np.max(a.q_pi - b.q_pi)), 2 * g * _eps_at(a) / (1 - g)) for a, b in zip(recs, recs[1:])
    ]
    return inequality(name, "Q^{pi_k} <= Q^{pi_{k+1}} + 2 gamma eps / (1-gamma)", rows, RECURSION_SLACK)


def check_wbar_dominance(ctx: CheckContext, name="corC2-wbar-dominance") -> CheckResult:
    t = ctx.trace
    beta = _lfa_beta(t)
    anchor = "Wbar_k <= Q^{pi_k} + delta_k"
    if beta is None:
        return _not_applicable(name, anchor, "requires beta_0 = 1 and constant beta afterwards")
    rows = [
        (r.k, float(np.max(r.qbar - r.q_pi)), bounds.lfa_delta(r.k, t.gamma, beta, _eps_at(r)))
        for r in t.records
        if r.k >= 1
    ]
    return inequality(name, anchor, rows, RECURSION_SLACK)


def check_lfa_recursion(ctx: CheckContext, name="lemmaC3-recursion") -> CheckResult:
    t = ctx.trace
    beta = _lfa_beta(t)
    anchor = "|Q*-Wbar_{k+1}| <= (1-beta(1-gamma))|Q*-Wbar_k| + beta gamma (nu_max eta_{k-1} + delta_k) + beta eps"
    if beta is None:
        return _not_applicable(name, anchor, "requires beta_0 = 1 and constant beta afterwards")
    g = t.gamma
    recs = t.records
    rows = []
    for k in range(1, len(recs) - 1):
        eps = _eps_at(recs[k])
        delta = bounds.lfa_delta(k, g, beta, eps)
        rhs = (1 - beta * (1 - g)) * recs[k].qbar_gap + beta * g * (t.nu_max * recs[k - 1].eta + delta) + beta * eps
        rows.append((k, recs[k + 1].qbar_gap, rhs))
    return inequality(name, anchor, rows, RECURSION_SLACK)


def check_propc1(ctx: CheckContext, name="propC1-equivalence") -> CheckResult:
    from .lfa import check_lfa_equivalence

    anchor = "raw log-linear NPG and averaged PI on fitted tables give the same policies"
    mdp = ctx.instance
    features = ctx.get("features")
    if features is None:
        return _not_applicable(name, anchor, "no feature map supplied")
    k = int(ctx.get("equivalence_k", min(40, ctx.trace.records[-1].k)))
    rep = check_lfa_equivalence(mdp, features, ctx.get("rho"), _equivalence_alphas(ctx, mdp.m, k + 1), k)
    worst = int(np.argmax(rep.deviations)) if rep.deviations else None
    return CheckResult(name, anchor, rep.passed, rep.max_deviation - rep.tol, worst, {"max_deviation": rep.max_deviation})


# --- stochastic shortest path ------------------------------------------------


def check_ssp_envelope(ctx: CheckContext, name="thmD1-envelope", unit_constant=False) -> CheckResult:
    anchor = "v_gap_k <= (1-(1-kappa)beta)^(k-1) (gap0 + 2C) / (1-kappa)"
    t = ctx.trace
    beta = _lfa_beta(t)
    if beta is None:
        return _not_applicable(name, anchor, "requires beta_0 = 1 and constant beta afterwards")
    if unit_constant and abs(t.tau * t.nu_max - 1.0) > 1e-12:
        return _not_applicable(name, anchor, "requires alpha_0 = log m")
    kappa = t.meta["kappa"]
    c = (1.0 if unit_constant else t.tau * t.nu_max) * _scale(ctx)
    rows = [
        (r.k, r.v_gap, (1 - (1 - kappa) * beta) ** (r.k - 1) * (t.gap0 + 2 * c) / (1 - kappa))
        for r in t.records
        if r.k >= 1
    ]
    res = inequality(name, anchor, rows, SSP_SLACK)
    res.detail["kappa"] = kappa
    return res


def check_ssp_recursion(ctx: CheckContext, name="lemmaD3-recursion") -> CheckResult:
    t = ctx.trace
    kappa = t.meta["kappa"]
    kp = bounds.kappa_prime(kappa)
    recs = t.records
    rows = []
    for k in range(1, len(recs) - 1):
        b = recs[k].beta
        rhs = (1 - (1 - kappa) * b) * recs[k].extra["qbar_gap_xi"] + kp * b * recs[k - 1].eta * t.nu_max
        rows.append((k, recs[k + 1].extra["qbar_gap_xi"], rhs))
    anchor = "|Q*-Qbar_{k+1}|_xi <= (1-(1-kappa)beta_k)|Q*-Qbar_k|_xi + kappa' beta_k eta_{k-1} nu_max"
    res = inequality(name, anchor, rows, SSP_SLACK)
    res.detail.update(kappa=kappa, kappa_prime=kp)
    return res


def check_ssp_translation(ctx: CheckContext, name="lemmaD4-translation") -> CheckResult:
    t = ctx.trace
    rows = [(1, t[1].qbar_gap, t.gap0)] if len(t) > 1 and t[1].k == 1 else []
    return inequality(name, "|Q* - Qbar_1| <= |V* - V^{pi_0}|", rows, SSP_SLACK)


def check_weighted_norm(ctx: CheckContext, name="weighted-norm-certificate") -> CheckResult:
    from .ssp import apply_ssp_bellman_optimality

    anchor = "|H(Q1)-H(Q2)|_xi <= kappa |Q1-Q2|_xi and (1-kappa)|Q| <= |Q|_xi <= |Q|"
    ssp = ctx.instance
    norm = ssp.weighted_norm
    rng = np.random.default_rng(int(ctx.get("seed", 0)) + 1)
    rows = []
    scale = float(norm.xi.max())
    for i in range(int(ctx.get("pairs", 200))):
        q1 = rng.uniform(-scale, scale, size=norm.xi.shape)
        q2 = rng.uniform(-scale, scale, size=norm.xi.shape)
        lhs = norm(apply_ssp_bellman_optimality(q1, ssp) - apply_ssp_bellman_optimality(q2, ssp))
        rows.append((i, lhs, norm.kappa * norm(q1 - q2)))
        q = rng.standard_normal(norm.xi.shape) * rng.uniform(0.1, 10.0)
        rows.append((i, (1 - norm.kappa) * sup_norm(q), norm(q)))
        rows.append((i, norm(q), sup_norm(q)))
    res = inequality(name, anchor, rows, 1e-10)
    res.detail.update(kappa=norm.kappa, margin=norm.margin)
    return res


def check_propd1(ctx: CheckContext, name="propD1-equivalence") -> CheckResult:
    from .ssp import check_ssp_equivalence

    anchor = "raw-accumulator NPG and entropic averaged PI coincide on the shortest-path problem"
    ssp = ctx.instance
    k = int(ctx.get("equivalence_k", min(40, ctx.trace.records[-1].k)))
    rep = check_ssp_equivalence(ssp, _equivalence_alphas(ctx, ssp.m, k + 1), k)
    worst = int(np.argmax(rep.deviations)) if rep.deviations else None
    return CheckResult(name, anchor, rep.passed, rep.max_deviation - rep.tol, worst, {"max_deviation": rep.max_deviation})


@dataclass(frozen=True)
class CheckSpec:
    fn: Callable[[CheckContext], CheckResult]
    solvers: tuple


TABULAR_AVG = ("dspi", "pda", "npg", "dpi")

REGISTRY: dict[str, CheckSpec] = {
    "thm1.2-envelope": CheckSpec(check_dspi_envelope, TABULAR_AVG),
    "thm2-envelope": CheckSpec(check_npg_envelope, ("npg",)),
    "thm7-pi-rate": CheckSpec(check_pi_rate, ("pi",)),
    "lemma1-monotone": CheckSpec(check_monotone, TABULAR_AVG + ("pi",)),
    "lemma2-recursion": CheckSpec(check_recursion, TABULAR_AVG),
    "qbar-dominance": CheckSpec(check_qbar_dominance, TABULAR_AVG),
    "v_gap-nonincreasing": CheckSpec(check_vgap_nonincreasing, TABULAR_AVG + ("pi",)),
    "thm3-termination": CheckSpec(check_termination, ("dpi",)),
    "prop1-equivalence": CheckSpec(check_prop1, ("dspi", "npg")),
    "cor1-complexity": CheckSpec(check_complexity, ("dspi", "npg")),
    "cor2-complexity": CheckSpec(lambda c: check_complexity(c, "cor2-complexity"), ("npg",)),
    "thmC1-envelope": CheckSpec(check_lfa_envelope, ("dspi-lfa", "npg-lfa")),
    "thmC2-envelope": CheckSpec(lambda c: check_lfa_envelope(c, "thmC2-envelope", True), ("npg-lfa",)),
    "lemmaC1-almost-monotone": CheckSpec(check_lfa_monotone, ("dspi-lfa", "npg-lfa")),
    "corC2-wbar-dominance": CheckSpec(check_wbar_dominance, ("dspi-lfa", "npg-lfa")),
    "lemmaC3-recursion": CheckSpec(check_lfa_recursion, ("dspi-lfa", "npg-lfa")),
    "propC1-equivalence": CheckSpec(check_propc1, ("dspi-lfa", "npg-lfa")),
    "thmD1-envelope": CheckSpec(check_ssp_envelope, ("dspi-ssp", "npg-ssp")),
    "thmD2-envelope": CheckSpec(lambda c: check_ssp_envelope(c, "thmD2-envelope", True), ("npg-ssp",)),
    "lemmaD1-monotone": CheckSpec(lambda c: check_monotone(c, "lemmaD1-monotone", SSP_SLACK), ("dspi-ssp", "npg-ssp")),
    "lemmaD3-recursion": CheckSpec(check_ssp_recursion, ("dspi-ssp", "npg-ssp")),
    "lemmaD4-translation": CheckSpec(check_ssp_translation, ("dspi-ssp", "npg-ssp")),
    "weighted-norm-certificate": CheckSpec(check_weighted_norm, ("dspi-ssp", "npg-ssp")),
    "propD1-equivalence": CheckSpec(check_propd1, ("dspi-ssp", "npg-ssp")),
}


def available_checks(solver: str | None = None) -> list[str]:
    return [k for k, v in REGISTRY.items() if solver is None or solver in v.solvers]


def run_check(name: str, ctx: CheckContext) -> CheckResult:
    if name not in REGISTRY:
        raise ConfigError(f"unknown check {name!r}; available checks: {', '.join(sorted(REGISTRY))}")
    spec = REGISTRY[name]
    if ctx.trace.solver not in spec.solvers:
        raise ConfigError(
            f"check {name!r} does not apply to solver {ctx.trace.solver!r}; "
            f"applicable: {', '.join(available_checks(ctx.trace.solver))}"
        )
    return spec.fn(ctx)


def run_checks(names, ctx: CheckContext) -> list[CheckResult]:
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; available checks: {', '.join(sorted(REGISTRY))}")
    return [run_check(n, ctx) for n in names]
