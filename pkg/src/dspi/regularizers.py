"""Concave smoothing functions on the action simplex.

Three regularizers are supported:

* ``zero``        -- nu(mu) = 0, the greedy (policy-iteration) case;
* ``entropy``     -- Shannon entropy, giving softmax / NPG updates;
* ``neg_sq_norm`` -- 1/2 - ||mu||^2 / 2, a shifted negative squared norm
  (the policy-dual-averaging example).

Every regularizer exposes its value, its maximum over the simplex, a maximizer,
and the regularized greedy step ``argmax_mu {mu.q + eta * nu(mu)}`` in closed
form. All array functions act on the last axis, so a whole ``(n, m)`` table of
Q-values can be processed at once.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .errors import DomainError

DIST_TOL = 1e-12

TIE_BREAKS = ("lowest", "highest")


class RegularizerKind(str, enum.Enum):
    ZERO = "zero"
    ENTROPY = "entropy"
    NEG_SQ_NORM = "neg_sq_norm"


@dataclass(frozen=True)
class Regularizer:
    kind: RegularizerKind
    # C in nu = C - omega with omega(mu) = ||mu||^2 / 2; only used by NEG_SQ_NORM.
    shift: float = 0.5

    @classmethod
    def from_key(cls, key: str | "Regularizer") -> "Regularizer":
        if isinstance(key, Regularizer):
            return key
        try:
            return cls(RegularizerKind(key))
        except ValueError:
            valid = ", ".join(k.value for k in RegularizerKind)
            raise DomainError(f"unknown regularizer {key!r}; expected one of {valid}") from None

    @property
    def key(self) -> str:
        return self.kind.value

    def value(self, mu):
        return nu_value(self, mu)

    def max_value(self, m: int) -> float:
        return nu_max(self, m)

    def max_point(self, m: int) -> np.ndarray:
        return max_point(self, m)

    def argmax(self, q, eta: float, tie_break: str = "lowest"):
        return regularized_argmax(self, q, eta, tie_break=tie_break)

    def smoothed_max(self, q, eta: float):
        return smoothed_max(self, q, eta)


ZERO = Regularizer(RegularizerKind.ZERO)
ENTROPY = Regularizer(RegularizerKind.ENTROPY)
NEG_SQ_NORM = Regularizer(RegularizerKind.NEG_SQ_NORM)


def get_regularizer(key) -> Regularizer:
    """Look up a regularizer by its config key ("zero", "entropy", "neg_sq_norm")."""
    return Regularizer.from_key(key)


def check_distribution(mu, tol: float = DIST_TOL) -> np.ndarray:
    """Validate that every row along the last axis is a probability vector."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 0 or mu.shape[-1] == 0:
        raise DomainError("distribution must have at least one entry")
    if not np.all(np.isfinite(mu)):
        raise DomainError("distribution has non-finite entries")
    if np.any(mu < -tol):
        raise DomainError("distribution has negative entries")
    if np.any(np.abs(mu.sum(axis=-1) - 1.0) > tol * max(1, mu.shape[-1])):
        raise DomainError("distribution rows must sum to 1")
    return mu


def nu_value(r: Regularizer, mu):
    """nu(mu), evaluated row-wise. Returns a scalar for a single distribution."""
    mu = check_distribution(mu)
    if r.kind is RegularizerKind.ZERO:
        out = np.zeros(mu.shape[:-1])
    elif r.kind is RegularizerKind.ENTROPY:
        out = entr(np.clip(mu, 0.0, None)).sum(axis=-1)
    else:
        out = r.shift - 0.5 * np.sum(mu * mu, axis=-1)
    return float(out) if out.ndim == 0 else out


def nu_max(r: Regularizer, m: int) -> float:
    if m < 1:
        raise DomainError("action count must be positive")
    if r.kind is RegularizerKind.ZERO:
        return 0.0
    if r.kind is RegularizerKind.ENTROPY:
        return float(np.log(m))
    return r.shift - 0.5 / m


def max_point(r: Regularizer, m: int) -> np.ndarray:
    """A maximizer of nu over the simplex.

    Uniform for every kind; for ``zero`` every distribution is a maximizer and
    the uniform one is picked by convention.
    """
    if m < 1:
        raise DomainError("action count must be positive")
    return np.full(m, 1.0 / m)


def _check_argmax_inputs(q, eta):
    q = np.asarray(q, dtype=float)
    if eta < 0 or not np.isfinite(eta):
        raise DomainError(f"eta must be a finite nonnegative number, got {eta}")
    if q.ndim == 0:
        raise DomainError("q must have an action axis")
    if not np.all(np.isfinite(q)):
        raise DomainError("q has non-finite entries")
    return q


def greedy(q, tie_break: str = "lowest") -> np.ndarray:
    """Point mass on argmax_a q(a), rows along the last axis."""
    q = np.asarray(q, dtype=float)
    m = q.shape[-1]
    if tie_break == "lowest":
        idx = np.argmax(q, axis=-1)
    elif tie_break == "highest":
        idx = m - 1 - np.argmax(q[..., ::-1], axis=-1)
    else:
        raise DomainError(f"unknown tie_break {tie_break!r}; expected one of {TIE_BREAKS}")
    out = np.zeros_like(q)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    m = v.shape[-1]
    # shift-covariant; centring keeps cumulative sums small
    v = v - v.max(axis=-1, keepdims=True)
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, m + 1)
    cond = u - css / ind > 0
    rho = m - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, np.expand_dims(rho - 1, -1), axis=-1) / np.expand_dims(rho, -1)
    return np.maximum(v - theta, 0.0)


def regularized_argmax(r: Regularizer, q, eta: float, tie_break: str = "lowest") -> np.ndarray:
    """argmax over the simplex of ``mu.q + eta * nu(mu)``, row-wise."""
    q = _check_argmax_inputs(q, eta)
    if r.kind is RegularizerKind.ZERO or eta == 0:
        return greedy(q, tie_break)
    if r.kind is RegularizerKind.ENTROPY:
        return softmax((q - q.max(axis=-1, keepdims=True)) / eta)
    with np.errstate(over="ignore"):
        z = (q - q.max(axis=-1, keepdims=True)) / eta
    return project_simplex(np.maximum(z, -1e300))


def smoothed_max(r: Regularizer, q, eta: float):
    """max over the simplex of ``mu.q + eta * nu(mu)``, row-wise."""
    q = _check_argmax_inputs(q, eta)
    top = q.max(axis=-1)
    if r.kind is RegularizerKind.ZERO or eta == 0:
        out = top
    elif r.kind is RegularizerKind.ENTROPY:
        out = top + eta * np.log(np.exp((q - top[..., None]) / eta).sum(axis=-1))
    else:
        mu = regularized_argmax(r, q, eta)
        out = np.sum(mu * q, axis=-1) + eta * (r.shift - 0.5 * np.sum(mu * mu, axis=-1))
    return float(out) if np.ndim(out) == 0 else out
