"""Closed-form convergence envelopes and iteration budgets.

All envelopes bound ||V* - V^{pi_k}||_inf for k >= 1 under the stated
stepsize regime; at k = 0 they return the initial gap itself.
"""
from __future__ import annotations

import math

import numpy as np


def dspi_envelope(k: int, gamma: float, beta: float, gap0: float, tau: float, nu_max: float) -> float:
    """Constant stepsize after beta_0 = 1: (1-(1-gamma)beta)^(k-1) (gamma gap0 + tau nu_max)."""
    if k == 0:
        return gap0
    return (1 - (1 - gamma) * beta) ** (k - 1) * (gamma * gap0 + tau * nu_max)


def dspi_envelope_general(betas, gamma: float, gap0: float, tau: float, nu_max: float) -> np.ndarray:
    """Envelope for an arbitrary schedule with beta_0 = 1, for k = 0..len(betas)-1.

    bound_k = prod_{j<k, j>=1} c_j * gamma gap0
              + gamma nu_max sum_{i=1}^{k-1} beta_i eta_{i-1} prod_{j=i+1}^{k-1} c_j
              + eta_{k-1} nu_max,
    with c_j = 1 - (1-gamma) beta_j and eta_i = tau prod_{j=1}^i (1 - beta_j).
    Evaluated by the equivalent recursion
        A_1 = gamma gap0,  A_{k+1} = c_k A_k + gamma beta_k eta_{k-1} nu_max,
        bound_k = A_k + eta_{k-1} nu_max.
    """
    betas = np.asarray(betas, dtype=float)
    out = np.full(len(betas), math.nan)
    if len(betas) == 0:
        return out
    out[0] = gap0
    if betas[0] != 1.0:
        return out
    a = gamma * gap0
    eta_prev = tau  # eta_0
    for k in range(1, len(betas)):
        out[k] = a + eta_prev * nu_max
        b = betas[k]
        a = (1 - (1 - gamma) * b) * a + gamma * b * eta_prev * nu_max
        eta_prev *= 1 - b
    return out


def pi_envelope(k: int, gamma: float, gap0: float) -> float:
    return gamma**k * gap0


def npg_envelope(k: int, gamma: float, beta: float, gap0: float) -> float:
    """Geometric NPG schedule with alpha_0 = log m: tau nu_max collapses to 1."""
    if k == 0:
        return gap0
    return (1 - (1 - gamma) * beta) ** (k - 1) * (gamma * gap0 + 1.0)


def vi_envelope(k: int, gamma: float, q_star_norm: float) -> float:
    """Greedy policy of the k-th value-iteration iterate started from Q = 0."""
    return 2 * gamma**k * q_star_norm / (1 - gamma)


def lfa_envelope(
    k: int, gamma: float, beta: float, gap0: float, tau: float, nu_max: float, eps: float
) -> float:
    if k == 0:
        return gap0
    return dspi_envelope(k, gamma, beta, gap0, tau, nu_max) + 2 * eps / (beta * (1 - gamma) ** 2)


def lfa_delta(k: int, gamma: float, beta: float, eps: float) -> float:
    """((1+gamma)/(1-gamma)) eps sum_{i<k} (1-beta)^i."""
    if beta == 1.0:
        geo = 1.0 if k >= 1 else 0.0
    else:
        geo = (1 - (1 - beta) ** k) / beta
    return (1 + gamma) / (1 - gamma) * eps * geo


def ssp_envelope(k: int, kappa: float, beta: float, gap0: float, tau: float, nu_max: float) -> float:
    if k == 0:
        return gap0 / (1 - kappa)
    return (1 - (1 - kappa) * beta) ** (k - 1) * (gap0 + 2 * tau * nu_max) / (1 - kappa)


def kappa_prime(kappa: float) -> float:
    return min(1.0, kappa / (1 - kappa))


def complexity_budget(gamma: float, eps: float) -> int:
    """ceil(2 (1-gamma)^-1 log(eps^-1 (1-gamma)^-1))."""
    return math.ceil(2 / (1 - gamma) * math.log(1 / (eps * (1 - gamma))))


def dpi_phase_length(beta: float, gamma: float) -> int:
    """k* = ceil(beta^-1 (1-gamma)^-1 log(2 (1-gamma)^-1))."""
    return math.ceil(1 / (beta * (1 - gamma)) * math.log(2 / (1 - gamma)))


def dpi_budget(n: int, m: int, beta: float, gamma: float) -> int:
    return n * (m - 1) * dpi_phase_length(beta, gamma)
