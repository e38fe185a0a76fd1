"""Exhaustive reference solutions for small instances."""
from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .mdp import TabularMdp

ENUMERATION_LIMIT = 100_000


class EnumerationResult(NamedTuple):
    v_star: np.ndarray
    best_actions: np.ndarray  # one optimal deterministic policy (first in lexicographic order)
    optimal_count: int
    policy_count: int


def enumerate_deterministic_policies(mdp: TabularMdp, tol: float = 1e-9, batch: int = 8192) -> EnumerationResult:
    """Evaluate all m^n deterministic policies with batched n x n solves.

    The optimal value is the componentwise maximum over policies; a policy is
    optimal if it attains it within ``tol`` at every state.
    """
    n, m = mdp.n, mdp.m
    total = m**n
    if total > ENUMERATION_LIMIT:
        raise ConfigError(f"{total} deterministic policies exceed the enumeration limit {ENUMERATION_LIMIT}")
    all_actions = np.array(list(itertools.product(range(m), repeat=n)), dtype=int)
    idx = np.arange(n)
    values = np.empty((total, n))
    eye = np.eye(n)
    for lo in range(0, total, batch):
        acts = all_actions[lo : lo + batch]
        p = mdp.transition[idx[None, :], acts]  # (b, n, n)
        r = mdp.reward[idx[None, :], acts]  # (b, n)
        values[lo : lo + batch] = np.linalg.solve(eye - mdp.gamma * p, r[..., None])[..., 0]
    v_star = values.max(axis=0)
    optimal = np.all(values >= v_star - tol, axis=1)
    first = int(np.argmax(optimal))
    return EnumerationResult(v_star, all_actions[first], int(optimal.sum()), total)


def policy_value(mdp: TabularMdp, actions) -> np.ndarray:
    idx = np.arange(mdp.n)
    acts = np.asarray(actions, dtype=int)
    p = mdp.transition[idx, acts]
    return np.linalg.solve(np.eye(mdp.n) - mdp.gamma * p, mdp.reward[idx, acts])
