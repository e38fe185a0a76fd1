"""Seeded random instance families: Garnet MDPs, Garnet SSPs and layered SSPs."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .mdp import TabularMdp
from .ssp import SspMdp


@dataclass(frozen=True)
class GarnetSpec:
    n: int
    m: int
    branching: int
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"n and m must be positive, got n={self.n}, m={self.m}")
        if not 1 <= self.branching <= self.n:
            raise ConfigError(f"branching must lie in [1, n={self.n}], got {self.branching}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")

    def to_dict(self) -> dict:
        return asdict(self)


def _sparse_rows(rng, n: int, m: int, b: int, width: int) -> np.ndarray:
    """(n, m, width) kernel with b successors among the first n columns per row."""
    p = np.zeros((n, m, width))
    for s in range(n):
        for a in range(m):
            succ = rng.choice(n, size=b, replace=False)
            w = rng.uniform(size=b)
            # uniform draws are almost surely positive; guard the measure-zero case
            w = np.where(w > 0, w, 1.0)
            p[s, a, succ] = w / w.sum()
    return p


def generate_garnet(spec: GarnetSpec) -> TabularMdp:
    rng = np.random.default_rng(spec.seed)
    p = _sparse_rows(rng, spec.n, spec.m, spec.branching, spec.n)
    r = rng.uniform(size=(spec.n, spec.m))
    return TabularMdp(p, r, spec.gamma)


def generate_garnet_ssp(spec: GarnetSpec, termination_prob: float) -> SspMdp:
    """Garnet kernel scaled by (1 - termination_prob), the rest on the terminal state."""
    if not 0.0 < termination_prob <= 1.0:
        raise ConfigError(f"termination_prob must lie in (0, 1], got {termination_prob}")
    rng = np.random.default_rng(spec.seed)
    inner = _sparse_rows(rng, spec.n, spec.m, spec.branching, spec.n)
    p = np.zeros((spec.n, spec.m, spec.n + 1))
    p[:, :, : spec.n] = (1.0 - termination_prob) * inner
    p[:, :, spec.n] = termination_prob
    # absorb rounding so each row sums to one exactly as stored
    p[:, :, spec.n] = np.clip(1.0 - p[:, :, : spec.n].sum(axis=2), 0.0, None)
    r = -rng.uniform(size=(spec.n, spec.m))
    return SspMdp(p, r)


def generate_layered_ssp(layers: int, width: int, m: int, seed: int = 0, branching: int = 2) -> SspMdp:
    """Acyclic SSP: states in ``layers`` layers of ``width``; every edge moves strictly forward.

    From layer L an action reaches up to ``branching`` states in later layers
    or the terminal; the last layer always terminates. The longest path to the
    terminal has ``layers`` stages.
    """
    if layers < 1 or width < 1 or m < 1 or branching < 1:
        raise ConfigError("layers, width, m and branching must be positive")
    rng = np.random.default_rng(seed)
    n = layers * width
    p = np.zeros((n, m, n + 1))
    for s in range(n):
        layer = s // width
        later = np.arange((layer + 1) * width, n + 1)  # includes terminal index n
        for a in range(m):
            k = min(branching, later.size)
            succ = rng.choice(later, size=k, replace=False)
            w = rng.uniform(0.1, 1.0, size=k)
            p[s, a, succ] = w / w.sum()
    p[:, :, n] = np.clip(1.0 - p[:, :, :n].sum(axis=2), 0.0, None)
    r = -rng.uniform(size=(n, m))
    return SspMdp(p, r)


def duplicate_actions(mdp: TabularMdp) -> TabularMdp:
    """Copy of ``mdp`` with every action listed twice (actions a and a + m coincide)."""
    return TabularMdp(
        np.concatenate([mdp.transition, mdp.transition], axis=1),
        np.concatenate([mdp.reward, mdp.reward], axis=1),
        mdp.gamma,
    )
