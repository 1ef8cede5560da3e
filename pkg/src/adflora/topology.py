"""Mixing matrices and the random pairwise gossip process."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import PreconditionError
from .linalg import as_matrix, spectral_norm

SYMMETRY_TOL = 1e-12
STOCHASTIC_TOL = 1e-12
NEGATIVE_TOL = 1e-15

GOSSIP_STREAM = 0x6055


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly-stochastic ``N x N`` matrix.

    ``rho`` is ``||W - (1/N) 11^T||_2``, computed on first access.
    """

    w: np.ndarray

    def __post_init__(self):
        w = as_matrix(self.w, "mixing matrix")
        n = w.shape[0]
        if w.shape != (n, n):
            raise PreconditionError(f"mixing matrix must be square, got {w.shape}")
        if np.max(np.abs(w - w.T)) > SYMMETRY_TOL:
            raise PreconditionError("mixing matrix is not symmetric")
        if np.min(w) < -NEGATIVE_TOL:
            raise PreconditionError("mixing matrix has negative entries")
        if (np.max(np.abs(w.sum(axis=0) - 1.0)) > STOCHASTIC_TOL
                or np.max(np.abs(w.sum(axis=1) - 1.0)) > STOCHASTIC_TOL):
            raise PreconditionError("mixing matrix is not doubly stochastic")
        w = np.clip(w, 0.0, 1.0)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self):
        return self.w.shape[0]

    @cached_property
    def rho(self):
        n = self.n
        return min(spectral_norm(self.w - np.full((n, n), 1.0 / n)), 1.0)


def spectral_gap(w):
    return w.rho


def complete_uniform(n):
    if n < 1:
        raise PreconditionError("n must be >= 1")
    return MixingMatrix(np.full((n, n), 1.0 / n))


def identity_topology(n):
    if n < 2:
        raise PreconditionError("identity topology needs n >= 2")
    return MixingMatrix(np.eye(n))


def ring_lazy(n):
    """Ring where each node keeps 1/3 and sends 1/3 to each neighbour."""
    if n < 3:
        raise PreconditionError("lazy ring needs n >= 3")
    w = np.zeros((n, n))
    for i in range(n):
        w[i, i] = 1.0 / 3.0
        w[i, (i + 1) % n] = 1.0 / 3.0
        w[i, (i - 1) % n] = 1.0 / 3.0
    return MixingMatrix(w)


@dataclass(frozen=True)
class GossipProcess:
    n_clients: int
    encounter_probability: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise PreconditionError("n_clients must be >= 1")
        if not 0.0 <= self.encounter_probability <= 1.0:
            raise PreconditionError("encounter_probability must lie in [0, 1]")

    def round_rng(self, round_index):
        return np.random.default_rng([self.rng_seed, GOSSIP_STREAM, round_index])

    def matching(self, round_index):
        """Pairs matched in ``round_index`` as a list of ``(i, j)``, ``i < j``.

        Clients are visited in index order. An unmatched client activates
        with the encounter probability and, if any unmatched partner is
        left, pairs with one of them uniformly at random.
        """
        rng = self.round_rng(round_index)
        n = self.n_clients
        matched = np.zeros(n, dtype=bool)
        pairs = []
        for i in range(n):
            if matched[i]:
                continue
            if rng.random() >= self.encounter_probability:
                continue
            free = [j for j in range(n) if j != i and not matched[j]]
            if not free:
                continue
            j = free[rng.integers(len(free))]
            matched[i] = matched[j] = True
            pairs.append((min(i, j), max(i, j)))
        return pairs


def pairs_to_matrix(n, pairs):
    w = np.eye(n)
    for i, j in pairs:
        w[i, i] = w[j, j] = w[i, j] = w[j, i] = 0.5
    return MixingMatrix(w)


def draw_gossip_round(g, round_index):
    return pairs_to_matrix(g.n_clients, g.matching(round_index))
