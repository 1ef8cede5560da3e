"""LoRA factor pairs, the alternating phase schedule, and aggregation algebra."""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ShapeError

SHARED_TOL = 1e-15
WEIGHT_TOL = 1e-12


class Phase(str, enum.Enum):
    A = "A"
    B = "B"
    BOTH = "AB"

    def trains_a(self):
        return self is not Phase.B

    def trains_b(self):
        return self is not Phase.A


@dataclass(frozen=True, eq=False)
class LoRAPair:
    """Factors of ``delta_w = (alpha / rank) * b @ a``.

    ``a`` is ``rank x n`` (down-projection), ``b`` is ``m x rank``.
    """

    a: np.ndarray
    b: np.ndarray
    alpha: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[1]:
            raise ShapeError(f"incompatible factors a{a.shape}, b{b.shape}")
        if self.alpha <= 0:
            raise PreconditionError("alpha must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def scaling(self):
        return self.alpha / self.rank

    @property
    def shape(self):
        """Shape of the update matrix, ``(m, n)``."""
        return self.b.shape[0], self.a.shape[1]

    def replace(self, a=None, b=None):
        return LoRAPair(self.a if a is None else a, self.b if b is None else b, self.alpha)


def init_pair(r, n, m, alpha, rng):
    """Standard LoRA init: ``a ~ N(0, 1/r)`` entrywise, ``b = 0``."""
    if not 1 <= r <= min(m, n):
        raise PreconditionError(f"rank {r} must lie in [1, min(m, n) = {min(m, n)}]")
    a = rng.normal(0.0, np.sqrt(1.0 / r), size=(r, n))
    return LoRAPair(a, np.zeros((m, r)), alpha)


def delta_w(p):
    return p.scaling * (p.b @ p.a)


@dataclass(frozen=True)
class PhaseSchedule:
    interval: int
    total_periods: int = 1

    def __post_init__(self):
        if self.interval < 1:
            raise PreconditionError("switching interval T must be >= 1")
        if self.total_periods < 1:
            raise PreconditionError("total_periods K must be >= 1")

    @property
    def total_steps(self):
        return 2 * self.total_periods * self.interval


def phase_at(t, schedule):
    """B-phase on the first T steps of every 2T-step period, A-phase after."""
    return Phase.B if t % (2 * schedule.interval) < schedule.interval else Phase.A


def uniform_weights(n):
    return np.full(n, 1.0 / n)


def check_weights(w, n):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise PreconditionError("aggregation weights must be nonnegative and sum to 1")
    return w


def _check_pairs(pairs, w):
    if not pairs:
        raise PreconditionError("need at least one pair")
    first = pairs[0]
    for p in pairs[1:]:
        if p.a.shape != first.a.shape or p.b.shape != first.b.shape:
            raise ShapeError("pairs have mismatched shapes")
        if p.scaling != first.scaling:
            raise ShapeError("pairs have mismatched scaling")
    return check_weights(uniform_weights(len(pairs)) if w is None else w, len(pairs))


def naive_aggregate(pairs, w=None):
    """Average ``a`` and ``b`` separately (FedAvg on factors)."""
    w = _check_pairs(pairs, w)
    a = np.tensordot(w, np.stack([p.a for p in pairs]), axes=1)
    b = np.tensordot(w, np.stack([p.b for p in pairs]), axes=1)
    return LoRAPair(a, b, pairs[0].alpha)


def diagonal_term(pairs, w=None):
    """``s * sum_i w_i^2 b_i a_i``."""
    w = _check_pairs(pairs, w)
    s = pairs[0].scaling
    return s * sum(wi * wi * (p.b @ p.a) for wi, p in zip(w, pairs))


def cross_term(pairs, w=None):
    """``s * sum_{i != j} w_i w_j b_i a_j``, the mixed-client products.

    Uses ``(sum w_i b_i)(sum w_j a_j) - sum w_i^2 b_i a_i``.
    """
    w = _check_pairs(pairs, w)
    s = pairs[0].scaling
    agg = naive_aggregate(pairs, w)
    return s * (agg.b @ agg.a) - diagonal_term(pairs, w)


def true_average(pairs, w=None):
    """``sum_i w_i delta_w(p_i)``, the average of the client updates."""
    w = _check_pairs(pairs, w)
    return sum(wi * delta_w(p) for wi, p in zip(w, pairs))


def aggregation_error(pairs, w=None):
    """How far the product of averaged factors is from the averaged products."""
    return delta_w(naive_aggregate(pairs, w)) - true_average(pairs, w)


def shared_block_exactness(pairs, w=None, which="A"):
    """Aggregated update when block ``which`` is common to every client.

    With one factor shared the map from the other factor to ``delta_w`` is
    linear, so the naive aggregate equals the average of client updates.
    """
    which = Phase(which)
    if which is Phase.BOTH:
        raise PreconditionError("which must be 'A' or 'B'")
    _check_pairs(pairs, w)
    ref = pairs[0].a if which is Phase.A else pairs[0].b
    for p in pairs[1:]:
        other = p.a if which is Phase.A else p.b
        if np.max(np.abs(other - ref), initial=0.0) > SHARED_TOL:
            raise PreconditionError(f"block {which.value} is not shared across pairs")
    return delta_w(naive_aggregate(pairs, w))
