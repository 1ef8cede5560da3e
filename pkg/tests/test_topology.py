from functools import lru_cache

import numpy as np
import pytest

from adflora.engine import consensus_error
from adflora.errors import PreconditionError
from adflora.linalg import spectral_norm
from adflora.topology import (GossipProcess, MixingMatrix, complete_uniform, draw_gossip_round,
                              identity_topology, ring_lazy, spectral_gap)


def test_complete_small():
    w = complete_uniform(2)
    assert np.array_equal(w.w, [[0.5, 0.5], [0.5, 0.5]])
    assert w.rho == 0.0
    assert complete_uniform(1).rho == 0.0
    w10 = complete_uniform(10)
    assert np.allclose(w10.w.sum(axis=1), 1, atol=1e-15)
    assert w10.rho < 1e-10


def test_identity():
    assert np.array_equal(identity_topology(2).w, np.eye(2))
    assert abs(identity_topology(2).rho - 1.0) <= 1e-12
    assert abs(identity_topology(5).rho - 1.0) <= 1e-12


def test_identity_keeps_consensus_error(rng):
    u = rng.normal(size=(3, 5))
    w = identity_topology(5).w
    e0 = consensus_error(u)
    for _ in range(5):
        u = u @ w.T
        assert consensus_error(u) == e0


@pytest.mark.parametrize("n", [3, 4, 5, 6, 10])
def test_ring_rho_matches_circulant(n):
    k = np.arange(1, n)
    expected = np.max(np.abs((1 + 2 * np.cos(2 * np.pi * k / n)) / 3))
    w = ring_lazy(n)
    assert abs(w.rho - expected) <= 1e-10
    assert abs(spectral_gap(w) - spectral_norm(w.w - 1 / n)) <= 1e-10


def test_ring_known_values():
    assert abs(ring_lazy(4).rho - 1 / 3) <= 1e-10
    assert abs(ring_lazy(3).rho) <= 1e-10
    w = ring_lazy(10).w
    assert np.all(w.sum(axis=0) == 1.0) and np.all(w.sum(axis=1) == 1.0)


def test_small_ring_rejected():
    with pytest.raises(PreconditionError):
        ring_lazy(2)


@pytest.mark.parametrize("w", [
    [[0.6, 0.5], [0.4, 0.5]],   # not symmetric
    [[0.7, 0.4], [0.4, 0.7]],   # rows sum to 1.1
    [[1.5, -0.5], [-0.5, 1.5]],  # negative entries
])
def test_invalid_mixing_matrix(w):
    with pytest.raises(PreconditionError):
        MixingMatrix(np.array(w))


def test_mixing_matrix_is_read_only():
    w = ring_lazy(4)
    with pytest.raises(ValueError):
        w.w[0, 0] = 1.0


def test_gossip_p0_is_identity():
    g = GossipProcess(6, 0.0, rng_seed=3)
    for t in range(20):
        assert np.array_equal(draw_gossip_round(g, t).w, np.eye(6))


def test_gossip_p1_two_clients_is_complete():
    g = GossipProcess(2, 1.0, rng_seed=3)
    for t in range(20):
        assert np.array_equal(draw_gossip_round(g, t).w, complete_uniform(2).w)


def test_gossip_rounds_are_valid_and_reproducible():
    g = GossipProcess(10, 0.4, rng_seed=11)
    for t in range(50):
        w = draw_gossip_round(g, t)
        assert isinstance(w, MixingMatrix)
        pairs = g.matching(t)
        flat = [c for p in pairs for c in p]
        assert len(flat) == len(set(flat))
        assert pairs == GossipProcess(10, 0.4, rng_seed=11).matching(t)


def exact_match_probability(n, p):
    """Per-client probability of being matched, by exhaustive recursion over
    the sequential sampling rule (client order, activation, uniform free partner)."""

    @lru_cache(maxsize=None)
    def visit(i, mask):
        # returns vector of P(client k matched | state) for the remaining process
        if i == n:
            return tuple(float((mask >> k) & 1) for k in range(n))
        if (mask >> i) & 1:
            return visit(i + 1, mask)
        free = [j for j in range(n) if j != i and not (mask >> j) & 1]
        idle = np.array(visit(i + 1, mask))
        if not free:
            return tuple(idle)
        act = np.zeros(n)
        for j in free:
            act += np.array(visit(i + 1, mask | (1 << i) | (1 << j))) / len(free)
        return tuple(p * act + (1 - p) * idle)

    return np.array(visit(0, 0))


def test_gossip_match_frequency_matches_exact_probability():
    n, p, rounds = 10, 0.1, 10_000
    exact = exact_match_probability(n, p)
    g = GossipProcess(n, p, rng_seed=5)
    counts = np.zeros(n)
    for t in range(rounds):
        for i, j in g.matching(t):
            counts[i] += 1
            counts[j] += 1
    freq = counts / rounds
    assert np.all(np.abs(freq - exact) <= 0.03), (freq, exact)


def test_exact_probability_sanity():
    # two clients, first activates with p, otherwise second does: 1 - (1 - p)^2
    assert np.allclose(exact_match_probability(2, 0.3), 1 - 0.7 ** 2)
