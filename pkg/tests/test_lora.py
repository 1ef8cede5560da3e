import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adflora.errors import PreconditionError
from adflora.lora import (LoRAPair, Phase, PhaseSchedule, aggregation_error, cross_term,
                          delta_w, diagonal_term, init_pair, naive_aggregate, phase_at,
                          shared_block_exactness, true_average)


def random_pairs(rng, n_clients, r, m, n, alpha=None):
    alpha = alpha or float(r)
    return [LoRAPair(rng.normal(size=(r, n)), rng.normal(size=(m, r)), alpha)
            for _ in range(n_clients)]


def test_init_shapes_and_zero_update(rng):
    p = init_pair(2, 4, 4, 16.0, rng)
    assert p.a.shape == (2, 4) and p.b.shape == (4, 2)
    assert np.array_equal(delta_w(p), np.zeros((4, 4)))
    q = init_pair(3, 7, 5, 1.0, rng)
    assert q.shape == (5, 7)


def test_init_statistics(rng):
    r = 4
    draws = np.stack([init_pair(r, 4, 4, 8.0, rng).a for _ in range(10_000)])
    assert abs(draws.mean()) < 0.05 * np.sqrt(1 / r)
    assert abs(draws.var() / (1 / r) - 1) < 0.05


def test_init_rank_bounds(rng):
    with pytest.raises(PreconditionError):
        init_pair(5, 4, 4, 1.0, rng)


def test_delta_w_examples(rng):
    p = LoRAPair(np.array([[1.0, 0.0]]), np.array([[1.0], [0.0]]), 1.0)
    assert np.array_equal(delta_w(p), [[1, 0], [0, 0]])
    q = LoRAPair(rng.normal(size=(3, 5)), rng.normal(size=(4, 3)), 6.0)
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            ref[i, j] = 2.0 * sum(q.b[i, k] * q.a[k, j] for k in range(3))
    assert np.max(np.abs(delta_w(q) - ref)) <= 1e-14


def test_phase_schedule():
    s5 = PhaseSchedule(5, 3)
    assert phase_at(0, s5) is Phase.B
    assert phase_at(5, s5) is Phase.A
    assert phase_at(10, s5) is Phase.B
    assert s5.total_steps == 30
    s1 = PhaseSchedule(1)
    assert [phase_at(t, s1).value for t in range(6)] == list("BABABA")


def test_schedule_rejects_zero_interval():
    with pytest.raises(PreconditionError):
        PhaseSchedule(0)


def test_naive_aggregate_examples(rng):
    p = random_pairs(rng, 1, 2, 3, 3)[0]
    agg = naive_aggregate([p, p, p])
    assert np.allclose(agg.a, p.a, atol=1e-15) and np.allclose(agg.b, p.b, atol=1e-15)
    neg = p.replace(a=-p.a, b=-p.b)
    zero = naive_aggregate([p, neg], [0.5, 0.5])
    assert np.array_equal(zero.a, np.zeros_like(p.a)) and np.array_equal(zero.b, np.zeros_like(p.b))


def test_naive_aggregate_matches_per_entry_sum(rng):
    pairs = random_pairs(rng, 5, 2, 3, 4)
    w = rng.random(5)
    w /= w.sum()
    agg = naive_aggregate(pairs, w)
    ref_a = np.zeros((2, 4))
    for i, p in enumerate(pairs):
        for r in range(2):
            for c in range(4):
                ref_a[r, c] += w[i] * p.a[r, c]
    assert np.max(np.abs(agg.a - ref_a)) <= 1e-14


def test_bad_weights(rng):
    pairs = random_pairs(rng, 3, 1, 2, 2)
    with pytest.raises(PreconditionError):
        naive_aggregate(pairs, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        naive_aggregate(pairs, [0.5, 0.5])


def test_scalar_cross_term():
    pairs = [LoRAPair([[1.0]], [[1.0]], 1.0), LoRAPair([[-1.0]], [[-1.0]], 1.0)]
    assert np.allclose(cross_term(pairs, [0.5, 0.5]), [[-0.5]])
    assert np.allclose(diagonal_term(pairs, [0.5, 0.5]), [[0.5]])
    assert np.allclose(delta_w(naive_aggregate(pairs)), [[0.0]])
    assert np.allclose(true_average(pairs), [[1.0]])
    assert np.allclose(aggregation_error(pairs), [[-1.0]])


def test_identical_pairs_have_no_interference(rng):
    p = random_pairs(rng, 1, 2, 4, 4)[0]
    assert np.max(np.abs(aggregation_error([p] * 4))) <= 1e-14


def brute_force_cross(pairs, w):
    s = pairs[0].scaling
    out = np.zeros(pairs[0].shape)
    for i, pi in enumerate(pairs):
        for j, pj in enumerate(pairs):
            if i != j:
                out += s * w[i] * w[j] * (pi.b @ pj.a)
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), st.integers(4, 8), st.integers(4, 8),
       st.integers(0, 2 ** 32 - 1))
def test_decomposition_identity(n_clients, r, m, n, seed):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng, n_clients, r, m, n, alpha=2.0 * r)
    w = rng.random(n_clients) + 0.1
    w /= w.sum()
    lhs = delta_w(naive_aggregate(pairs, w))
    cross = cross_term(pairs, w)
    assert np.max(np.abs(cross - brute_force_cross(pairs, w))) <= 1e-13
    assert np.max(np.abs(lhs - diagonal_term(pairs, w) - cross)) <= 1e-13


@pytest.mark.parametrize("which", ["A", "B"])
def test_shared_block_exactness(rng, which):
    base = random_pairs(rng, 1, 2, 4, 5)[0]
    others = random_pairs(rng, 3, 2, 4, 5)
    if which == "A":
        pairs = [p.replace(a=base.a) for p in others]
    else:
        pairs = [p.replace(b=base.b) for p in others]
    w = [0.2, 0.3, 0.5]
    got = shared_block_exactness(pairs, w, which)
    assert np.max(np.abs(got - true_average(pairs, w))) <= 1e-13
    assert np.max(np.abs(aggregation_error(pairs, w))) <= 1e-13


def test_shared_both(rng):
    p = random_pairs(rng, 1, 2, 3, 3)[0]
    got = shared_block_exactness([p, p, p], None, "A")
    assert np.max(np.abs(got - delta_w(p))) <= 1e-15


def test_shared_block_precondition(rng):
    with pytest.raises(PreconditionError):
        shared_block_exactness(random_pairs(rng, 3, 2, 3, 3), None, "A")
