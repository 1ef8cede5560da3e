import numpy as np
import pytest

from adflora.checks import check_descent, check_contraction, check_stationarity_bound, stationarity_rhs
from adflora.engine import (ClientState, Method, OptimizerSpec, compute_metrics, consensus_errors,
                            init_states, iterate_rounds, local_update, mean_pair, mix_active_only,
                            mix_joint, simulate)
from adflora.errors import PreconditionError
from adflora.lora import LoRAPair, Phase, PhaseSchedule, phase_at
from adflora.optim import BlockMoments, SgdConfig
from adflora.tasks import (BINARY_PARTITION, LogisticTask, MatFactTask, make_logistic_task,
                           make_matfact_task, matfact_grad, matfact_optimum)
from adflora.topology import GossipProcess, complete_uniform, identity_topology, ring_lazy

SGD = OptimizerSpec(kind="sgd", sgd=SgdConfig(eta=0.05))
THEORY = OptimizerSpec(kind="theory")


@pytest.fixture
def task():
    return make_matfact_task(4, 6, 6, 2, np.random.default_rng(3))


def hetero(task, seed=0, scale=0.3):
    return init_states(task, 2, 2.0, seed, "heterogeneous", scale)


def same_pairs(s1, s2):
    return all(np.array_equal(x.pair.a, y.pair.a) and np.array_equal(x.pair.b, y.pair.b)
               for x, y in zip(s1, s2))


def test_local_steps_zero_is_identity(task):
    s = hetero(task)[0]
    assert local_update(s, task, Phase.BOTH, SGD, 0) is s


def test_phase_contract(task):
    s = hetero(task)[0]
    both = local_update(s, task, Phase.BOTH, SGD, 2)
    assert not np.array_equal(both.pair.a, s.pair.a)
    assert not np.array_equal(both.pair.b, s.pair.b)
    bonly = local_update(s, task, Phase.B, SGD, 2)
    assert bonly.pair.a is s.pair.a
    assert not np.array_equal(bonly.pair.b, s.pair.b)


def test_theory_step_does_not_increase_client_loss(task):
    from adflora.optim import theory_step_size
    for s in hetero(task):
        for phase in (Phase.A, Phase.B):
            eta = theory_step_size(s.pair, task, eta_max=1e9)
            after = local_update(s, task, phase, THEORY, 1, eta=eta)
            assert task.loss(s.shard, after.pair) <= task.loss(s.shard, s.pair) + 1e-12


def test_mix_identity_and_complete(task):
    states = hetero(task)
    same = mix_joint(states, identity_topology(4))
    assert same_pairs(same, states)
    avg = mix_joint(states, complete_uniform(4))
    ea, eb = consensus_errors(avg)
    assert ea < 1e-14 and eb < 1e-14
    m = mean_pair(states)
    assert np.allclose(avg[2].pair.a, m.a, atol=1e-15)


def test_ring_contraction(task):
    states = hetero(task)
    w = ring_lazy(4)
    for _ in range(10):
        nxt = mix_joint(states, w)
        res = check_contraction(states, nxt, w.rho)
        assert res.passed and min(res.margins.values()) >= -1e-10
        states = nxt


def test_joint_mixing_preserves_mean(task):
    states = hetero(task)
    m0 = mean_pair(states)
    g = GossipProcess(4, 0.7, 1)
    from adflora.topology import draw_gossip_round
    for t in range(10):
        states = mix_joint(states, draw_gossip_round(g, t))
    m1 = mean_pair(states)
    assert np.allclose(m0.a, m1.a, atol=1e-14) and np.allclose(m0.b, m1.b, atol=1e-14)


def test_active_only_mixing(task):
    states = hetero(task)
    out = mix_active_only(states, complete_uniform(4), Phase.B)
    for s, o in zip(states, out):
        assert o.pair.a is s.pair.a
    ea0, _ = consensus_errors(states)
    ea, eb = consensus_errors(out)
    assert ea == ea0 and eb < 1e-14


def test_frozen_stack_constant_within_phase(task):
    states = hetero(task)
    sched = PhaseSchedule(3, 2)
    w = ring_lazy(4)
    prev = None
    for ev in iterate_rounds(task, states, "rolora_dfl", w, SGD, 12, schedule=sched):
        frozen = 0 if ev.phase is Phase.B else 1
        errs = consensus_errors(ev.after)
        if prev is not None and prev[0] is ev.phase:
            assert errs[frozen] == prev[1][frozen]
        prev = (ev.phase, errs)


def explicit_centralized_rolora(task, pair0, eta, rounds, interval):
    """Server-side alternating FedAvg written out with plain arrays."""
    a = np.stack([pair0.a] * task.n_clients)
    b = np.stack([pair0.b] * task.n_clients)
    traj = []
    for t in range(rounds):
        train_b = (t % (2 * interval)) < interval
        for i in range(task.n_clients):
            g = matfact_grad(task, i, LoRAPair(a[i], b[i], pair0.alpha))
            if train_b:
                b[i] = b[i] - eta * g.g_b
            else:
                a[i] = a[i] - eta * g.g_a
        if train_b:
            b[:] = b.mean(axis=0)
        else:
            a[:] = a.mean(axis=0)
        traj.append((a.copy(), b.copy()))
    return traj


@pytest.mark.parametrize("method,topology", [("rolora_cfl", ring_lazy(4)),
                                             ("adf", complete_uniform(4))])
def test_centralized_reduction(task, method, topology):
    states = init_states(task, 2, 2.0, 5, "homogeneous")
    states = [s.__class__(s.id, s.pair.replace(b=0.2 * np.ones_like(s.pair.b)), s.moments, s.shard)
              for s in states]
    ref = explicit_centralized_rolora(task, states[0].pair, 0.05, 20, 3)
    for ev, (a, b) in zip(iterate_rounds(task, states, method, topology, SGD, 20,
                                         schedule=PhaseSchedule(3, 4)), ref):
        for i, s in enumerate(ev.after):
            assert np.max(np.abs(s.pair.a - a[i])) <= 1e-12
            assert np.max(np.abs(s.pair.b - b[i])) <= 1e-12


def test_ffa_keeps_a(task):
    states = hetero(task)
    res = simulate(task, states, "ffa", ring_lazy(4), SGD, 10, local_steps=2)
    for s0, s1 in zip(states, res.states):
        assert np.array_equal(s0.pair.a, s1.pair.a)


def test_simulation_is_deterministic():
    rng = np.random.default_rng(1)
    task = make_logistic_task(BINARY_PARTITION, 40, 6, rng)
    opt = OptimizerSpec(kind="adam")
    runs = []
    for _ in range(2):
        states = init_states(task, 1, 2.0, 4)
        runs.append(simulate(task, states, "adf", GossipProcess(10, 0.3, 4), opt, 12, 3,
                             PhaseSchedule(2, 3), seed=4, batch_size=8, eval_every=2))
    for r1, r2 in zip(runs[0].trace, runs[1].trace):
        assert r1.as_dict() == r2.as_dict()
    assert same_pairs(runs[0].states, runs[1].states)


def test_zero_rounds(task):
    states = hetero(task)
    res = simulate(task, states, "adf", ring_lazy(4), SGD, 0, schedule=PhaseSchedule(1))
    assert res.trace == []
    assert res.final.as_dict() == res.initial.as_dict()


def test_alternating_needs_schedule(task):
    with pytest.raises(PreconditionError):
        simulate(task, hetero(task), "adf", ring_lazy(4), SGD, 3)


def test_trace_records(task):
    res = simulate(task, hetero(task), "adf", ring_lazy(4), THEORY, 12, schedule=PhaseSchedule(3, 2),
                   eval_every=4)
    assert [r.step for r in res.trace] == [0, 4, 8]
    assert res.final.step == 12
    assert [r.phase for r in res.trace] == [phase_at(t, PhaseSchedule(3, 2)).value for t in (0, 4, 8)]
    assert all(r.eta is not None for r in res.trace)


def test_metrics_homogeneous(task):
    states = init_states(task, 2, 2.0, 0)
    rec = compute_metrics(states, task, Phase.B)
    assert rec.consensus_err_a == 0.0 and rec.consensus_err_b == 0.0
    assert rec.mean_accuracy is None


def test_metrics_scalar_cross_term():
    task = MatFactTask(np.zeros((1, 1)), np.zeros((2, 1, 1)), 1)
    pairs = [LoRAPair([[1.0]], [[1.0]], 1.0), LoRAPair([[-1.0]], [[-1.0]], 1.0)]
    states = [ClientState(i, p, BlockMoments.zeros_like(p), i) for i, p in enumerate(pairs)]
    rec = compute_metrics(states, task, Phase.BOTH)
    assert rec.cross_term_norm == pytest.approx(0.5, abs=1e-15)


def test_metrics_perfect_classifier():
    x = np.array([[1.0, 0.0], [0.0, 1.0]] * 5)
    y = np.array([0, 1] * 5)
    task = LogisticTask(np.eye(2), [x, x], [y, y], [x, x], [y, y], [[0.5, 0.5]] * 2)
    p = LoRAPair(np.zeros((1, 2)), np.zeros((2, 1)), 1.0)
    states = [ClientState(i, p, BlockMoments.zeros_like(p), i) for i in range(2)]
    assert compute_metrics(states, task, Phase.B).mean_accuracy == 1.0


def test_contraction_edge_cases(task):
    states = hetero(task)
    res = check_contraction(states, mix_joint(states, identity_topology(4)), 1.0)
    assert res.passed and all(m == 0.0 for m in res.margins.values())
    res = check_contraction(states, mix_joint(states, complete_uniform(4)), 0.0)
    assert res.passed and all(d["after"] < 1e-14 for d in res.details.values())


def test_contraction_flags_broken_mixing(task):
    states = hetero(task)
    bad = 1.5 * ring_lazy(4).w
    res = check_contraction(states, mix_joint(states, bad), 1 / 3)
    assert not res.passed


def test_descent_at_stationary_point():
    task = MatFactTask(np.zeros((2, 2)), np.zeros((3, 2, 2)), 1)
    p = LoRAPair(np.zeros((1, 2)), np.zeros((2, 1)), 1.0)
    states = [ClientState(i, p, BlockMoments.zeros_like(p), i) for i in range(3)]
    r0 = compute_metrics(states, task, Phase.B)
    r1 = compute_metrics(states, task, Phase.B, step=1)
    res = check_descent(r0, r1, 0.5)
    assert res.passed and abs(res.details["residual"]) <= 1e-12


def test_stationarity_examples(task):
    lstar = matfact_optimum(task)
    assert stationarity_rhs(1.0, 0.0, 0.1, 20, 2) <= stationarity_rhs(1.0, 0.0, 0.1, 10, 2)
    u, s, vt = np.linalg.svd(task.mean_target - task.base)
    opt = LoRAPair(vt[:2], u[:, :2] * s[:2], 2.0)
    states = [ClientState(i, opt, BlockMoments.zeros_like(opt), i) for i in range(4)]
    res = simulate(task, states, "adf", complete_uniform(4), SGD, 8, schedule=PhaseSchedule(2, 2))
    l0 = res.initial.loss_at_mean
    assert l0 - lstar <= 1e-12
    out = check_stationarity_bound(res.trace, l0, lstar, 0.05, 2, 2)
    assert out.passed and out.details["min_grad_sq"] <= 1e-20


def test_method_enum():
    assert Method("adf").alternating and not Method("naive").alternating
    with pytest.raises(ValueError):
        Method("fedavg")
