"""Property battery run by ``adflora verify``.

Each check returns a ``Outcome`` with the measured quantity and the bound
it was held to, so a failure report says by how much it missed.
"""

import time
from dataclasses import dataclass

import numpy as np

from .checks import check_descent, check_contraction, check_stationarity_bound
from .engine import (OptimizerSpec, consensus_errors, init_states, iterate_rounds, mean_pair,
                     mix_joint, simulate)
from .lora import LoRAPair, PhaseSchedule, cross_term, delta_w, diagonal_term, naive_aggregate, \
    shared_block_exactness
from .optim import theory_step_size
from .tasks import make_logistic_task, make_matfact_task, matfact_optimum, softmax_loss_grad
from .topology import complete_uniform, identity_topology, ring_lazy


@dataclass
class Outcome:
    name: str
    passed: bool
    measured: float
    required: str
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        text = f"{tag} {self.name}: measured={self.measured:.3e} required {self.required} ({self.seconds:.2f}s)"
        return text + (f" {self.detail}" if self.detail else "")


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        out = fn(*args, **kwargs)
        out.seconds = time.perf_counter() - start
        return out
    wrapper.__name__ = fn.__name__
    return wrapper


def _random_pairs(rng, n_clients, rank, m, n, alpha=None):
    alpha = float(rank) if alpha is None else alpha
    return [LoRAPair(rng.normal(size=(rank, n)), rng.normal(size=(m, rank)), alpha)
            for _ in range(n_clients)]


@_timed
def cross_term_identity(seed=0, instances=200, tol=1e-13):
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(instances):
        n_clients = int(rng.integers(2, 11))
        rank = int(rng.integers(1, 5))
        m, n = (int(x) for x in rng.integers(rank, 9, size=2))
        pairs = _random_pairs(rng, n_clients, rank, m, n, alpha=float(rng.uniform(0.5, 4)))
        w = rng.dirichlet(np.ones(n_clients))
        s = pairs[0].scaling
        brute = np.zeros((m, n))
        for i in range(n_clients):
            for j in range(n_clients):
                if i != j:
                    brute += w[i] * w[j] * (pairs[i].b @ pairs[j].a)
        lhs = delta_w(naive_aggregate(pairs, w))
        worst = max(worst,
                    np.max(np.abs(lhs - (diagonal_term(pairs, w) + s * brute))),
                    np.max(np.abs(cross_term(pairs, w) - s * brute)))
    return Outcome("cross_term_identity", worst <= tol, worst, f"<= {tol:g}")


@_timed
def shared_block(seed=0, instances=100, tol=1e-13):
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for k in range(instances):
        n_clients = int(rng.integers(2, 11))
        rank = int(rng.integers(1, 5))
        m, n = (int(x) for x in rng.integers(rank, 9, size=2))
        pairs = _random_pairs(rng, n_clients, rank, m, n)
        which = "A" if k % 2 == 0 else "B"
        if which == "A":
            pairs = [p.replace(a=pairs[0].a) for p in pairs]
        else:
            pairs = [p.replace(b=pairs[0].b) for p in pairs]
        w = rng.dirichlet(np.ones(n_clients))
        agg = shared_block_exactness(pairs, w, which)
        avg = sum(wi * delta_w(p) for wi, p in zip(w, pairs))
        worst = max(worst, np.max(np.abs(agg - avg)))
    return Outcome("shared_block_exactness", worst <= tol, worst, f"<= {tol:g}")


def _heterogeneous_states(n_clients, seed, rows=6, cols=5, rank=2):
    task = make_matfact_task(n_clients, rows, cols, rank, np.random.default_rng([seed, 3]))
    return task, init_states(task, rank, float(rank), seed, mode="heterogeneous", init_b_scale=1.0)


def _broken_ring(n):
    # rows sum to 1.5: mixing no longer preserves the mean
    return 1.5 * ring_lazy(n).w


@_timed
def consensus_contraction(seed=0, steps=50, tol=1e-9, inject_fault="none"):
    """Mixing-only runs: per-step contraction and the rho^t envelope."""
    worst = np.inf
    notes = []
    topologies = [("complete", complete_uniform(6)), ("ring4", ring_lazy(4)),
                  ("ring6", ring_lazy(6)), ("identity", identity_topology(6))]
    for name, w in topologies:
        task, states = _heterogeneous_states(w.n, seed)
        rho = w.rho
        applied = _broken_ring(w.n) if inject_fault == "nonstochastic" and name == "ring4" else w
        e0 = consensus_errors(states)
        for t in range(1, steps + 1):
            nxt = mix_joint(states, applied)
            res = check_contraction(states, nxt, rho, tol=tol)
            env = [rho ** t * e - e1 for e, e1 in zip(e0, consensus_errors(nxt))]
            worst = min(worst, *res.margins.values(), *env)
            states = nxt
        notes.append(f"{name}:rho={rho:.6f}")
    if abs(ring_lazy(4).rho - 1.0 / 3.0) > 1e-10:
        worst = min(worst, -abs(ring_lazy(4).rho - 1.0 / 3.0))
    return Outcome("consensus_contraction", worst >= -tol, worst, f">= {-tol:g} (min slack)",
                   detail=" ".join(notes))


def _cfl_run(cfg, fixed_eta=None):
    task = make_matfact_task(cfg.n_clients, cfg.rows, cfg.cols, cfg.rank,
                             np.random.default_rng([cfg.seed, 4]))
    states = init_states(task, cfg.rank, float(cfg.rank), cfg.seed)
    sched = PhaseSchedule(cfg.interval, cfg.periods)
    res = simulate(task, states, "adf", complete_uniform(cfg.n_clients), OptimizerSpec("theory"),
                   sched.total_steps, 1, sched, cfg.seed, fixed_eta=fixed_eta)
    return task, res


@_timed
def descent_cfl(cfg, tol=1e-10):
    _, res = _cfl_run(cfg)
    recs = res.trace + [res.final]
    residuals = []
    ok = True
    for r0, r1 in zip(recs[:-1], recs[1:]):
        c = check_descent(r0, r1, r0.eta, tol=tol)
        ok &= c.passed and c.details["centralized"]
        residuals.append(c.details["residual"])
    worst = max(residuals)
    return Outcome("descent_cfl", ok and worst <= tol, worst,
                   f"<= {tol:g} at all {len(residuals)} steps")


@_timed
def stationarity(cfg, tol=1e-9):
    task, first = _cfl_run(cfg)
    eta = min(first.etas)
    _, res = _cfl_run(cfg, fixed_eta=eta)
    # eta must stay below safety/L along the constant-step trajectory too
    sched = PhaseSchedule(cfg.interval, cfg.periods)
    states = init_states(task, cfg.rank, float(cfg.rank), cfg.seed)
    max_ratio = 0.0
    for ev in iterate_rounds(task, states, "adf", complete_uniform(cfg.n_clients),
                             OptimizerSpec("theory"), sched.total_steps, 1, sched, cfg.seed,
                             fixed_eta=eta):
        max_ratio = max(max_ratio, eta / theory_step_size(mean_pair(ev.before), task))
    lstar = matfact_optimum(task)
    c = check_stationarity_bound(res.trace, res.initial.loss_at_mean, lstar, eta, cfg.periods, cfg.interval, tol)
    ok = c.passed and max_ratio <= 1.0 + 1e-12
    return Outcome("stationarity_bound", ok, c.details["min_grad_sq"], f"<= {c.details['rhs']:.3e} + {tol:g}",
                   detail=f"eta={eta:.4g} slack={c.margins['bound']:.3e} eta/eta_theory<={max_ratio:.3f}")


@_timed
def dfl_convergence(cfg, tol=1e-6):
    task = make_matfact_task(cfg.dfl_clients, cfg.rows, cfg.cols, cfg.rank,
                             np.random.default_rng([cfg.seed, 5]), heterogeneity_mode="tail")
    states = init_states(task, cfg.rank, float(cfg.rank), cfg.seed, mode="heterogeneous",
                         init_b_scale=0.3)
    sched = PhaseSchedule(cfg.dfl_interval, max(1, cfg.dfl_steps // (2 * cfg.dfl_interval)))
    res = simulate(task, states, "adf", ring_lazy(cfg.dfl_clients), OptimizerSpec("theory"),
                   cfg.dfl_steps, 1, sched, cfg.seed)
    ra = res.final.consensus_err_a / res.initial.consensus_err_a
    rb = res.final.consensus_err_b / res.initial.consensus_err_b
    g = res.final.grad_norm_sq
    worst = max(ra, rb, g)
    return Outcome("dfl_convergence", max(ra, rb) <= tol and g <= tol, worst, f"<= {tol:g}",
                   detail=f"cons_ratio_a={ra:.2e} cons_ratio_b={rb:.2e} grad_sq={g:.2e}")


@_timed
def mismatch_signature(seed=0, n_clients=6, interval=5, rounds=40):
    task, states = _heterogeneous_states(n_clients, seed)
    w = ring_lazy(n_clients)
    sched = PhaseSchedule(interval, rounds // (2 * interval))
    # baseline: frozen-stack error is constant within every phase
    frozen_ok = True
    cur = states
    for ev in iterate_rounds(task, cur, "rolora_dfl", w, OptimizerSpec("theory"), rounds, 1, sched, seed):
        before = consensus_errors(ev.before)
        after = consensus_errors(ev.after)
        idx = 0 if ev.phase.value == "B" else 1  # frozen block index
        frozen_ok &= before[idx] == after[idx]
    # joint mixing: both stacks strictly shrink at every mixing step
    min_drop = np.inf
    for ev in iterate_rounds(task, states, "adf", w, OptimizerSpec("theory"), rounds, 1, sched, seed):
        pre = consensus_errors(ev.updated)
        post = consensus_errors(ev.after)
        for e0, e1 in zip(pre, post):
            min_drop = min(min_drop, (e0 - e1) if e0 > 0 else -np.inf)
    ok = frozen_ok and min_drop > 0
    return Outcome("phase_state_mismatch", ok, min_drop, "> 0 (min joint-mixing drop)",
                   detail=f"frozen_constant={frozen_ok}")


def fd_grad(loss_of, pair, h=1e-5):
    def one(mat, rebuild):
        g = np.zeros_like(mat)
        for idx in np.ndindex(mat.shape):
            up, dn = mat.copy(), mat.copy()
            up[idx] += h
            dn[idx] -= h
            g[idx] = (loss_of(rebuild(up)) - loss_of(rebuild(dn))) / (2 * h)
        return g
    return (one(pair.a, lambda a: pair.replace(a=a)), one(pair.b, lambda b: pair.replace(b=b)))


def _rel(g, ref):
    num = np.sqrt(np.sum((g[0] - ref[0]) ** 2) + np.sum((g[1] - ref[1]) ** 2))
    den = np.sqrt(np.sum(ref[0] ** 2) + np.sum(ref[1] ** 2))
    return num / den


@_timed
def gradient_check(seed=0, instances=20):
    rng = np.random.default_rng([seed, 6])
    worst_mf = worst_lg = 0.0
    for k in range(instances):
        task = make_matfact_task(3, 4, 4, 2, rng)
        pair = _random_pairs(rng, 1, 2, 4, 4, alpha=float(rng.uniform(0.5, 4)))[0]
        i = k % task.n_clients
        g = task.loss_grad(i, pair)[1]
        worst_mf = max(worst_mf, _rel((g.g_a, g.g_b), fd_grad(lambda p: task.loss(i, p), pair)))
        lt = make_logistic_task([[0.7, 0.3], [0.2, 0.8]], 25, 6, rng)
        pair = LoRAPair(rng.normal(size=(2, 2)), rng.normal(size=(6, 2)), 2.0)
        x, y = lt.train_x[0], lt.train_y[0]
        g = softmax_loss_grad(x, y, lt.base, pair)[1]
        ref = fd_grad(lambda p: softmax_loss_grad(x, y, lt.base, p)[0], pair)
        worst_lg = max(worst_lg, _rel((g.g_a, g.g_b), ref))
    ok = worst_mf <= 1e-6 and worst_lg <= 1e-5
    return Outcome("gradient_fd", ok, max(worst_mf / 1e-6, worst_lg / 1e-5), "<= 1 (err / tolerance)",
                   detail=f"matfact_rel={worst_mf:.2e} logistic_rel={worst_lg:.2e}")


def run_battery(cfg):
    """Every check in order; returns the list of outcomes."""
    return [
        cross_term_identity(cfg.seed),
        shared_block(cfg.seed),
        consensus_contraction(cfg.seed, inject_fault=cfg.inject_fault),
        descent_cfl(cfg),
        stationarity(cfg),
        dfl_convergence(cfg),
        mismatch_signature(cfg.seed),
        gradient_check(cfg.seed),
    ]
