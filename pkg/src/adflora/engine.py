"""Federated round loop for the five LoRA training methods.

A round is: every client runs ``local_steps`` optimizer steps on the block(s)
its phase allows, then the method's mixing rule is applied with the round's
mixing matrix. Local updates read only the client's own state, so the loop
below evaluates them sequentially with the same result as any parallel
schedule.
"""

import enum
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import NumericError, PreconditionError
from .linalg import frobenius_norm
from .lora import LoRAPair, Phase, PhaseSchedule, cross_term, init_pair, phase_at
from .optim import AdamConfig, BlockMoments, SgdConfig, adam_step, sgd_step, theory_step_size
from .tasks import LogisticTask, accuracy
from .topology import GossipProcess, MixingMatrix, complete_uniform, draw_gossip_round

INIT_STREAM = 0x1417
BATCH_STREAM = 0xBA7C


class Method(str, enum.Enum):
    NAIVE = "naive"
    FFA = "ffa"
    ROLORA_CFL = "rolora_cfl"
    ROLORA_DFL = "rolora_dfl"
    ADF = "adf"

    @property
    def alternating(self):
        return self in (Method.ROLORA_CFL, Method.ROLORA_DFL, Method.ADF)


@dataclass(frozen=True, eq=False)
class ClientState:
    id: int
    pair: LoRAPair
    moments: BlockMoments
    shard: int


@dataclass(frozen=True, eq=False)
class ParamStack:
    """Client parameters as columns: ``u_a[:, i]`` is client ``i``'s flattened ``a``."""

    u_a: np.ndarray
    u_b: np.ndarray


def param_stack(states):
    return ParamStack(np.stack([s.pair.a.ravel() for s in states], axis=1),
                      np.stack([s.pair.b.ravel() for s in states], axis=1))


def consensus_error(u):
    """Frobenius distance of a stacked matrix from its column mean."""
    return frobenius_norm(u - u.mean(axis=1, keepdims=True))


def consensus_errors(states):
    st = param_stack(states)
    return consensus_error(st.u_a), consensus_error(st.u_b)


def mean_pair(states):
    return LoRAPair(np.mean([s.pair.a for s in states], axis=0),
                    np.mean([s.pair.b for s in states], axis=0),
                    states[0].pair.alpha)


@dataclass
class MetricsRecord:
    step: int
    phase: str
    mean_loss: float
    grad_norm_sq: float
    consensus_err_a: float
    consensus_err_b: float
    cross_term_norm: float
    mean_accuracy: float = None
    # in-memory only, not part of the CSV schema
    local_loss: float = None
    loss_at_mean: float = None
    grad_norm_sq_active: float = None
    eta: float = None

    def as_dict(self):
        return asdict(self)


@dataclass
class OptimizerSpec:
    """``kind`` is ``sgd`` (fixed eta), ``theory`` (auto eta) or ``adam``."""

    kind: str = "theory"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    reset_moments_on_switch: bool = False

    def __post_init__(self):
        if self.kind not in ("sgd", "theory", "adam"):
            raise PreconditionError(f"unknown optimizer kind {self.kind!r}")


@dataclass
class RunResult:
    trace: list
    final: MetricsRecord
    initial: MetricsRecord
    states: list
    etas: list
    wall_time: float = 0.0


# -- per-client update and mixing ------------------------------------------


def local_update(client, task, phase, optimizer, local_steps, eta=None, rng=None,
                 batch_size=None, round_index=None):
    """Run ``local_steps`` optimizer steps on the client's own shard."""
    phase = Phase(phase)
    pair, moments = client.pair, client.moments
    for k in range(local_steps):
        loss, grads = task.loss_grad(client.shard, pair, rng=rng, batch_size=batch_size)
        step = (round_index, k) if round_index is not None else k
        if not np.isfinite(loss):
            raise NumericError("non-finite loss", client=client.id, step=step)
        if optimizer.kind == "adam":
            pair, moments = adam_step(pair, grads, phase, optimizer.adam, moments,
                                      client=client.id, step=step)
        else:
            cfg = optimizer.sgd if eta is None else replace(optimizer.sgd, eta=eta)
            pair = sgd_step(pair, grads, phase, cfg, client=client.id, step=step)
    if local_steps == 0:
        return client
    return replace(client, pair=pair, moments=moments)


def _mix(stack, w):
    # row i of the result is sum_j w_ij x_j
    return np.einsum("ij,j...->i...", w, stack)


def mix_joint(states, w):
    """Gossip-average both factors of every client with ``w``."""
    ww = w.w if isinstance(w, MixingMatrix) else np.asarray(w)
    a = _mix(np.stack([s.pair.a for s in states]), ww)
    b = _mix(np.stack([s.pair.b for s in states]), ww)
    return [replace(s, pair=s.pair.replace(a=a[i], b=b[i])) for i, s in enumerate(states)]


def mix_active_only(states, w, phase):
    """Gossip-average only the block being trained; the frozen one is passed through."""
    phase = Phase(phase)
    if phase is Phase.BOTH:
        return mix_joint(states, w)
    ww = w.w if isinstance(w, MixingMatrix) else np.asarray(w)
    if phase is Phase.A:
        a = _mix(np.stack([s.pair.a for s in states]), ww)
        return [replace(s, pair=s.pair.replace(a=a[i])) for i, s in enumerate(states)]
    b = _mix(np.stack([s.pair.b for s in states]), ww)
    return [replace(s, pair=s.pair.replace(b=b[i])) for i, s in enumerate(states)]


def method_phase(method, t, schedule=None, ffa_freeze="a"):
    method = Method(method)
    if method.alternating:
        return phase_at(t, schedule)
    if method is Method.FFA:
        return Phase.B if ffa_freeze == "a" else Phase.A
    return Phase.BOTH


def round_mixing_matrix(topology, t):
    if isinstance(topology, GossipProcess):
        return draw_gossip_round(topology, t)
    return topology


def apply_mixing(method, states, w, phase):
    method = Method(method)
    if method is Method.ROLORA_CFL:
        return mix_active_only(states, complete_uniform(len(states)), phase)
    if method in (Method.ROLORA_DFL, Method.FFA):
        return mix_active_only(states, w, phase)
    return mix_joint(states, w)


# -- initialisation ----------------------------------------------------------


def init_states(task, rank, alpha, seed, mode="homogeneous", init_b_scale=0.1):
    """Client states for a run.

    ``homogeneous`` gives every client the same standard LoRA init.
    ``heterogeneous`` draws independent ``a`` per client and a nonzero random
    ``b`` of scale ``init_b_scale``, so both stacks start out of consensus.
    """
    m, n = task.shape
    rng = np.random.default_rng([seed, INIT_STREAM])
    if mode == "homogeneous":
        shared = init_pair(rank, n, m, alpha, rng)
        pairs = [shared] * task.n_clients
    elif mode == "heterogeneous":
        pairs = []
        for _ in range(task.n_clients):
            p = init_pair(rank, n, m, alpha, rng)
            pairs.append(p.replace(b=init_b_scale * rng.normal(size=p.b.shape)))
    else:
        raise PreconditionError(f"unknown init mode {mode!r}")
    return [ClientState(i, p, BlockMoments.zeros_like(p), shard=i) for i, p in enumerate(pairs)]


# -- metrics -----------------------------------------------------------------


def compute_metrics(states, task, phase, step=0, eta=None, with_accuracy=True):
    """Metrics of a set of client states.

    ``mean_loss`` averages the global objective over the client models;
    ``local_loss`` averages each client's loss on its own shard. Accuracy
    scores every client model on the pooled held-out data.
    """
    phase = Phase(phase)
    pairs = [s.pair for s in states]
    mean = mean_pair(states)
    grad = task.global_grad(mean)
    err_a, err_b = consensus_errors(states)
    acc = None
    if with_accuracy and isinstance(task, LogisticTask):
        acc = float(np.mean([accuracy(task, s.shard, s.pair, split="pooled") for s in states]))
    return MetricsRecord(
        step=step,
        phase=phase.value,
        mean_loss=float(np.mean([task.global_loss(p) for p in pairs])),
        grad_norm_sq=grad.norm_sq(),
        consensus_err_a=err_a,
        consensus_err_b=err_b,
        cross_term_norm=frobenius_norm(cross_term(pairs)),
        mean_accuracy=acc,
        local_loss=float(np.mean([task.loss(s.shard, s.pair) for s in states])),
        loss_at_mean=task.global_loss(mean),
        grad_norm_sq_active=grad.norm_sq(a=phase.trains_a(), b=phase.trains_b()),
        eta=eta,
    )


# -- round loop --------------------------------------------------------------


@dataclass
class RoundEvent:
    """One round: states before, after local updates, and after mixing."""

    t: int
    phase: Phase
    eta: float
    w: MixingMatrix
    before: list
    updated: list
    after: list


def iterate_rounds(task, states, method, topology, optimizer, rounds, local_steps=1,
                   schedule=None, seed=0, batch_size=None, ffa_freeze="a", fixed_eta=None):
    """Yield a ``RoundEvent`` per round.

    With the ``theory`` optimizer the step size is recomputed from the mean
    pair whenever the phase changes (every round for non-alternating
    methods) unless ``fixed_eta`` pins it.
    """
    method = Method(method)
    if method.alternating and schedule is None:
        raise PreconditionError(f"method {method.value} needs a PhaseSchedule")
    eta = None
    prev_phase = None
    for t in range(rounds):
        phase = method_phase(method, t, schedule, ffa_freeze)
        if optimizer.kind == "theory":
            if fixed_eta is not None:
                eta = fixed_eta
            elif phase is not prev_phase or phase is Phase.BOTH:
                eta = theory_step_size(mean_pair(states), task, optimizer.sgd.safety,
                                       optimizer.sgd.eta_max)
        elif optimizer.kind == "sgd":
            eta = optimizer.sgd.eta if fixed_eta is None else fixed_eta
        else:
            eta = optimizer.adam.eta
        if (optimizer.kind == "adam" and optimizer.reset_moments_on_switch
                and prev_phase is not None and phase is not prev_phase and phase is not Phase.BOTH):
            states = [replace(s, moments=s.moments.reset(phase)) for s in states]
        updated = []
        for s in states:
            rng = np.random.default_rng([seed, BATCH_STREAM, s.id, t]) if batch_size else None
            updated.append(local_update(s, task, phase, optimizer, local_steps,
                                        eta=eta if optimizer.kind != "adam" else None,
                                        rng=rng, batch_size=batch_size, round_index=t))
        w = round_mixing_matrix(topology, t)
        after = apply_mixing(method, updated, w, phase)
        yield RoundEvent(t, phase, eta, w, states, updated, after)
        states = after
        prev_phase = phase


def simulate(task, states, method, topology, optimizer, rounds, local_steps=1,
             schedule=None, seed=0, batch_size=None, ffa_freeze="a", eval_every=1,
             fixed_eta=None):
    """Run the loop and record metrics of the pre-round state every ``eval_every`` rounds."""
    start = time.perf_counter()
    method = Method(method)
    if method.alternating and schedule is None:
        raise PreconditionError(f"method {method.value} needs a PhaseSchedule")
    trace, etas = [], []
    initial = compute_metrics(states, task, method_phase(method, 0, schedule, ffa_freeze), step=0)
    for ev in iterate_rounds(task, states, method, topology, optimizer, rounds, local_steps,
                             schedule, seed, batch_size, ffa_freeze, fixed_eta):
        etas.append(ev.eta)
        if ev.t % eval_every == 0:
            rec = initial if ev.t == 0 else compute_metrics(ev.before, task, ev.phase, step=ev.t)
            rec.eta = ev.eta
            trace.append(rec)
        states = ev.after
    final = compute_metrics(states, task, method_phase(method, rounds, schedule, ffa_freeze),
                            step=rounds)
    return RunResult(trace, final, initial, states, etas, time.perf_counter() - start)
