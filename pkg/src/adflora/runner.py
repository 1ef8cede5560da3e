"""Build engine inputs from an ``ExperimentConfig`` and run it."""

import numpy as np

from .engine import OptimizerSpec, init_states, simulate
from .lora import PhaseSchedule
from .optim import AdamConfig, SgdConfig
from .tasks import load_task, make_logistic_task, make_matfact_task
from .topology import GossipProcess, complete_uniform, identity_topology, ring_lazy

TASK_STREAM = 0x7A5C


def build_task(cfg, seed):
    tc = cfg.task
    if tc.data_file:
        return load_task(tc.data_file)
    rng = np.random.default_rng([tc.seed if tc.seed is not None else seed, TASK_STREAM])
    if tc.kind == "matfact":
        return make_matfact_task(tc.n_clients, tc.rows, tc.cols, cfg.lora.rank, rng,
                                 heterogeneity=tc.heterogeneity,
                                 heterogeneity_mode=tc.heterogeneity_mode,
                                 signal_scale=tc.signal_scale, tail_scale=tc.tail_scale,
                                 base_scale=tc.base_scale)
    return make_logistic_task(tc.proportions, tc.samples_per_client, tc.n_features, rng,
                              class_separation=tc.class_separation,
                              holdout_fraction=tc.holdout_fraction, base_scale=tc.base_scale)


def build_topology(cfg, n_clients, seed):
    kind = cfg.topology.kind
    if kind == "complete":
        return complete_uniform(n_clients)
    if kind == "identity":
        return identity_topology(n_clients)
    if kind == "ring":
        return ring_lazy(n_clients)
    return GossipProcess(n_clients, cfg.topology.p, seed)


def build_optimizer(cfg):
    oc = cfg.optimizer
    return OptimizerSpec(
        kind=oc.kind,
        sgd=SgdConfig(eta=oc.eta, safety=oc.safety, eta_max=oc.eta_max),
        adam=AdamConfig(eta=oc.eta, beta1=oc.beta1, beta2=oc.beta2, epsilon=oc.epsilon,
                        weight_decay=oc.weight_decay),
        reset_moments_on_switch=oc.reset_moments_on_switch,
    )


def build_schedule(cfg):
    if not cfg.method.alternating:
        return None
    periods = cfg.periods or max(1, -(-cfg.rounds // (2 * cfg.method.interval)))
    return PhaseSchedule(cfg.method.interval, periods)


def run_experiment(cfg, seed=None):
    """Run one seed of ``cfg``; returns the engine's ``RunResult``."""
    seed = cfg.seeds[0] if seed is None else seed
    task = build_task(cfg, seed)
    states = init_states(task, cfg.lora.rank, cfg.lora.alpha, seed, cfg.lora.init,
                         cfg.lora.init_b_scale)
    batch = getattr(cfg.task, "batch_size", None)
    return simulate(task, states, cfg.method.name, build_topology(cfg, task.n_clients, seed),
                    build_optimizer(cfg), cfg.rounds, cfg.local_steps, build_schedule(cfg),
                    seed=seed, batch_size=batch, ffa_freeze=cfg.method.ffa_freeze,
                    eval_every=cfg.eval_every)
