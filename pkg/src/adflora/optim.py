"""Block-wise SGD and AdamW for LoRA pairs.

Only the active block is touched by a step. The frozen block's parameters
and moments are passed through as the same objects.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, PreconditionError
from .lora import Phase
from .tasks import MatFactTask, matfact_block_smoothness

L_FLOOR = 1e-12


@dataclass(frozen=True)
class SgdConfig:
    eta: float = 0.1
    safety: float = 0.9
    eta_max: float = 1.0

    def __post_init__(self):
        if self.eta <= 0:
            raise PreconditionError("eta must be positive")
        if not 0 < self.safety <= 1:
            raise PreconditionError("safety must lie in (0, 1]")


@dataclass(frozen=True)
class AdamConfig:
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise PreconditionError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise PreconditionError("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class BlockMoments:
    m_a: np.ndarray
    v_a: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    step_count_a: int = 0
    step_count_b: int = 0

    @classmethod
    def zeros_like(cls, pair):
        return cls(np.zeros_like(pair.a), np.zeros_like(pair.a),
                   np.zeros_like(pair.b), np.zeros_like(pair.b))

    def reset(self, block):
        if block is Phase.A:
            return replace(self, m_a=np.zeros_like(self.m_a), v_a=np.zeros_like(self.v_a), step_count_a=0)
        return replace(self, m_b=np.zeros_like(self.m_b), v_b=np.zeros_like(self.v_b), step_count_b=0)


def _check_grads(grads, client, step):
    if not grads.is_finite():
        raise NumericError("non-finite gradient", client=client, step=step)


def sgd_step(pair, grads, phase, cfg, client=None, step=None):
    _check_grads(grads, client, step)
    phase = Phase(phase)
    a = pair.a - cfg.eta * grads.g_a if phase.trains_a() else pair.a
    b = pair.b - cfg.eta * grads.g_b if phase.trains_b() else pair.b
    return pair.replace(a=a, b=b)


def _adam_block(p, g, m, v, t, cfg):
    t += 1
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    p = p * (1.0 - cfg.eta * cfg.weight_decay)
    p = p - cfg.eta * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return p, m, v, t


def adam_step(pair, grads, phase, cfg, moments, client=None, step=None):
    """Bias-corrected Adam with decoupled weight decay on the active block(s)."""
    _check_grads(grads, client, step)
    phase = Phase(phase)
    a, b = pair.a, pair.b
    mo = moments
    if phase.trains_a():
        a, m, v, t = _adam_block(a, grads.g_a, mo.m_a, mo.v_a, mo.step_count_a, cfg)
        mo = replace(mo, m_a=m, v_a=v, step_count_a=t)
    if phase.trains_b():
        b, m, v, t = _adam_block(b, grads.g_b, mo.m_b, mo.v_b, mo.step_count_b, cfg)
        mo = replace(mo, m_b=m, v_b=v, step_count_b=t)
    return pair.replace(a=a, b=b), mo


def theory_step_size(pair, task, safety=0.9, eta_max=1.0):
    """``safety / max(L_a, L_b)`` for the matrix-factorization objective.

    Floored at ``L = 1e-12`` and capped at ``eta_max`` so the ``B = 0`` start
    (where ``L_a = 0``) stays well defined.
    """
    if not isinstance(task, MatFactTask):
        raise PreconditionError("theory step size needs a matrix-factorization task")
    l_a, l_b = matfact_block_smoothness(pair)
    return min(safety / max(l_a, l_b, L_FLOOR), eta_max)
