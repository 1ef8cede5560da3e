"""Executable forms of the consensus, descent and stationarity guarantees."""

from dataclasses import dataclass, field

from .engine import ParamStack, consensus_error, param_stack

CONTRACTION_TOL = 1e-10
DESCENT_TOL = 1e-10
CONSENSUS_ZERO = 1e-12
STATIONARITY_TOL = 1e-9


@dataclass
class CheckResult:
    passed: bool
    margins: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed


def _stack(states):
    return states if isinstance(states, ParamStack) else param_stack(states)


def check_contraction(states_before, states_after, rho, tol=CONTRACTION_TOL):
    """Consensus contraction across a mixing-only step.

    ``margins[block]`` is ``rho * before - after``; the check passes when
    every margin is at least ``-tol``.
    """
    before, after = _stack(states_before), _stack(states_after)
    margins, details = {}, {}
    for name, u0, u1 in (("a", before.u_a, after.u_a), ("b", before.u_b, after.u_b)):
        e0, e1 = consensus_error(u0), consensus_error(u1)
        margins[name] = rho * e0 - e1
        details[name] = {"before": e0, "after": e1}
    return CheckResult(all(m >= -tol for m in margins.values()), margins, details)


def check_descent(record_t, record_t1, eta, tol=DESCENT_TOL):
    """Sufficient decrease of the global loss at the mean iterate.

    ``residual = L(t+1) - L(t) + eta/2 * |grad_u L(t)|^2``. When the
    consensus error at ``t`` is below 1e-12 the residual must be
    ``<= tol``; otherwise the step is only reported, with the residual
    divided by the squared consensus error.
    """
    residual = (record_t1.loss_at_mean - record_t.loss_at_mean
                + 0.5 * eta * record_t.grad_norm_sq_active)
    cons_sq = record_t.consensus_err_a ** 2 + record_t.consensus_err_b ** 2
    centralized = max(record_t.consensus_err_a, record_t.consensus_err_b) < CONSENSUS_ZERO
    details = {"residual": residual, "consensus_sq": cons_sq, "centralized": centralized}
    if centralized:
        return CheckResult(residual <= tol, {"descent": tol - residual}, details)
    details["ratio"] = residual / cons_sq
    return CheckResult(True, {"descent": tol - residual}, details)


def stationarity_rhs(l0, lstar, eta, periods, interval):
    return 2.0 * (l0 - lstar) / (eta * 2 * periods * interval)


def check_stationarity_bound(trace, l0, lstar, eta, periods, interval, tol=STATIONARITY_TOL):
    """``min_t |grad_{u_t} L|^2 <= 2 (L0 - L*) / (eta 2KT)`` over the first 2KT records."""
    horizon = 2 * periods * interval
    window = [r for r in trace if r.step < horizon]
    lhs = min(r.grad_norm_sq_active for r in window)
    rhs = stationarity_rhs(l0, lstar, eta, periods, interval)
    return CheckResult(lhs <= rhs + tol, {"bound": rhs - lhs},
                       {"min_grad_sq": lhs, "rhs": rhs, "steps": len(window)})
