"""Numerical checks of the first-order picture behind loss-discrepancy pruning.

All checks read an :class:`~emaprune.trainer.Instrumentation` recorded by an
SGD run. With SGD and the reference updated after the online step,

    xi_t - theta_t = -sum_{j=1..t} (1-beta)^j dtheta_{t-j} = alpha * v_t,

where ``v_t`` is the EMA of past kept-subset gradients. A first-order Taylor
expansion then gives ``L(x, xi_t) - L(x, theta_t) ~ grad L(x, theta_t) . (xi_t - theta_t)``
with an O(|dtheta|^2) remainder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import binomtest

from . import model as M
from .errors import PreconditionError
from .pruning import rank_select
from .trainer import Instrumentation


class UnsupportedRunError(PreconditionError):
    """The instrumented run does not satisfy a check's assumptions."""


def _require_sgd(inst: Instrumentation):
    if inst.config.optimizer != "sgd":
        raise UnsupportedRunError("theory checks need an sgd-trained run; adam breaks the "
                                  "displacement identity")


def finite_difference_oracle(params, sample: M.Sample, spec: M.ModelSpec,
                             step_size: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``forward_loss``, one coordinate at a time."""
    if not step_size > 0:
        raise PreconditionError("step_size must be positive")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for k in range(params.shape[0]):
        orig = params[k]
        params[k] = orig + step_size
        up = M.forward_loss(params, sample, spec)
        params[k] = orig - step_size
        down = M.forward_loss(params, sample, spec)
        params[k] = orig
        grad[k] = (up - down) / (2.0 * step_size)
    return grad


def relative_error(a, b, floor: float = 1e-3) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# --- displacement identity and drift bound -------------------------------------

def displacement_identity_residuals(inst: Instrumentation) -> np.ndarray:
    """``|| xi_t - theta_t + sum_j (1-beta)^j dtheta_{t-j} ||`` for every step.

    The sum is expanded directly, not by recursion.
    """
    _require_sgd(inst)
    dth = inst.deltas()
    beta = inst.beta
    out = np.empty(len(inst.steps))
    for t, rec in enumerate(inst.steps):
        acc = rec.xi - rec.theta
        for j in range(1, t + 1):
            acc = acc + (1.0 - beta) ** j * dth[t - j]
        out[t] = np.linalg.norm(acc)
    return out


def drift_norms(inst: Instrumentation) -> np.ndarray:
    return np.array([np.linalg.norm(r.xi - r.theta) for r in inst.steps])


def drift_bound_margins(inst: Instrumentation, form: str = "closed") -> np.ndarray:
    """Bound minus measured drift per step; negative entries are violations.

    ``form="closed"`` uses ``(1-beta)/beta * eps_t``; ``form="sum"`` uses
    ``sum_{j<=t} (1-beta)^j * eps_t``, with ``eps_t`` the largest update seen
    before step ``t``.
    """
    beta = inst.beta
    if beta == 0.0 and form == "closed":
        raise UnsupportedRunError("closed-form drift bound is infinite at beta = 0")
    norms = np.linalg.norm(inst.deltas(), axis=1)
    drift = drift_norms(inst)
    margins = np.empty(len(drift))
    for t in range(len(drift)):
        eps = norms[:t].max() if t > 0 else 0.0
        if form == "closed":
            bound = (1.0 - beta) / beta * eps
        else:
            bound = sum((1.0 - beta) ** j for j in range(1, t + 1)) * eps
        margins[t] = bound - drift[t]
    return margins


# --- first-order identity -------------------------------------------------------

@dataclass
class FirstOrderReport:
    step: int
    ids: np.ndarray
    loss_discrepancy: np.ndarray      # L(x, xi) - L(x, theta), signed
    first_order_term: np.ndarray      # grad L(x, theta) . (xi - theta)
    alpha_form: np.ndarray            # alpha * grad L(x, theta) . v_ema
    trapezoid_residual: np.ndarray    # exact for quadratic losses
    displacement_error: float         # || (xi - theta) - alpha * v_ema ||
    identity_error: float
    epsilon_proxy: float
    displacement_norm: float

    @property
    def residual(self) -> np.ndarray:
        return self.loss_discrepancy - self.first_order_term

    @property
    def mean_abs_residual(self) -> float:
        return float(np.mean(np.abs(self.residual)))

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))


def check_first_order(inst: Instrumentation, step: int) -> FirstOrderReport:
    _require_sgd(inst)
    rec, X, y = inst.batch(step)
    spec = inst.spec
    loss_t, G = M.sample_gradients(rec.theta, X, y, spec)
    loss_r, G_ref = M.sample_gradients(rec.xi, X, y, spec)
    d = rec.xi - rec.theta
    fo = G @ d
    disc = loss_r - loss_t
    dth = inst.deltas()
    chain = d.copy()
    for j in range(1, step + 1):
        chain += (1.0 - inst.beta) ** j * dth[step - j]
    norms = np.linalg.norm(dth[:step], axis=1)
    return FirstOrderReport(
        step=step,
        ids=rec.batch_ids,
        loss_discrepancy=disc,
        first_order_term=fo,
        alpha_form=inst.alpha * (G @ rec.v_ema),
        trapezoid_residual=disc - 0.5 * ((G + G_ref) @ d),
        displacement_error=float(np.linalg.norm(d - inst.alpha * rec.v_ema)),
        identity_error=float(np.linalg.norm(chain)),
        epsilon_proxy=float(norms.max()) if step > 0 else 0.0,
        displacement_norm=float(np.linalg.norm(d)),
    )


def residual_scaling_ratio(inst_full: Instrumentation, inst_half: Instrumentation,
                           steps=None) -> float:
    """Mean |residual| at learning rate alpha over the same at alpha / 2."""
    def pooled(inst):
        idx = range(1, len(inst.steps)) if steps is None else steps
        return np.mean(np.concatenate([np.abs(check_first_order(inst, s).residual) for s in idx]))
    den = pooled(inst_half)
    if den == 0.0:
        return float("nan")
    return float(pooled(inst_full) / den)


# --- gradient projection coefficients -----------------------------------------

@dataclass
class ProjectionReport:
    step: int
    a_coefficient: Optional[float]
    b_coefficient: Optional[float]
    c_coefficient: Optional[float]
    d_coefficient: Optional[float]
    n_plus: int
    n_plus_selected: int
    n_minus: int
    n_minus_selected: int
    tau: Optional[float] = None
    selection: str = "recorded"

    @property
    def a_ok(self) -> Optional[bool]:
        if self.a_coefficient is None:
            return None
        slack = 0.0 if self.selection == "first_order" else (self.tau or 0.0)
        return self.a_coefficient >= -slack

    @property
    def b_ok(self) -> Optional[bool]:
        if self.b_coefficient is None:
            return None
        slack = 0.0 if self.selection == "first_order" else (self.tau or 0.0)
        return self.b_coefficient <= slack


def _perp_direction(v_hat: np.ndarray, seed: int) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal(v_hat.shape[0])
    u -= (u @ v_hat) * v_hat
    return u / np.linalg.norm(u)


def check_projection(inst: Instrumentation, step: int, selection: str = "recorded",
                first_order: Optional[FirstOrderReport] = None, perp_seed: int = 0) -> ProjectionReport:
    """Projection of (kept-subset mean gradient - group mean gradient) on the EMA gradient.

    ``selection="first_order"`` re-selects the batch by ``|grad . v_hat|`` instead of
    using the run's recorded choice; the sign pattern then holds exactly.
    """
    _require_sgd(inst)
    if selection not in ("recorded", "first_order"):
        raise PreconditionError(f"unknown selection {selection!r}")
    rec, X, y = inst.batch(step)
    _, G = M.sample_gradients(rec.theta, X, y, inst.spec)
    v = rec.v_ema
    vn = float(np.linalg.norm(v))
    empty = ProjectionReport(step, None, None, None, None, 0, 0, 0, 0, selection=selection)
    if vn == 0.0:
        return empty
    v_hat = v / vn
    p = G @ v_hat
    plus = p > 0.0
    minus = p < 0.0
    if selection == "first_order":
        sel_pos = rank_select(np.abs(p), rec.batch_ids, inst.config.keep_fraction)
    else:
        sel_pos = rec.selected
    chosen = np.zeros(len(p), dtype=bool)
    chosen[sel_pos] = True
    u = _perp_direction(v_hat, perp_seed + step)
    q = G @ u

    def coeff(group, vals):
        hat = group & chosen
        if not group.any() or not hat.any():
            return None
        return float(np.mean(vals[hat]) - np.mean(vals[group]))

    tau = None
    if selection == "recorded":
        first_order = first_order if first_order is not None else check_first_order(inst, step)
        if first_order.displacement_norm > 0:
            tau = 2.0 * first_order.max_abs_residual / first_order.displacement_norm
    return ProjectionReport(
        step=step,
        a_coefficient=coeff(plus, p),
        b_coefficient=coeff(minus, p),
        c_coefficient=coeff(plus, q),
        d_coefficient=coeff(minus, q),
        n_plus=int(plus.sum()),
        n_plus_selected=int((plus & chosen).sum()),
        n_minus=int(minus.sum()),
        n_minus_selected=int((minus & chosen).sum()),
        tau=tau,
        selection=selection,
    )


def perpendicular_sign_test(reports) -> dict:
    """Two-sided sign test that the perpendicular coefficients are centred on zero."""
    vals = [r.c_coefficient for r in reports if r.c_coefficient is not None]
    vals += [r.d_coefficient for r in reports if r.d_coefficient is not None]
    vals = [v for v in vals if v != 0.0]
    if not vals:
        return {"n": 0, "n_positive": 0, "p_value": None}
    k = sum(v > 0 for v in vals)
    return {"n": len(vals), "n_positive": int(k),
            "p_value": float(binomtest(k, len(vals), 0.5).pvalue)}


# --- Cauchy-Schwarz / gradient-norm connection ---------------------------------

@dataclass
class GrandBoundReport:
    step: int
    ids: np.ndarray
    dot: np.ndarray               # |grad . (xi - theta)|
    product: np.ndarray           # ||grad|| * ||xi - theta||
    grad_norm: np.ndarray
    implied_lower_bound: Optional[np.ndarray]
    violations: int = 0
    bound_violations: int = 0
    extra: dict = field(default_factory=dict)


def check_grand_bound(inst: Instrumentation, step: int, first_order: Optional[FirstOrderReport] = None,
                      samples: str = "selected") -> GrandBoundReport:
    """Cauchy-Schwarz on the first-order term, and the gradient-norm floor it implies."""
    _require_sgd(inst)
    first_order = first_order if first_order is not None else check_first_order(inst, step)
    rec, X, y = inst.batch(step)
    pos = rec.selected if samples == "selected" else np.arange(len(rec.batch_ids))
    _, G = M.sample_gradients(rec.theta, X[pos], y[pos], inst.spec)
    d = rec.xi - rec.theta
    dn = float(np.linalg.norm(d))
    gn = np.linalg.norm(G, axis=1)
    dot = np.abs(G @ d)
    prod = gn * dn
    lower = None
    bound_viol = 0
    if dn > 0:
        score = np.abs(first_order.loss_discrepancy[pos])
        lower = (score - np.abs(first_order.residual[pos])) / dn
        bound_viol = int(np.sum(lower > gn))
    return GrandBoundReport(step=step, ids=rec.batch_ids[pos], dot=dot, product=prod,
                            grad_norm=gn, implied_lower_bound=lower,
                            violations=int(np.sum(dot > prod)), bound_violations=bound_viol)
