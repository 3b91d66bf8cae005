"""Baseline, SAM and gSAM training steps.

gSAM treats the worst-case weight offset as the solution of an inner
problem: delta is found by projected gradient ascent inside the rho-ball,
and theta moves along an implicit hypergradient whose inverse-Hessian factor
is a truncated Neumann series of Hessian-vector products.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import FlatVector

log = logging.getLogger(__name__)

MODES = ("baseline", "sam", "gsam")


class NeumannDivergenceError(FloatingPointError):
    pass


class StepAbortedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    inner_lr: float = 0.01
    lr: float = 1e-3
    inner_steps: int = 3
    neumann_terms: int = 5
    neumann_alpha: float | None = None  # None -> inner_lr
    warm_start: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.inner_lr <= 0 or self.lr <= 0:
            raise ValueError("step sizes must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.neumann_terms < 0:
            raise ValueError("neumann_terms must be >= 0")
        if self.neumann_alpha is not None and self.neumann_alpha <= 0:
            raise ValueError("neumann_alpha must be > 0")

    @property
    def alpha(self) -> float:
        return self.inner_lr if self.neumann_alpha is None else self.neumann_alpha


@dataclass
class Perturbation:
    delta: FlatVector
    rho: float
    degenerate: bool = False
    trace: list = field(default_factory=list)  # loss at each inner iterate, delta_0 .. delta_T

    def norm(self) -> float:
        return self.delta.norm()


def project_ball(x: FlatVector, rho: float) -> FlatVector:
    """Nearest point of the radius-rho l2 ball: rho * x / max(rho, |x|)."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    n = x.norm()
    if n <= rho:
        return x
    return x * (rho / n)


def sam_perturbation(grad: FlatVector, rho: float) -> Perturbation:
    """rho * g / |g|, the maximizer of the linearized loss on the ball."""
    n = grad.norm()
    if n < 1e-12:
        return Perturbation(FlatVector.zeros_like(grad), rho, degenerate=True)
    return Perturbation(grad * (rho / n), rho)


def _restrict(vec: FlatVector, rows: np.ndarray) -> FlatVector:
    """Rows of a full-table vector (support = arange) as a FlatVector over ``rows``."""
    return FlatVector(vec.values[rows], rows)


def inner_ascent(objective, theta, cfg: SamConfig, start: FlatVector | None = None) -> Perturbation:
    """T steps of delta <- P_rho[delta + inner_lr * dL/d delta] at theta + delta.

    ``objective`` is a program ``(theta, delta) -> loss`` whose ``rows``
    attribute names the perturbed rows.
    """
    theta = _flat(theta)
    rows = objective.rows
    if start is None:
        delta = FlatVector(np.zeros((len(rows),) + theta.values.shape[1:]), rows)
    else:
        delta = project_ball(start, cfg.rho)
    trace = []
    for _ in range(cfg.inner_steps):
        loss, tape = ad.evaluate(objective, theta, delta)
        trace.append(loss)
        g = ad.gradient(tape, "delta")
        delta = project_ball(delta + g * cfg.inner_lr, cfg.rho)
    loss, _ = ad.evaluate(objective, theta, delta)
    trace.append(loss)
    if loss < trace[0] - 1e-9:
        log.warning("inner ascent lowered the loss: %.6g -> %.6g", trace[0], loss)
    return Perturbation(delta, cfg.rho, trace=trace)


def neumann_apply(hvp, v: FlatVector, terms: int, alpha: float = 1.0) -> FlatVector:
    """alpha * sum_{j=0..J} (I - alpha H)^j v, using only products with H."""
    p = v
    total = v
    limit = 1e6 * max(v.norm(), 1e-300)
    for _ in range(terms):
        p = p - hvp(p) * alpha
        if p.norm() > limit:
            raise NeumannDivergenceError(
                f"Neumann series grew past 1e6x its input; use a smaller alpha (now {alpha})")
        total = total + p
    return total * alpha


def hypergradient(objective, theta, pert: Perturbation, cfg: SamConfig, inner=None):
    """Implicit gradient of L_out(theta, delta*(theta)).

    By default the inner objective is the negated outer one (the gSAM
    setting). Pass ``inner`` to use a separate inner program over the same
    (theta, delta) leaves. Returns (hypergradient, outer loss, info).
    """
    theta = _flat(theta)
    delta = pert.delta
    if inner is None:
        so = ad.SecondOrder(objective, theta, delta)
        direct, g_delta = so.grad_theta, so.grad_delta
        loss = so.loss

        def h_in(v):
            return -so.hvp(v)

        def mixed_in(v):
            return -so.mixed_vhp(v)
    else:
        loss, tape = ad.evaluate(objective, theta, delta)
        direct, g_delta = ad.gradient(tape, "theta"), ad.gradient(tape, "delta")
        so = ad.SecondOrder(inner, theta, delta)
        h_in, mixed_in = so.hvp, so.mixed_vhp
    p = neumann_apply(h_in, g_delta, cfg.neumann_terms, cfg.alpha)
    indirect = mixed_in(p)
    return direct - indirect, loss, {"direct_norm": direct.norm(), "indirect_norm": indirect.norm()}


def _flat(x) -> FlatVector:
    return x if isinstance(x, FlatVector) else FlatVector(np.asarray(x, dtype=np.float64))


@dataclass
class OptimizerState:
    """Adam moments over the full parameter table plus run bookkeeping."""

    mode: str
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    prev_delta: FlatVector | None = None

    @classmethod
    def create(cls, mode: str, shape, lr: float) -> "OptimizerState":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return cls(mode, np.zeros(shape), np.zeros(shape), 0, lr)


@dataclass
class StepReport:
    mode: str
    loss_before: float
    loss_after: float
    delta_norm: float
    grad_norm: float
    degenerate: bool = False
    lr: float = 0.0
    inner_trace: list = field(default_factory=list)


def step_direction(state: OptimizerState, theta: np.ndarray, objective, cfg: SamConfig):
    """Gradient the optimizer will follow for this mode; returns (grad, loss at theta, perturbation)."""
    full = FlatVector(theta)
    if state.mode == "baseline":
        loss, tape = ad.evaluate(objective, full)
        return ad.gradient(tape, "theta"), loss, None
    if state.mode == "sam":
        loss, tape = ad.evaluate(objective, full)
        g = ad.gradient(tape, "theta", rows=objective.rows)
        pert = sam_perturbation(g, cfg.rho)
        _, tape = ad.evaluate(objective, full, pert.delta)
        return ad.gradient(tape, "theta"), loss, pert
    start = None
    if cfg.warm_start and state.prev_delta is not None:
        start = _carry_over(state.prev_delta, objective.rows, theta.shape[1:])
    pert = inner_ascent(objective, full, cfg, start)
    hg, _, _ = hypergradient(objective, full, pert, cfg)
    if start is None:
        loss = pert.trace[0]
    else:
        loss = objective.loss(theta)
    state.prev_delta = pert.delta
    return hg, loss, pert


def _carry_over(prev: FlatVector, rows: np.ndarray, tail) -> FlatVector:
    out = np.zeros((len(rows),) + tuple(tail))
    common, ia, ib = np.intersect1d(prev.support, rows, return_indices=True)
    out[ib] = prev.values[ia]
    return FlatVector(out, rows)


def _adam(state: OptimizerState, g: np.ndarray, cfg: SamConfig, lr: float):
    t = state.step + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    mhat = m / (1 - cfg.beta1 ** t)
    vhat = v / (1 - cfg.beta2 ** t)
    return lr * mhat / (np.sqrt(vhat) + cfg.eps), m, v


def train_step(state: OptimizerState, theta: np.ndarray, objective, cfg: SamConfig):
    """One update of theta for ``state.mode``; returns (new theta, StepReport)."""
    try:
        g, loss_before, pert = step_direction(state, theta, objective, cfg)
    except (FloatingPointError, ad.AutodiffError) as exc:
        raise StepAbortedError(f"step {state.step}: {exc}") from exc

    for attempt in range(2):
        upd, m, v = _adam(state, g.values, cfg, state.lr)
        new = theta - upd
        loss_after = float("nan")
        if np.all(np.isfinite(new)):
            try:
                loss_after = objective.loss(new)
            except FloatingPointError:
                pass
        if np.isfinite(loss_after):
            break
        if attempt == 0:
            state.lr *= 0.5
            log.warning("non-finite update rejected; lr halved to %g", state.lr)
    else:
        raise StepAbortedError(f"step {state.step}: non-finite update after halving lr")

    state.m, state.v = m, v
    state.step += 1
    report = StepReport(
        mode=state.mode,
        loss_before=loss_before,
        loss_after=loss_after,
        delta_norm=0.0 if pert is None else pert.norm(),
        grad_norm=g.norm(),
        degenerate=False if pert is None else pert.degenerate,
        lr=state.lr,
        inner_trace=[] if pert is None else pert.trace,
    )
    return new, report
