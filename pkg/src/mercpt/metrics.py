"""Stability/plasticity metrics, gradient alignment and power-law fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares

from . import model as lm


class IncompleteLogError(ValueError):
    pass


class UndefinedForgettingError(ValueError):
    """Raised when a task has no earlier evaluation to compare against."""


class InsufficientDataError(ValueError):
    pass


class Record(NamedTuple):
    update_step: int
    eval_task: int
    val_loss: float
    train_task: int


@dataclass
class MetricsLog:
    """Validation losses over time.

    ``task_boundaries[i]`` is the update step at which training on task ``i``
    finished; the last boundary is the end of the run.
    """

    records: list[Record] = field(default_factory=list)
    task_boundaries: list[int] = field(default_factory=list)

    def add(self, update_step: int, eval_task: int, val_loss: float, train_task: int) -> None:
        if self.records and update_step < self.records[-1].update_step:
            raise ValueError("records must be appended in update_step order")
        self.records.append(Record(int(update_step), int(eval_task), float(val_loss), int(train_task)))

    def has_step(self, update_step: int) -> bool:
        return any(r.update_step == update_step for r in self.records)

    @property
    def tasks(self) -> list[int]:
        return sorted({r.eval_task for r in self.records})

    @property
    def final_step(self) -> int:
        if not self.records:
            raise IncompleteLogError("empty metrics log")
        return self.records[-1].update_step

    def loss_at(self, task: int, step: int) -> float:
        for r in reversed(self.records):
            if r.eval_task == task and r.update_step == step:
                return r.val_loss
        raise IncompleteLogError(f"no record for task {task} at step {step}")

    def series(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        rows = [(r.update_step, r.val_loss) for r in self.records if r.eval_task == task]
        steps, losses = zip(*rows) if rows else ((), ())
        return np.array(steps, dtype=np.int64), np.array(losses)


def forgetting_score(log: MetricsLog, task: int, at_step: int) -> float:
    """Loss at ``at_step`` minus the best loss recorded strictly earlier.

    Positive values are forgetting, negative values backward transfer.
    """
    current = log.loss_at(task, at_step)
    past = [r.val_loss for r in log.records if r.eval_task == task and r.update_step < at_step]
    if not past:
        raise UndefinedForgettingError(f"task {task} has no evaluation before step {at_step}")
    return current - min(past)


def final_losses(log: MetricsLog) -> dict[int, float]:
    step = log.final_step
    return {t: log.loss_at(t, step) for t in range(len(log.task_boundaries))}


def learned_losses(log: MetricsLog) -> dict[int, float]:
    if not log.task_boundaries:
        raise IncompleteLogError("log has no task boundaries")
    return {t: log.loss_at(t, step) for t, step in enumerate(log.task_boundaries)}


def retained_loss(log: MetricsLog) -> float:
    """Mean over tasks of the validation loss at the end of the run."""
    return float(np.mean(list(final_losses(log).values())))


def learned_loss(log: MetricsLog) -> float:
    """Mean over tasks of the validation loss right after training on that task."""
    return float(np.mean(list(learned_losses(log).values())))


def end_of_run_forgetting(log: MetricsLog) -> dict[int, float]:
    """Per task: final loss minus the loss recorded at the task's own boundary.

    Averaged over tasks this is exactly ``retained_loss - learned_loss``.
    """
    final, learned = final_losses(log), learned_losses(log)
    return {t: final[t] - learned[t] for t in final}


def mean_forgetting(log: MetricsLog) -> float:
    return float(np.mean(list(end_of_run_forgetting(log).values())))


# -- gradient alignment -------------------------------------------------


class Alignment(NamedTuple):
    dot: float
    cosine: float
    degenerate: bool


def alignment_of(grad_a: lm.ModelParams | np.ndarray, grad_b: lm.ModelParams | np.ndarray) -> Alignment:
    a = grad_a.flat() if isinstance(grad_a, lm.ModelParams) else np.ravel(grad_a)
    b = grad_b.flat() if isinstance(grad_b, lm.ModelParams) else np.ravel(grad_b)
    dot = float(a @ b)
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return Alignment(dot, 0.0, True)
    return Alignment(dot, float(np.clip(dot / norm, -1.0, 1.0)), False)


def grad_alignment(params: lm.ModelParams, batch_a, batch_b) -> Alignment:
    """Inner product and cosine between the loss gradients of two batches."""
    _, ga = lm.loss_and_grad(params, batch_a)
    _, gb = lm.loss_and_grad(params, batch_b)
    return alignment_of(ga, gb)


def mean_cross_task_cosine(params: lm.ModelParams, batches) -> float:
    """Average cosine over all ordered-free pairs of distinct task batches."""
    grads = [lm.loss_and_grad(params, b)[1] for b in batches]
    cos = [alignment_of(grads[i], grads[j]).cosine for i in range(len(grads)) for j in range(i + 1, len(grads))]
    return float(np.mean(cos))


# -- power laws -----------------------------------------------------------


@dataclass
class PowerLawFit:
    """``y = a * x**(-b) + c`` with its root-mean-square residual."""

    a: float
    b: float
    c: float
    residual: float
    wide_b_uncertainty: bool = False

    def predict(self, x) -> np.ndarray:
        return self.a * np.asarray(x, dtype=np.float64) ** (-self.b) + self.c

    def rmse(self, xs, ys) -> float:
        return float(np.sqrt(np.mean((self.predict(xs) - np.asarray(ys, dtype=np.float64)) ** 2)))


def fit_power_law(xs, ys, b_grid: int = 120, c_grid: int = 120) -> PowerLawFit:
    """Least-squares fit of ``y = a x^-b + c``.

    A coarse grid over ``(b, c)`` with the optimal ``a`` solved in closed form
    for each candidate seeds a bounded nonlinear least-squares refinement.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and the same length")
    if x.size < 4:
        raise InsufficientDataError(f"need at least 4 points, got {x.size}")
    if (x <= 0).any() or np.unique(x).size != x.size:
        raise ValueError("xs must be strictly positive and distinct")
    if not np.isfinite(y).all():
        raise ValueError("ys must be finite")

    span = float(y.max() - y.min())
    scale = max(abs(float(y.mean())), 1e-12)
    if span <= 1e-12 * scale:
        return PowerLawFit(0.0, 1.0, float(y.mean()), float(np.sqrt(np.mean((y - y.mean()) ** 2))), True)

    # work in log-x around the geometric centre so the exponent grid is well scaled
    x0 = math.exp(float(np.mean(np.log(x))))
    u = x / x0
    bs = np.geomspace(1e-3, 8.0, b_grid)
    lo = float(y.min()) - 4.0 * span
    hi = float(y.max()) + 4.0 * span
    cs = np.linspace(lo, hi, c_grid)

    best = (np.inf, 0.0, 1.0, float(y.mean()))
    for b in bs:
        basis = u ** (-b)
        # closed-form amplitude for every c at once
        amps = (basis @ y - cs * basis.sum()) / (basis @ basis)
        sse = (((amps[:, None] * basis + cs[:, None]) - y) ** 2).sum(axis=1)
        j = int(np.argmin(sse))
        if sse[j] < best[0]:
            best = (float(sse[j]), float(amps[j]), float(b), float(cs[j]))

    _, a0, b0, c0 = best

    def resid(theta):
        a, log_b, c = theta
        return a * u ** (-math.exp(log_b)) + c - y

    sol = least_squares(resid, x0=[a0, math.log(b0), c0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    a_u, b, c = float(sol.x[0]), math.exp(float(sol.x[1])), float(sol.x[2])
    if not np.isfinite([a_u, b, c]).all() or np.sum(resid(sol.x) ** 2) > best[0]:
        a_u, b, c = a0, b0, c0
    fit = PowerLawFit(a_u * x0**b, b, c, 0.0)
    fit.residual = fit.rmse(x, y)
    # the exponent is poorly determined when the decaying term is negligible
    fit.wide_b_uncertainty = abs(a_u) * float(np.ptp(u ** (-b))) < 1e-6 * scale
    return fit


def compute_per_token(param_count: int, alpha: float) -> float:
    """Training FLOPs per incoming token: 6 * |theta| scaled by 1/(1 - alpha).

    The factor 6 (forward + backward) is a conventional constant, not a
    calibrated measurement of this model.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    return 6.0 * param_count * (1.0 + alpha / (1.0 - alpha))


# -- Reptile second-order expansion ------------------------------------------


def _axpy(alpha: float, x: lm.ModelParams, y: lm.ModelParams) -> lm.ModelParams:
    return lm.ModelParams(*(alpha * a + b for a, b in zip(x.arrays(), y.arrays())))


def reptile_taylor_residual(
    params: lm.ModelParams,
    batch_1,
    batch_2,
    lr: float,
    eps: float = 0.1,
    fd_step: float = 1e-4,
) -> float:
    """Norm of the gap between a two-step Reptile displacement and its expansion.

    Two plain gradient steps of size ``lr`` on ``batch_1`` then ``batch_2``
    give ``theta_2``. The displacement ``eps * (theta_2 - theta_0)`` is compared
    with ``eps * (-lr g1 - lr g2 + lr^2 H2 g1)``, all terms at ``theta_0``.
    ``H2 g1`` is a central difference of ``g2`` along ``g1``. The residual
    is third order in ``lr``.
    """
    _, g1 = lm.loss_and_grad(params, batch_1)
    _, g2 = lm.loss_and_grad(params, batch_2)
    theta_1 = _axpy(-lr, g1, params)
    _, g2_at_1 = lm.loss_and_grad(theta_1, batch_2)
    theta_2 = _axpy(-lr, g2_at_1, theta_1)
    displacement = eps * (theta_2.flat() - params.flat())

    h = fd_step / max(float(np.linalg.norm(g1.flat())), 1e-300)
    _, g_plus = lm.loss_and_grad(_axpy(h, g1, params), batch_2)
    _, g_minus = lm.loss_and_grad(_axpy(-h, g1, params), batch_2)
    hvp = (g_plus.flat() - g_minus.flat()) / (2.0 * h)

    predicted = eps * (-lr * g1.flat() - lr * g2.flat() + lr * lr * hvp)
    return float(np.linalg.norm(displacement - predicted))
