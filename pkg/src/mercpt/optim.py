"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelDims, ModelParams


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, field: str):
        super().__init__(f"non-finite gradient entry in {field!r}")
        self.field = field


@dataclass
class AdamWState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamWState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "AdamWState":
        return AdamWState(self.m.copy(), self.v.copy(), self.step)


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 1000
    min_lr: float = 1e-4

    def __post_init__(self):
        if not 0 <= self.min_lr <= self.peak_lr:
            raise ValueError("need 0 <= min_lr <= peak_lr")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """Learning rate for the 0-indexed update ``step``.

    Linear ramp reaching ``peak_lr`` at ``warmup_steps - 1``, then cosine
    decay to ``min_lr`` at ``total_steps``. Steps past the end clamp to ``min_lr``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    peak, low = schedule.peak_lr, schedule.min_lr
    warm, total = schedule.warmup_steps, schedule.total_steps
    if step < warm:
        return peak * (step + 1) / warm
    if step >= total:
        return low
    progress = (step - warm) / (total - warm)
    return low + 0.5 * (peak - low) * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[ModelParams, AdamWState]:
    """One AdamW update. Returns new params and state; inputs are not mutated."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)

    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p
        new_p.append(p - lr * update)
        new_m.append(m)
        new_v.append(v)
    return ModelParams(*new_p), AdamWState(ModelParams(*new_m), ModelParams(*new_v), step)


_STEP = struct.Struct("<q")


def save_state(state: AdamWState, path: str | Path) -> None:
    """Step count (int64) followed by the flattened first and second moments."""
    with open(path, "wb") as fh:
        fh.write(_STEP.pack(state.step))
        fh.write(state.m.flat().astype("<f8").tobytes())
        fh.write(state.v.flat().astype("<f8").tobytes())


def load_state(path: str | Path, dims: ModelDims) -> AdamWState:
    raw = Path(path).read_bytes()
    (step,) = _STEP.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_STEP.size)
    if body.size != 2 * dims.param_count:
        raise ValueError(f"{path}: optimizer state size does not match model dims")
    half = dims.param_count
    return AdamWState(ModelParams.from_flat(body[:half], dims), ModelParams.from_flat(body[half:], dims), step)
