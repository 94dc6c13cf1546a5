"""Continual training loops: sequential, replay, Reptile-only, MER and joint.

One optimizer update consumes ``N - floor(alpha*N)`` incoming samples and
tops the batch up with ``floor(alpha*N)`` replayed rows. Only incoming rows
are written to the buffer. In ``reptile``/``mer`` modes the parameters are
pulled back toward an anchor every ``k`` updates:
``theta <- anchor + eps * (theta - anchor)``, after which the anchor is reset.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import model as lm
from .buffer import ReplayBuffer
from .metrics import MetricsLog
from .optim import AdamWState, ScheduleConfig, adamw_step, lr_at, save_state
from .stream import TaskStream, joint_samples, next_incoming

log = logging.getLogger(__name__)

MODES = ("sequential", "replay", "reptile", "mer", "joint")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value: float, checkpoint: Path | None):
        where = f"; params saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss {value} at update step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    replay_ratio: float = 0.0
    reptile_interval: int = 50
    reptile_rate: float = 0.1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mode: str = "sequential"
    seed: int = 0
    eval_interval: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # "sync" refills the prefetch queue inline before each replay draw, which
    # makes runs reproducible; "thread" relies on the buffer's background prefetcher
    prefetch: str = "sync"
    # total_steps of the schedule is derived from the stream when True
    auto_total_steps: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.replay_ratio < 1:
            raise ValueError("replay_ratio must lie in [0, 1)")
        if self.replay_ratio > 0 and self.mode in ("sequential", "reptile", "joint"):
            raise ValueError(f"mode {self.mode!r} does not replay; replay_ratio must be 0")
        if self.replay_size >= self.batch_size:
            raise ValueError("replay_ratio leaves no room for incoming samples")
        if self.reptile_interval < 1 or not 0 <= self.reptile_rate <= 1:
            raise ValueError("need reptile_interval >= 1 and reptile_rate in [0, 1]")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.prefetch not in ("sync", "thread"):
            raise ValueError("prefetch must be 'sync' or 'thread'")

    @property
    def replay_size(self) -> int:
        return math.floor(self.replay_ratio * self.batch_size)

    @property
    def incoming_size(self) -> int:
        return self.batch_size - self.replay_size

    @property
    def uses_reptile(self) -> bool:
        return self.mode in ("reptile", "mer")


@dataclass
class Counters:
    update_steps: int = 0
    incoming_rows: int = 0
    replay_rows: int = 0
    warm_steps: int = 0
    warm_incoming_rows: int = 0
    warm_replay_rows: int = 0
    reptile_updates: int = 0
    reptile_elementwise_ops: int = 0
    buffer_rows_added: int = 0

    def processed_per_incoming(self, warm_only: bool = True) -> float:
        if warm_only:
            return (self.warm_incoming_rows + self.warm_replay_rows) / self.warm_incoming_rows
        return (self.incoming_rows + self.replay_rows) / self.incoming_rows


@dataclass
class TrainResult:
    params: lm.ModelParams
    log: MetricsLog
    counters: Counters
    optimizer: AdamWState

    def __iter__(self):
        # allows ``params, log = train(...)``
        return iter((self.params, self.log))


def compose_batch(incoming: np.ndarray, buffer: ReplayBuffer | None, alpha: float, batch_size: int) -> tuple[np.ndarray, int]:
    """Incoming rows followed by ``floor(alpha * N)`` replayed rows.

    Returns the batch and the number of replayed rows, which is 0 while the
    buffer has nothing to offer.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha == 0 or buffer is None:
        return incoming, 0
    replay = buffer.get_batch(alpha, batch_size)
    if replay.shape[0] == 0:
        return incoming, 0
    return np.concatenate([incoming, replay]), replay.shape[0]


def reptile_update(current: lm.ModelParams, anchor: lm.ModelParams, eps: float, counters: Counters | None = None) -> lm.ModelParams:
    """``anchor + eps * (current - anchor)``, evaluated as ``(1-eps)*anchor + eps*current``.

    Three elementwise passes over the parameters; the rearrangement makes
    ``eps=1`` return ``current`` and ``eps=0`` return ``anchor`` bit-exactly.
    """
    keep = 1.0 - eps
    out = lm.ModelParams(*(keep * a + eps * c for c, a in zip(current.arrays(), anchor.arrays())))
    if counters is not None:
        counters.reptile_updates += 1
        counters.reptile_elementwise_ops += 3 * current.size
    return out


def update_steps_for(samples_per_task: Sequence[int], incoming_size: int) -> int:
    return sum(math.ceil(n / incoming_size) for n in samples_per_task)


def save_checkpoint(run_dir: str | Path, step: int, params: lm.ModelParams, opt: AdamWState) -> Path:
    out = Path(run_dir) / f"step_{step}"
    out.mkdir(parents=True, exist_ok=True)
    lm.save_params(params, out / "params.bin")
    save_state(opt, out / "optim.bin")
    return out


def evaluate(params: lm.ModelParams, val_sets: Sequence[np.ndarray]) -> list[float]:
    return [lm.loss(params, v) for v in val_sets]


def _stream_chunks(stream: TaskStream, n: int) -> Iterator[tuple[np.ndarray, int, bool]]:
    cursor = 0
    ends = set(stream.boundaries())
    while (got := next_incoming(stream, cursor, n)) is not None:
        rows, task_id, cursor = got
        yield rows, task_id, cursor in ends


def _joint_chunks(stream: TaskStream, n: int) -> Iterator[tuple[np.ndarray, int, bool]]:
    data, _ = joint_samples(stream)
    # the shuffled data is cut into segments sized like the tasks so the update
    # count and pseudo-boundaries match a sequential run; train task = segment
    start = 0
    for segment, size in enumerate(stream.samples_per_task()):
        part = data[start:start + size]
        start += size
        for s in range(0, size, n):
            yield part[s:s + n], segment, s + n >= size


def train(
    stream: TaskStream,
    params: lm.ModelParams,
    config: TrainConfig,
    buffer: ReplayBuffer | None = None,
    val_sets: Sequence[np.ndarray] = (),
    eval_hook: Callable[[int, lm.ModelParams], None] | None = None,
    checkpoint_dir: str | Path | None = None,
    optimizer: AdamWState | None = None,
) -> TrainResult:
    """Run one pass over ``stream`` in the configured mode.

    ``val_sets[i]`` is the held-out data for task ``i``; all of them are
    evaluated every ``eval_interval`` updates, at step 0 and at each task boundary.
    """
    if config.mode == "joint":
        chunks = _joint_chunks(stream, config.incoming_size)
    else:
        chunks = _stream_chunks(stream, config.incoming_size)
    if config.replay_ratio > 0 and buffer is None:
        raise ValueError("replay modes need a buffer")
    if buffer is not None and config.incoming_size > buffer.config.file_size:
        raise ValueError("buffer file_size must hold one step of incoming rows")
    return _run(chunks, stream, params, config, buffer, val_sets, eval_hook, checkpoint_dir, optimizer)


def joint_train(stream: TaskStream, params: lm.ModelParams, config: TrainConfig, val_sets: Sequence[np.ndarray] = (), **kw) -> TrainResult:
    """i.i.d. baseline over the shuffled union of every task's samples; no buffer, no Reptile."""
    config = dataclasses.replace(config, mode="joint", replay_ratio=0.0)
    return train(stream, params, config, None, val_sets, **kw)


def _run(chunks, stream, params, config, buffer, val_sets, eval_hook, checkpoint_dir, optimizer) -> TrainResult:
    schedule = config.schedule
    if config.auto_total_steps:
        total = update_steps_for(stream.samples_per_task(), config.incoming_size)
        warm = min(schedule.warmup_steps, total)
        schedule = dataclasses.replace(schedule, total_steps=total, warmup_steps=warm)

    params = params.copy()
    opt = optimizer.copy() if optimizer is not None else AdamWState.fresh(params)
    counters = Counters()
    mlog = MetricsLog()
    anchor = params.copy() if config.uses_reptile else None
    alpha = config.replay_ratio
    threaded = buffer is not None and config.prefetch == "thread"
    if threaded:
        buffer.start_prefetch()

    def record(step: int, train_task: int) -> None:
        for t, loss in enumerate(evaluate(params, val_sets)):
            mlog.add(step, t, loss, train_task)
        if eval_hook is not None:
            eval_hook(step, params)

    step = 0
    record(0, stream.tasks[0].task_id if config.mode != "joint" else 0)
    for incoming, task_id, at_boundary in chunks:
        if buffer is not None and alpha > 0 and not threaded:
            buffer.fill_queue()
        batch, n_replay = compose_batch(incoming, buffer if alpha > 0 else None, alpha, config.batch_size)

        value, grads = lm.loss_and_grad(params, batch)
        if not math.isfinite(value):
            where = save_checkpoint(checkpoint_dir, step, params, opt) if checkpoint_dir else None
            raise TrainingDiverged(step, value, where)
        params, opt = adamw_step(
            params, grads, opt, lr_at(schedule, step),
            config.beta1, config.beta2, config.adam_eps, config.weight_decay,
        )
        step += 1

        n_in = incoming.shape[0]
        counters.update_steps += 1
        counters.incoming_rows += n_in
        counters.replay_rows += n_replay
        if n_replay:
            counters.warm_steps += 1
            counters.warm_incoming_rows += n_in
            counters.warm_replay_rows += n_replay
        if buffer is not None:
            buffer.add(incoming)
            counters.buffer_rows_added += n_in

        if config.uses_reptile and step % config.reptile_interval == 0:
            params = reptile_update(params, anchor, config.reptile_rate, counters)
            anchor = params.copy()

        if at_boundary:
            if not mlog.has_step(step):
                record(step, task_id)
            mlog.task_boundaries.append(step)
            log.debug("boundary of task %s at step %d", task_id, step)
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, step, params, opt)
        elif step % config.eval_interval == 0:
            record(step, task_id)

    if threaded:
        buffer.stop_prefetch()
    return TrainResult(params, mlog, counters, opt)
