"""Synthetic Markov "languages" and the one-pass task stream built from them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# seed-sequence keys keeping training, validation and joint-shuffle draws disjoint
_TRAIN_KEY, _VALID_KEY, _SHUFFLE_KEY = 0, 1, 2


@dataclass
class TaskSpec:
    task_id: int
    transition: np.ndarray
    initial: np.ndarray
    token_budget: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        v = self.transition.shape[0]
        if self.transition.shape != (v, v) or self.initial.shape != (v,):
            raise ValueError("transition must be (vocab, vocab) and initial (vocab,)")
        if (self.transition < 0).any() or np.abs(self.transition.sum(axis=1) - 1).max() > 1e-9:
            raise ValueError("transition rows must be non-negative and sum to 1")
        if (self.initial < 0).any() or abs(self.initial.sum() - 1) > 1e-9:
            raise ValueError("initial distribution must be non-negative and sum to 1")

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "token_budget": self.token_budget,
            "transition": self.transition.tolist(),
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(int(d["task_id"]), np.array(d["transition"]), np.array(d["initial"]), int(d.get("token_budget", 0)))


def make_task(seed: int, vocab_size: int, concentration: float, task_id: int = 0, token_budget: int = 0) -> TaskSpec:
    """Random task: each transition row is an independent symmetric Dirichlet draw.

    The initial distribution is the stationary distribution of the chain
    (approximated by power iteration) so rollouts start in equilibrium.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size)
    # tiny concentrations can underflow to exact zero rows before renormalising
    transition = np.maximum(transition, 1e-300)
    transition /= transition.sum(axis=1, keepdims=True)
    initial = np.full(vocab_size, 1.0 / vocab_size)
    mixing = 0.5 * (transition + np.eye(vocab_size))  # lazy chain: aperiodic
    for _ in range(500):
        initial = initial @ mixing
    initial /= initial.sum()
    return TaskSpec(task_id, transition, initial, token_budget)


def mean_row_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Average over rows of KL(p_row || q_row) in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(terms.sum(axis=1).mean())


def sample_sequences(task: TaskSpec, n: int, seq_len: int, seed) -> np.ndarray:
    """``n`` independent rollouts of length ``seq_len`` as an int64 matrix."""
    if n < 1 or seq_len < 1:
        raise ValueError("n and seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(task.transition, axis=1)
    cdf[:, -1] = 1.0
    init_cdf = np.cumsum(task.initial)
    init_cdf[-1] = 1.0
    out = np.empty((n, seq_len), dtype=np.int64)
    u = rng.random((n, seq_len))
    out[:, 0] = np.searchsorted(init_cdf, u[:, 0], side="right")
    for t in range(1, seq_len):
        rows = cdf[out[:, t - 1]]
        out[:, t] = (rows <= u[:, t, None]).sum(axis=1)
    return out


def make_tasks(n_tasks: int, vocab_size: int, concentration: float, token_budget: int, seed: int) -> list[TaskSpec]:
    return [
        make_task(seed * 1000 + i + 1, vocab_size, concentration, task_id=i, token_budget=token_budget)
        for i in range(n_tasks)
    ]


def validation_set(task: TaskSpec, n: int, seq_len: int, seed: int) -> np.ndarray:
    """Held-out rollouts drawn from a seed stream disjoint from training data."""
    return sample_sequences(task, n, seq_len, np.random.SeedSequence([seed, task.task_id, _VALID_KEY]))


@dataclass
class TaskStream:
    """Tasks visited once, in order. The cursor counts samples consumed."""

    tasks: list[TaskSpec]
    seq_len: int
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("stream needs at least one task")

    def samples_per_task(self) -> list[int]:
        # a sample never spans two tasks: budgets round down to whole samples
        return [t.token_budget // self.seq_len for t in self.tasks]

    @property
    def total_samples(self) -> int:
        return sum(self.samples_per_task())

    def boundaries(self) -> list[int]:
        """Cumulative sample counts at which each task ends."""
        return np.cumsum(self.samples_per_task()).tolist()

    def task_samples(self, index: int) -> np.ndarray:
        if index not in self._cache:
            task = self.tasks[index]
            n = self.samples_per_task()[index]
            seq = np.random.SeedSequence([self.seed, task.task_id, _TRAIN_KEY])
            self._cache[index] = sample_sequences(task, n, self.seq_len, seq) if n else np.empty((0, self.seq_len), np.int64)
        return self._cache[index]

    def locate(self, cursor: int) -> tuple[int, int]:
        """(task index, offset within task) for a cursor, or (len(tasks), 0) at the end."""
        start = 0
        for i, n in enumerate(self.samples_per_task()):
            if cursor < start + n:
                return i, cursor - start
            start += n
        return len(self.tasks), 0


def next_incoming(stream: TaskStream, cursor: int, n: int = 1):
    """Up to ``n`` samples from the task under ``cursor``; never crosses a task boundary.

    Returns ``(rows, task_id, new_cursor)``, or ``None`` once the stream is exhausted.
    """
    if cursor < 0:
        raise ValueError("cursor must be non-negative")
    index, offset = stream.locate(cursor)
    if index == len(stream.tasks):
        return None
    data = stream.task_samples(index)
    take = min(n, data.shape[0] - offset)
    return data[offset:offset + take], stream.tasks[index].task_id, cursor + take


def joint_samples(stream: TaskStream) -> tuple[np.ndarray, np.ndarray]:
    """All tasks' training samples uniformly shuffled, with the task id of each row."""
    rows = [stream.task_samples(i) for i in range(len(stream.tasks))]
    ids = [np.full(r.shape[0], t.task_id) for r, t in zip(rows, stream.tasks)]
    data, labels = np.concatenate(rows), np.concatenate(ids)
    perm = np.random.default_rng(np.random.SeedSequence([stream.seed, _SHUFFLE_KEY])).permutation(data.shape[0])
    return data[perm], labels[perm]


def save_tasks(tasks: list[TaskSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"tasks": [t.to_dict() for t in tasks]}, indent=1))


def load_tasks(path: str | Path) -> list[TaskSpec]:
    return [TaskSpec.from_dict(d) for d in json.loads(Path(path).read_text())["tasks"]]
