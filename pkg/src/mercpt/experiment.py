"""Experiment matrix: seeds x arms x model sizes, metrics CSV, report and scaling fits.

Output layout under ``output_dir``::

    run_config.json          resolved configuration
    metrics.csv              one row per (cell, evaluation, task); append-only
    cells/<cell>/DONE        completion marker
    cells/<cell>/step_<n>/   params.bin + optim.bin checkpoints
    report.txt               tables per model size
    scaling_fits.csv         power-law fits per arm
    plots/*.svg
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as me
from . import model as lm
from . import stream as st
from .buffer import BufferConfig, ReplayBuffer
from .engine import TrainConfig, train
from .optim import ScheduleConfig
from .svgplot import line_plot

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "seed", "arm", "model_size", "alpha", "reptile_k", "reptile_eps",
    "update_step", "eval_task", "train_task", "val_loss_nats",
)
FITS_COLUMNS = ("arm", "axis", "metric", "a", "b", "c", "rmse")

# name -> (report label, engine mode, replay ratio); order is the report row order
ARMS = {
    "sequential": ("No Replay", "sequential", 0.0),
    "replay25": ("25% Replay", "replay", 0.25),
    "replay50": ("50% Replay", "replay", 0.5),
    "reptile": ("Reptile Only", "reptile", 0.0),
    "mer25": ("25% Replay + Reptile", "mer", 0.25),
    "mer50": ("50% Replay + Reptile", "mer", 0.5),
    "joint": ("Joint", "joint", 0.0),
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


class NothingToReportError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # stream
    vocab_size: int = 32
    seq_len: int = 64
    n_tasks: int = 3
    task_tokens: int = 200_000
    concentration: float = 0.1
    val_samples: int = 64
    tasks_file: str | None = None
    # model
    embed_dim: int = 16
    context: int = 2
    sizes: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    # training
    batch_size: int = 8
    reptile_interval: int = 50
    reptile_rate: float = 0.1
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    weight_decay: float = 0.01
    eval_interval: int = 50
    # buffer
    buffer_file_size: int = 400
    buffer_capacity_samples: int = 12_000
    queue_capacity: int = 4
    dtype_bytes: int = 2
    # matrix
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"

    def validate(self) -> None:
        problems = []
        positive = ("vocab_size", "seq_len", "n_tasks", "task_tokens", "val_samples", "embed_dim", "context",
                    "batch_size", "reptile_interval", "eval_interval", "buffer_file_size", "queue_capacity")
        for name in positive:
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.concentration <= 0:
            problems.append("concentration: must be > 0")
        if self.context >= self.seq_len:
            problems.append("context: must be < seq_len")
        if not 0 <= self.reptile_rate <= 1:
            problems.append("reptile_rate: must lie in [0, 1]")
        if not 0 <= self.min_lr <= self.peak_lr:
            problems.append("min_lr: need 0 <= min_lr <= peak_lr")
        if self.warmup_steps < 0:
            problems.append("warmup_steps: must be >= 0")
        if not self.sizes or any(s < 1 for s in self.sizes):
            problems.append("sizes: need at least one hidden size >= 1")
        if not self.seeds:
            problems.append("seeds: must be nonempty")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown or not self.arms:
            problems.append(f"arms: unknown {unknown}; choose from {list(ARMS)}")
        if self.dtype_bytes not in (2, 4):
            problems.append("dtype_bytes: must be 2 or 4")
        elif self.vocab_size > 2 ** (8 * self.dtype_bytes):
            problems.append("dtype_bytes: too narrow for vocab_size")
        if self.buffer_capacity_samples < self.buffer_file_size:
            problems.append("buffer_capacity_samples: must be >= buffer_file_size")
        if self.buffer_file_size < self.batch_size:
            problems.append("buffer_file_size: must be >= batch_size")
        if problems:
            raise ConfigError(problems)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: not valid JSON ({exc})"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["<file>: top level must be an object"])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    problems = [f"{k}: unknown field" for k in raw if k not in known]
    defaults = RunConfig()
    for k, v in raw.items():
        if k not in known:
            continue
        expected = getattr(defaults, k)
        if isinstance(expected, bool) or expected is None:
            continue
        if isinstance(expected, list) and not isinstance(v, list):
            problems.append(f"{k}: expected a list")
        elif isinstance(expected, int) and not isinstance(expected, bool) and (isinstance(v, bool) or not isinstance(v, int)):
            problems.append(f"{k}: expected an integer")
        elif isinstance(expected, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            problems.append(f"{k}: expected a number")
        elif isinstance(expected, str) and not isinstance(v, str):
            problems.append(f"{k}: expected a string")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**{k: v for k, v in raw.items()})
    cfg.validate()
    return cfg


# -- cells ------------------------------------------------------------------


def cell_name(arm: str, size: int, seed: int) -> str:
    return f"{arm}_h{size}_s{seed}"


def build_tasks(cfg: RunConfig, seed: int) -> list[st.TaskSpec]:
    if cfg.tasks_file:
        return st.load_tasks(cfg.tasks_file)
    return st.make_tasks(cfg.n_tasks, cfg.vocab_size, cfg.concentration, cfg.task_tokens, seed)


def train_config(cfg: RunConfig, arm: str, seed: int) -> TrainConfig:
    _, mode, alpha = ARMS[arm]
    schedule = ScheduleConfig(peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps, total_steps=max(cfg.warmup_steps, 1), min_lr=cfg.min_lr)
    return TrainConfig(
        batch_size=cfg.batch_size, replay_ratio=alpha, reptile_interval=cfg.reptile_interval,
        reptile_rate=cfg.reptile_rate, schedule=schedule, mode=mode, seed=seed,
        eval_interval=cfg.eval_interval, weight_decay=cfg.weight_decay,
    )


def run_cell(cfg: RunConfig, arm: str, size: int, seed: int, cell_dir: Path):
    """Train one (arm, size, seed) cell; returns the engine result and its CSV rows."""
    tasks = build_tasks(cfg, seed)
    stream = st.TaskStream(tasks, cfg.seq_len, seed)
    val_sets = [st.validation_set(t, cfg.val_samples, cfg.seq_len, seed) for t in tasks]
    dims = lm.ModelDims(tasks[0].vocab_size, cfg.embed_dim, cfg.context, size)
    tcfg = train_config(cfg, arm, seed)
    params = lm.init_params(dims, seed)

    buffer = None
    if tcfg.replay_ratio > 0:
        bcfg = BufferConfig(
            capacity_tokens=cfg.buffer_capacity_samples * cfg.seq_len, file_size=cfg.buffer_file_size,
            seq_len=cfg.seq_len, data_dir=cell_dir / "buffer", queue_capacity=cfg.queue_capacity,
            dtype_bytes=cfg.dtype_bytes,
        )
        buffer = ReplayBuffer(bcfg, seed=seed)
    try:
        result = train(stream, params, tcfg, buffer, val_sets, checkpoint_dir=cell_dir)
    finally:
        if buffer is not None:
            buffer.shutdown()

    k, eps = (tcfg.reptile_interval, tcfg.reptile_rate) if tcfg.uses_reptile else (0, 0.0)
    rows = [
        (seed, arm, size, tcfg.replay_ratio, k, eps, r.update_step, r.eval_task, r.train_task, repr(r.val_loss))
        for r in result.log.records
    ]
    return result, rows


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def _append_rows(path: Path, rows) -> None:
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        writer.writerows(rows)


def run_experiment(
    config: RunConfig,
    arms: list[str] | None = None,
    seeds: list[int] | None = None,
    resume: bool = False,
) -> Path:
    """Run every missing cell, then regenerate the report. Returns the output dir.

    Completed cells (those with a ``DONE`` marker) are never retrained. A cell
    directory without a marker is left by a crash; it is discarded and rerun
    when ``resume`` is set, and is an error otherwise.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(config.to_json(), indent=1))
    metrics_path = out / "metrics.csv"

    arms = arms or config.arms
    seeds = seeds if seeds is not None else config.seeds
    for seed in seeds:
        for arm in arms:
            for size in config.sizes:
                cell_dir = out / "cells" / cell_name(arm, size, seed)
                if (cell_dir / "DONE").exists():
                    continue
                if cell_dir.exists():
                    if not resume:
                        raise RuntimeError(f"{cell_dir} is incomplete; rerun with --resume")
                    shutil.rmtree(cell_dir)
                cell_dir.mkdir(parents=True)
                log.info("running cell %s", cell_dir.name)
                _, rows = run_cell(config, arm, size, seed, cell_dir)
                # a crash between append and marker leaves rows behind; do not duplicate them
                existing = {
                    (r["seed"], r["arm"], r["model_size"]) for r in _read_metrics(metrics_path)
                }
                if (str(seed), arm, str(size)) not in existing:
                    _append_rows(metrics_path, rows)
                shutil.rmtree(cell_dir / "buffer", ignore_errors=True)
                (cell_dir / "DONE").write_text("ok\n")
    emit_report(out)
    return out


# -- reporting ----------------------------------------------------------------


def logs_from_csv(path: str | Path) -> dict[tuple[int, str, int], me.MetricsLog]:
    """Rebuild one MetricsLog per (model_size, arm, seed) from metrics.csv.

    Task ``i``'s boundary is the last step whose training task was ``i``.
    """
    grouped: dict = defaultdict(list)
    for r in _read_metrics(Path(path)):
        grouped[(int(r["model_size"]), r["arm"], int(r["seed"]))].append(r)
    logs = {}
    for key, rows in grouped.items():
        mlog = me.MetricsLog()
        last_step: dict[int, int] = {}
        for r in sorted(rows, key=lambda r: (int(r["update_step"]), int(r["eval_task"]))):
            step, train_task = int(r["update_step"]), int(r["train_task"])
            mlog.add(step, int(r["eval_task"]), float(r["val_loss_nats"]), train_task)
            last_step[train_task] = step
        mlog.task_boundaries = [last_step[t] for t in sorted(last_step)]
        logs[key] = mlog
    return logs


@dataclass
class ReportRow:
    arm: str
    label: str
    per_task_retained: list[float]
    avg_retained: float
    avg_learned: float
    avg_forgetting: float
    std_retained: float
    std_learned: float
    std_forgetting: float
    n_seeds: int


def report_rows(logs: dict, size: int) -> list[ReportRow]:
    rows = []
    for arm, (label, _, _) in ARMS.items():
        seed_logs = [lg for (sz, a, _), lg in sorted(logs.items()) if sz == size and a == arm]
        if not seed_logs:
            continue
        finals = np.array([list(me.final_losses(lg).values()) for lg in seed_logs])
        retained = np.array([me.retained_loss(lg) for lg in seed_logs])
        learned = np.array([me.learned_loss(lg) for lg in seed_logs])
        forgetting = np.array([me.mean_forgetting(lg) for lg in seed_logs])
        per_task = finals.mean(axis=0)
        rows.append(ReportRow(
            arm, label, per_task.tolist(), float(per_task.mean()), float(learned.mean()),
            float(forgetting.mean()), float(retained.std()), float(learned.std()), float(forgetting.std()),
            len(seed_logs),
        ))
    return rows


def _param_count(cfg: dict, size: int) -> int:
    return lm.ModelDims(cfg.get("vocab_size", 32), cfg.get("embed_dim", 16), cfg.get("context", 2), size).param_count


def scaling_fits(logs: dict, run_cfg: dict) -> tuple[list[tuple], list[str]]:
    """Power-law fits of retained/learned loss per arm, against parameter count and compute per token."""
    fits, notes = [], []
    for arm, (_, _, alpha) in ARMS.items():
        sizes = sorted({sz for (sz, a, _) in logs if a == arm})
        if not sizes:
            continue
        if len(sizes) < 4:
            notes.append(f"{arm}: {len(sizes)} model sizes, need 4 for a power-law fit")
            continue
        counts = np.array([_param_count(run_cfg, s) for s in sizes], dtype=np.float64)
        axes = {
            "model_size": counts,
            "compute_per_token": np.array([me.compute_per_token(int(c), alpha) for c in counts]),
        }
        for metric, fn in (("retained", me.retained_loss), ("learned", me.learned_loss)):
            ys = np.array([np.mean([fn(lg) for (sz, a, _), lg in logs.items() if a == arm and sz == s]) for s in sizes])
            for axis, xs in axes.items():
                try:
                    f = me.fit_power_law(xs, ys)
                except ValueError as exc:
                    notes.append(f"{arm}/{axis}/{metric}: {exc}")
                    continue
                fits.append((arm, axis, metric, f.a, f.b, f.c, f.residual, xs, ys))
    return fits, notes


def _fmt_table(size: int, rows: list[ReportRow], n_tasks: int) -> str:
    head = ["Training Method"] + [f"D{t}" for t in range(n_tasks)] + ["AVG retained", "AVG learned", "AVG forgetting", "seeds"]
    lines = [f"hidden_dim = {size}", " | ".join(head)]
    for r in rows:
        cells = [r.label] + [f"{v:.4f}" for v in r.per_task_retained] + [
            f"{r.avg_retained:.4f} ± {r.std_retained:.4f}",
            f"{r.avg_learned:.4f} ± {r.std_learned:.4f}",
            f"{r.avg_forgetting:+.4f} ± {r.std_forgetting:.4f}",
            str(r.n_seeds),
        ]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def emit_report(metrics_dir: str | Path) -> dict[str, Path]:
    """Write report.txt, scaling_fits.csv and SVG plots from metrics.csv."""
    out = Path(metrics_dir)
    logs = logs_from_csv(out / "metrics.csv")
    if not logs:
        raise NothingToReportError(f"no completed cells in {out}")
    cfg_path = out / "run_config.json"
    run_cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    sizes = sorted({k[0] for k in logs})
    n_tasks = max(len(lg.task_boundaries) for lg in logs.values())

    sections = ["Retained / learned validation loss (nats per token); AVG forgetting = retained - learned", ""]
    for size in sizes:
        sections += [_fmt_table(size, report_rows(logs, size), n_tasks), ""]

    fits, notes = scaling_fits(logs, run_cfg)
    with open(out / "scaling_fits.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FITS_COLUMNS)
        for arm, axis, metric, a, b, c, rmse, _, _ in fits:
            writer.writerow((arm, axis, metric, repr(a), repr(b), repr(c), repr(rmse)))
    sections.append("Power-law fits y = a * x^-b + c (compute per token uses an uncalibrated 6*|theta| FLOP constant)")
    for arm, axis, metric, a, b, c, rmse, _, _ in fits:
        sections.append(f"  {arm:<10} {axis:<17} {metric:<8} a={a:.4g} b={b:.4g} c={c:.4g} rmse={rmse:.3g}")
    sections += [f"  note: {n}" for n in notes]
    (out / "report.txt").write_text("\n".join(sections) + "\n")

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for size in sizes:
        curves = {}
        for arm, (label, _, _) in ARMS.items():
            seed_logs = [lg for (sz, a, _), lg in logs.items() if sz == size and a == arm]
            if not seed_logs:
                continue
            steps = sorted({r.update_step for r in seed_logs[0].records})
            avg = [np.mean([np.mean([lg.loss_at(t, s) for t in lg.tasks]) for lg in seed_logs]) for s in steps]
            curves[label] = (steps, avg)
        line_plot(curves, plots / f"curves_h{size}.svg", f"mean validation loss, hidden {size}", "update step", "nats")
    for axis in ("model_size", "compute_per_token"):
        for metric in ("retained", "learned"):
            sel = [f for f in fits if f[1] == axis and f[2] == metric]
            if not sel:
                continue
            lines, dots = {}, {}
            for arm, _, _, a, b, c, _, xs, ys in sel:
                grid = np.geomspace(xs.min(), xs.max(), 50)
                lines[arm] = (grid.tolist(), (a * grid ** (-b) + c).tolist())
                dots[arm] = (xs.tolist(), ys.tolist())
            line_plot(lines, plots / f"scaling_{axis}_{metric}.svg", f"{metric} loss vs {axis}", axis, "nats", logx=True, markers=dots)
    return {"report": out / "report.txt", "fits": out / "scaling_fits.csv", "plots": plots}
