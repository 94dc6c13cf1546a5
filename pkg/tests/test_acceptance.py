"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
collected into the terminal summary.
"""
import math
import os
import tempfile
import threading
import time

import numpy as np
import pytest

from mercpt import engine
from mercpt import model as lm
from mercpt import stream as st
from mercpt.buffer import BufferConfig, ReplayBuffer
from mercpt.engine import TrainConfig, train
from mercpt.experiment import RunConfig, logs_from_csv, run_experiment
from mercpt.metrics import (
    MetricsLog, fit_power_law, learned_loss, mean_forgetting, reptile_taylor_residual, retained_loss,
)
from mercpt.optim import ScheduleConfig, lr_at

from conftest import report_criterion
from gradcheck import max_relative_error


# -- shared experiment: 3 tasks x 200k tokens, hidden 64, 3 seeds ---------------

FORGETTING_ARMS = ["sequential", "replay25", "replay50", "mer50"]


@pytest.fixture(scope="module")
def forgetting_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = RunConfig(
        n_tasks=3, task_tokens=200_000, sizes=[64], seeds=[0, 1, 2], arms=FORGETTING_ARMS,
        output_dir=str(out / "run"),
    )
    start = time.monotonic()
    run_experiment(cfg)
    elapsed = time.monotonic() - start
    logs = logs_from_csv(out / "run" / "metrics.csv")
    per_arm = {
        arm: [mean_forgetting(logs[(64, arm, s)]) for s in cfg.seeds] for arm in FORGETTING_ARMS
    }
    return {"elapsed": elapsed, "logs": logs, "forgetting": {a: float(np.mean(v)) for a, v in per_arm.items()}}


def test_forgetting_ordering(forgetting_runs):
    f = forgetting_runs["forgetting"]
    seq, r25, r50 = f["sequential"], f["replay25"], f["replay50"]
    ok = (
        seq > r25 > r50
        and seq > 0.05
        and seq - r25 > 0.01
        and r25 - r50 > 0.01
        and forgetting_runs["elapsed"] < 15 * 60
    )
    report_criterion(
        "1 forgetting ordering", ok,
        f"sequential {seq:.4f} > 25% {r25:.4f} > 50% {r50:.4f}; {forgetting_runs['elapsed']:.0f}s",
    )
    assert ok


def test_mer_no_worse_than_replay(forgetting_runs):
    f = forgetting_runs["forgetting"]
    gap = f["replay50"] - f["mer50"]
    ok = gap >= -0.005
    report_criterion("2 MER <= ER", ok, f"MER50 {f['mer50']:.4f} vs ER50 {f['replay50']:.4f} (gap {gap:+.4f})")
    assert ok


def test_identity_on_every_run(forgetting_runs):
    worst = 0.0
    for lg in forgetting_runs["logs"].values():
        worst = max(worst, abs(retained_loss(lg) - (learned_loss(lg) + mean_forgetting(lg))))
    ok = worst < 1e-9 and len(forgetting_runs["logs"]) == 3 * len(FORGETTING_ARMS)
    report_criterion("12 retained = learned + forgetting", ok, f"max deviation {worst:.2e} over {len(forgetting_runs['logs'])} runs")
    assert ok


# -- table arithmetic ---------------------------------------------------------------

# final losses for three tasks; AVG as printed
RETAINED_ROW = ("99M (25% Replay)", (4.03, 2.28, 2.27), 2.86)

# learned-loss table, in printed order
LEARNED_TABLE = [
    ("99M (No Replay)", (3.60, 2.20, 2.60), 2.80),
    ("99M (25% Replay)", (3.20, 2.10, 2.27), 2.52),
    ("99M (50% Replay)", (3.00, 1.95, 2.36), 2.44),
    ("99M (Reptile Only)", (3.30, 2.20, 2.40), 2.63),
    ("99M (25% Replay + Reptile)", (3.10, 2.00, 2.29), 2.46),
    ("99M (50% Replay + Reptile)", (2.80, 1.80, 2.01), 2.20),
    ("560M (No Replay)", (3.30, 1.90, 2.40), 2.53),
    ("560M (25% Replay)", (2.90, 1.65, 1.91), 2.15),
    ("560M (50% Replay)", (2.55, 1.30, 2.34), 2.06),
    ("560M (Reptile Only)", (3.10, 1.85, 2.30), 2.42),
    ("560M (25% Replay + Reptile)", (2.70, 1.50, 1.98), 2.06),
    ("560M (50% Replay + Reptile)", (2.35, 1.10, 1.60), 1.68),
    ("1B (No Replay)", (3.00, 1.60, 2.00), 2.20),
    ("1B (25% Replay)", (2.50, 1.70, 2.22), 2.14),
    ("1B (50% Replay)", (2.30, 1.35, 2.33), 2.00),
    ("1B (Reptile Only)", (2.80, 1.78, 2.12), 2.23),
    ("1B (25% Replay + Reptile)", (2.55, 1.45, 2.28), 2.09),
    ("1B (50% Replay + Reptile)", (2.20, 1.35, 1.83), 1.79),
    ("6B (No Replay)", (1.90, 1.10, 1.10), 1.37),
    ("6B (25% Replay)", (1.20, 0.90, 0.90), 1.00),
    ("6B (50% Replay)", (1.10, 0.70, 0.80), 0.87),
    ("6B (Reptile Only)", (1.50, 1.00, 1.09), 1.20),
    ("6B (25% Replay + Reptile)", (0.95, 0.68, 0.77), 0.80),
    ("6B (50% Replay + Reptile)", (0.90, 0.65, 0.74), 0.76),
]


def log_with(boundary, final):
    """Three-task log whose boundary and end-of-run losses are the given values."""
    lg = MetricsLog(task_boundaries=[10, 20, 30])
    for t in range(3):
        lg.add(0, t, 5.0, 0)
    for i, step in enumerate((10, 20)):
        for t in range(3):
            lg.add(step, t, boundary[t] if t == i else 4.5, i)
    for t in range(3):
        lg.add(30, t, final[t], 2)
    return lg


def test_table_arithmetic():
    label, values, avg = RETAINED_ROW
    checks = [(label, round(retained_loss(log_with((9.0, 9.0, values[2]), values)), 2), avg)]
    picks = np.random.default_rng(0).choice(len(LEARNED_TABLE), size=3, replace=False)
    for i in picks:
        label, values, avg = LEARNED_TABLE[i]
        got = learned_loss(log_with(values, (9.0, 9.0, values[2])))
        checks.append((label, round(got, 2), avg))
    bad = [f"{lab}: {got:.2f} != {want:.2f}" for lab, got, want in checks if abs(got - want) > 1e-9]
    detail = "; ".join(f"{lab} {got:.2f}/{want:.2f}" for lab, got, want in checks)
    report_criterion("3 table arithmetic", not bad, detail)
    assert not bad, bad


# -- gradients ------------------------------------------------------------------------

def test_gradient_oracle():
    dims = lm.ModelDims(32, 16, 2, 64)
    worst = 0.0
    for draw in range(5):
        rng = np.random.default_rng(100 + draw)
        params = lm.init_params(dims, draw)
        # move off the initialisation so biases and all layers are exercised
        params = lm.ModelParams(*(a + 0.1 * rng.standard_normal(a.shape) for a in params.arrays()))
        batch = rng.integers(0, 32, size=(4, 24))
        worst = max(worst, max_relative_error(params, batch, 200, rng, h=1e-5))
    ok = worst < 1e-4
    report_criterion("4 gradient oracle", ok, f"max relative error {worst:.2e} over 5 x 200 coordinates")
    assert ok


def test_reptile_residual_is_cubic():
    dims = lm.ModelDims(32, 16, 2, 64)
    ratios = []
    for i in range(10):
        rng = np.random.default_rng(200 + i)
        params = lm.init_params(dims, i)
        b1, b2 = rng.integers(0, 32, size=(2, 8, 32))
        ratios.append(reptile_taylor_residual(params, b1, b2, 1e-3) / reptile_taylor_residual(params, b1, b2, 5e-4))
    mean = float(np.mean(ratios))
    ok = 6 <= mean <= 10
    report_criterion("5 reptile second-order residual", ok, f"mean shrink factor {mean:.3f} (range {min(ratios):.2f}-{max(ratios):.2f})")
    assert ok


# -- buffer ----------------------------------------------------------------------------

def test_buffer_bit_exact_and_persistent(tmp_path):
    L, S, F = 16, 50, 4
    cfg = BufferConfig(F * S * L, S, L, tmp_path / "buf", queue_capacity=4)
    rng = np.random.default_rng(0)
    shadow = [np.zeros((S, L), dtype=np.uint32) for _ in range(F)]
    seen = set()
    problems = []
    with ReplayBuffer(cfg, seed=0) as buf:
        for cycle in range(10_000):
            batch = rng.integers(0, 2**32, size=(int(rng.integers(1, 6)), L), dtype=np.uint64)
            buf.add(batch)
            i, slots = buf.last_write
            shadow[i][slots] = batch
            seen.update(r.astype("<u4").tobytes() for r in batch)
            buf.fill_queue()
            got = buf.get_batch(float(rng.choice([0.25, 0.5, 1.0])), 8)
            if any(r.astype("<u4").tobytes() not in seen for r in got):
                problems.append(f"cycle {cycle}: returned a row never added")
            if cycle % 500 == 0 or cycle == 9_999:
                for f in range(F):
                    n = buf.sizes[f]
                    if not np.array_equal(buf.read_file(f), shadow[f][:n]):
                        problems.append(f"cycle {cycle}: file {f} differs from written rows")
        sizes, total = buf.sizes, buf.total
    with ReplayBuffer(cfg, seed=1) as again:
        restored = again.sizes == sizes and again.total == total
        same_bytes = all(np.array_equal(again.read_file(f), shadow[f][:sizes[f]]) for f in range(F))
        again.fill_queue()
        after = again.get_batch(1.0, 32)
        members = all(r.astype("<u4").tobytes() in seen for r in after)
    ok = not problems and restored and same_bytes and members
    report_criterion(
        "6a buffer bit-exactness + restart", ok,
        f"{total} rows added over 10^4 cycles; restart restores sizes={restored} bytes={same_bytes}; {len(problems)} problems",
    )
    assert ok, problems[:5]


def test_buffer_queue_bound_under_stress(tmp_path):
    P, L = 4, 16
    cfg = BufferConfig(8 * 40 * L, 40, L, tmp_path / "buf", queue_capacity=P, idle_interval=0.001, metadata_every=25)
    rng = np.random.default_rng(1)
    peak = 0
    stop = threading.Event()
    observed = []

    def watch():
        while not stop.is_set():
            observed.append(buf.queue.qsize())
            time.sleep(0.0005)

    with ReplayBuffer(cfg, seed=1) as buf:
        buf.start_prefetch()
        watcher = threading.Thread(target=watch)
        watcher.start()
        end = time.monotonic() + 60
        ops = 0
        while time.monotonic() < end:
            if rng.random() < 0.5:
                buf.add(rng.integers(0, 1000, size=(int(rng.integers(1, 10)), L)))
            else:
                buf.get_batch(0.5, 16)
            peak = max(peak, buf.queue.qsize())
            ops += 1
        stop.set()
        watcher.join()
        peak = max(peak, buf.max_queue_occupancy, max(observed, default=0))
        reads = buf.files_read
    ok = peak <= P and reads > 0
    report_criterion("6b queue occupancy bound", ok, f"peak {peak} <= P={P} over 60 s, {ops} ops, {reads} prefetches")
    assert ok


def test_overwrite_uniformity():
    C, m, trials = 100, 1000, 2000
    survivors = 0
    # a RAM-backed scratch dir keeps 2.2M small writes fast
    with tempfile.TemporaryDirectory(dir="/dev/shm" if os.path.isdir("/dev/shm") else None) as d:
        for trial in range(trials):
            cfg = BufferConfig(C, C, 1, f"{d}/t{trial}", dtype_bytes=2, metadata_every=10**9)
            with ReplayBuffer(cfg, seed=trial) as buf:
                for j in range(C + m):
                    buf.add(np.array([[j]]))
                survivors += int((buf.read_file(0)[:, 0] < C).sum())
    p = (1 - 1 / C) ** m
    n = C * trials
    p_hat = survivors / n
    se = math.sqrt(p * (1 - p) / n)
    ok = abs(p_hat - p) <= 3 * se
    report_criterion("7 overwrite uniformity", ok, f"survival {p_hat:.3e} vs {p:.3e} +- {3 * se:.2e} ({survivors} survivors)")
    assert ok


# -- engine accounting ------------------------------------------------------------------

def small_stream(L=32, samples=150, seed=0):
    return st.TaskStream(st.make_tasks(3, 16, 0.1, L * samples, seed), L, seed)


def test_batch_composition(tmp_path, monkeypatch):
    seen = []
    original = engine.compose_batch

    def spy(incoming, buffer, alpha, n):
        batch, n_replay = original(incoming, buffer, alpha, n)
        warm = buffer is not None and buffer.resident_rows > 0
        seen.append((alpha, n, warm, n_replay, batch.shape[0], incoming.shape[0]))
        return batch, n_replay

    monkeypatch.setattr(engine, "compose_batch", spy)
    dims = lm.ModelDims(16, 4, 2, 8)
    wrong = []
    for alpha in (0.25, 0.5):
        for n in (8, 64):
            seen.clear()
            cfg = TrainConfig(batch_size=n, replay_ratio=alpha, mode="replay", schedule=ScheduleConfig(warmup_steps=5))
            bcfg = BufferConfig(16 * 64 * 32, 64, 32, tmp_path / f"b{alpha}_{n}", queue_capacity=4, dtype_bytes=2, metadata_every=100)
            with ReplayBuffer(bcfg, seed=0) as buf:
                train(small_stream(), lm.init_params(dims, 0), cfg, buf)
            warm = [s for s in seen if s[2]]
            want = math.floor(alpha * n)
            bad = [s for s in warm if s[3] != want or s[4] != s[5] + want]
            if bad or not warm:
                wrong.append(f"alpha={alpha} N={n}: {len(bad)} bad of {len(warm)} warm batches")
    ok = not wrong
    report_criterion("8 batch composition", ok, "every warm batch has floor(alpha*N) replay rows" if ok else "; ".join(wrong))
    assert ok


def test_flop_accounting(tmp_path):
    dims = lm.ModelDims(16, 4, 2, 8)
    stream = small_stream(samples=400)
    sched = ScheduleConfig(warmup_steps=5)
    base = train(stream, lm.init_params(dims, 0), TrainConfig(schedule=sched)).counters
    bcfg = BufferConfig(16 * 64 * 32, 64, 32, tmp_path / "b", queue_capacity=4, dtype_bytes=2, metadata_every=100)
    with ReplayBuffer(bcfg, seed=0) as buf:
        half = train(stream, lm.init_params(dims, 0), TrainConfig(mode="mer", replay_ratio=0.5, reptile_interval=7, schedule=sched), buf).counters
    ratio = half.processed_per_incoming() / base.processed_per_incoming(warm_only=False)
    expected_ops = 3 * dims.param_count * (half.update_steps // 7)
    ok = ratio == 2.0 and half.reptile_elementwise_ops == expected_ops and half.reptile_updates == half.update_steps // 7
    report_criterion(
        "9 FLOP accounting", ok,
        f"tokens per incoming token ratio {ratio!r}; reptile ops {half.reptile_elementwise_ops} = 3 x {dims.param_count} x {half.update_steps // 7}",
    )
    assert ok


def test_schedule_landmarks():
    sched = ScheduleConfig(peak_lr=3e-4, warmup_steps=357, total_steps=5001, min_lr=3e-5)
    mid_step = 357 + (5001 - 357) // 2
    errors = {
        "peak": abs(lr_at(sched, 356) - 3e-4) / 3e-4,
        "min": abs(lr_at(sched, 5001) - 3e-5) / 3e-5,
        "mid": abs(lr_at(sched, mid_step) - 1.65e-4) / 1.65e-4,
    }
    ok = all(e <= 1e-12 for e in errors.values())
    report_criterion("10 schedule", ok, ", ".join(f"{k} rel err {v:.1e}" for k, v in errors.items()))
    assert ok


def test_power_law_recovery():
    xs = np.array([1, 2, 4, 8, 16, 32], dtype=float)
    ys = 2.0 * xs ** -0.5 + 1.0
    truth = np.array([2.0, 0.5, 1.0])
    clean = fit_power_law(xs, ys)
    noisy = fit_power_law(xs, ys * (1 + 0.01 * np.random.default_rng(0).standard_normal(6)))
    err_clean = np.abs(np.array([clean.a, clean.b, clean.c]) - truth) / truth
    err_noisy = np.abs(np.array([noisy.a, noisy.b, noisy.c]) - truth) / truth
    ok = (err_clean < 0.05).all() and (err_noisy < 0.15).all()
    report_criterion(
        "11 power-law recovery", ok,
        f"noiseless max rel err {err_clean.max():.1e}; 1% noise max rel err {err_noisy.max():.3f}",
    )
    assert ok
