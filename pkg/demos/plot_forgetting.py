"""
Forgetting with and without replay
==================================

Three synthetic Markov languages are learned one after the other. The first
task's validation loss is tracked for a model trained without replay, with
50% replay, and with 50% replay plus Reptile interpolation.
Writes ``forgetting.svg`` next to the script's working directory.
"""
import tempfile

import numpy as np

from mercpt import model as lm
from mercpt import stream as st
from mercpt.buffer import BufferConfig, ReplayBuffer
from mercpt.engine import TrainConfig, train
from mercpt.metrics import learned_loss, mean_forgetting, retained_loss
from mercpt.svgplot import line_plot

seq_len, vocab = 64, 32
tasks = st.make_tasks(3, vocab, 0.1, token_budget=100_000, seed=0)
stream = st.TaskStream(tasks, seq_len, seed=0)
val = [st.validation_set(t, 64, seq_len, seed=0) for t in tasks]
dims = lm.ModelDims(vocab, 16, 2, 64)

# %%
# How different are the languages?
for i in range(3):
    for j in range(i + 1, 3):
        print(f"KL(task {i} || task {j}) = {st.mean_row_kl(tasks[i].transition, tasks[j].transition):.2f} nats")

# %%
# Train three arms from the same initial weights.
arms = {
    "no replay": TrainConfig(mode="sequential"),
    "50% replay": TrainConfig(mode="replay", replay_ratio=0.5),
    "50% replay + Reptile": TrainConfig(mode="mer", replay_ratio=0.5),
}
curves = {}
for name, cfg in arms.items():
    buffer = None
    if cfg.replay_ratio:
        buffer = ReplayBuffer(BufferConfig(12_000 * seq_len, 400, seq_len, tempfile.mkdtemp(), dtype_bytes=2), seed=0)
    result = train(stream, lm.init_params(dims, 0), cfg, buffer, val)
    if buffer is not None:
        buffer.shutdown()
    log = result.log
    print(f"{name:>22}: retained {retained_loss(log):.3f}  learned {learned_loss(log):.3f}  forgetting {mean_forgetting(log):+.3f}")
    steps, losses = log.series(0)
    curves[name] = (steps.tolist(), losses.tolist())

# %%
# Task boundaries are where the no-replay curve turns upward.
print("task boundaries:", log.task_boundaries)
line_plot(curves, "forgetting.svg", "task 0 validation loss", "update step", "nats")
print("wrote forgetting.svg;", "lowest final task-0 loss:", min(curves, key=lambda k: curves[k][1][-1]))
print("entropy floor of task 0 (nats):", float(-(tasks[0].initial @ (tasks[0].transition * np.log(tasks[0].transition)).sum(1))))
