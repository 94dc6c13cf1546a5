"""
The disk-backed replay buffer
=============================

Rows are appended to fixed-size files until every file is full; after that
each new row overwrites a random slot of a random file. A bounded queue holds
whole files read back from disk, and replay batches are drawn from the
queue head.
"""
import tempfile

import numpy as np

from mercpt.buffer import BufferConfig, ReplayBuffer, load_metadata

seq_len = 8
scratch = tempfile.mkdtemp()
config = BufferConfig(capacity_tokens=3 * 20 * seq_len, file_size=20, seq_len=seq_len, data_dir=scratch, queue_capacity=4)
print("files:", config.file_count)

rng = np.random.default_rng(0)
buf = ReplayBuffer(config, seed=0)

# %%
# Fill the three files with batches of 5 rows, then keep going: the 13th
# batch and later ones overwrite.
for step in range(20):
    buf.add(rng.integers(0, 32, size=(5, seq_len)))
    print(f"after batch {step:2d}: sizes={buf.sizes} total={buf.total} last write -> file {buf.last_write[0]}")

# %%
# Prefetch synchronously and draw a quarter of an 8-row batch.
buf.fill_queue()
print("queue holds", buf.queue.qsize(), "files")
print(buf.get_batch(0.25, 8))

# %%
# State survives a restart through metadata.json.
buf.shutdown()
print(load_metadata(scratch))
with ReplayBuffer(config, seed=1) as again:
    print("restored sizes", again.sizes, "total", again.total)
