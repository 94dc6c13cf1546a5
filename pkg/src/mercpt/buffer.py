"""Disk-backed replay buffer with a background prefetch queue.

Rows are fixed-length token sequences stored as raw little-endian integers in
``buffer_{i}.bin`` files, row-major with no header, so row ``r`` of file ``i``
lives at byte offset ``r * seq_len * dtype_bytes``. Buffer bookkeeping
(per-file fill counts and the running total) is persisted to
``metadata.json`` so a later process can pick up where the last one stopped.

Concurrency: one writer (the training loop, calling :meth:`ReplayBuffer.add`
and :meth:`ReplayBuffer.get_batch`) and one prefetch thread reading files into
a bounded FIFO. Nothing else may touch the buffer concurrently.
"""
from __future__ import annotations

import json
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
METADATA_NAME = "metadata.json"
METADATA_KEYS = ("capacity_tokens", "file_size", "seq_len", "dtype_bytes", "sizes", "total", "format_version")
_DTYPES = {2: np.dtype("<u2"), 4: np.dtype("<u4")}


class BufferError(Exception):
    pass


class BufferSetupError(BufferError):
    pass


class IncompatibleStoreError(BufferError):
    pass


class OversizeBatchError(BufferError, ValueError):
    pass


class MetadataParseError(BufferError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"metadata field {field_name!r}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class BufferConfig:
    capacity_tokens: int
    file_size: int
    seq_len: int
    data_dir: str | os.PathLike
    queue_capacity: int = 8
    dtype_bytes: int = 4
    idle_interval: float = 0.1
    metadata_every: int = 1

    def __post_init__(self):
        if self.file_size < 1 or self.seq_len < 1:
            raise ValueError("file_size and seq_len must be >= 1")
        if self.capacity_tokens < self.file_size * self.seq_len:
            raise ValueError("capacity_tokens must hold at least one full file (file_size * seq_len)")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.dtype_bytes not in _DTYPES:
            raise ValueError("dtype_bytes must be 2 or 4")
        if self.metadata_every < 1:
            raise ValueError("metadata_every must be >= 1")

    @property
    def file_count(self) -> int:
        return self.capacity_tokens // (self.file_size * self.seq_len)

    @property
    def row_bytes(self) -> int:
        return self.seq_len * self.dtype_bytes


@dataclass
class BufferState:
    capacity_tokens: int
    file_size: int
    seq_len: int
    dtype_bytes: int
    sizes: list[int] = field(default_factory=list)
    total: int = 0

    @property
    def file_count(self) -> int:
        return len(self.sizes)

    def to_json(self) -> dict:
        return {
            "capacity_tokens": self.capacity_tokens,
            "file_size": self.file_size,
            "seq_len": self.seq_len,
            "dtype_bytes": self.dtype_bytes,
            "sizes": list(self.sizes),
            "total": self.total,
            "format_version": FORMAT_VERSION,
        }


def _int_field(raw: dict, key: str, minimum: int = 0) -> int:
    if key not in raw:
        raise MetadataParseError(key, "missing")
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise MetadataParseError(key, f"expected integer, got {value!r}")
    if value < minimum:
        raise MetadataParseError(key, f"must be >= {minimum}, got {value}")
    return value


def parse_metadata(raw: dict) -> BufferState:
    if not isinstance(raw, dict):
        raise MetadataParseError("<root>", "expected a JSON object")
    version = _int_field(raw, "format_version", 1)
    if version != FORMAT_VERSION:
        raise MetadataParseError("format_version", f"unsupported version {version}")
    state = BufferState(
        capacity_tokens=_int_field(raw, "capacity_tokens", 1),
        file_size=_int_field(raw, "file_size", 1),
        seq_len=_int_field(raw, "seq_len", 1),
        dtype_bytes=_int_field(raw, "dtype_bytes", 1),
        total=_int_field(raw, "total"),
    )
    if state.dtype_bytes not in _DTYPES:
        raise MetadataParseError("dtype_bytes", f"must be 2 or 4, got {state.dtype_bytes}")
    if "sizes" not in raw:
        raise MetadataParseError("sizes", "missing")
    sizes = raw["sizes"]
    if not isinstance(sizes, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in sizes):
        raise MetadataParseError("sizes", "expected a list of integers")
    if any(s < 0 or s > state.file_size for s in sizes):
        raise MetadataParseError("sizes", f"entries must lie in [0, {state.file_size}]")
    state.sizes = list(sizes)
    return state


def load_metadata(path: str | os.PathLike) -> BufferState:
    path = Path(path)
    if path.is_dir():
        path = path / METADATA_NAME
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MetadataParseError("<root>", f"invalid JSON: {exc}") from None
    return parse_metadata(raw)


def write_metadata(state: BufferState, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(state.to_json()))
    os.replace(tmp, path)


class ReplayBuffer:
    """Offset-indexed on-disk row store feeding a bounded prefetch queue.

    New rows go to the first file with room for the whole batch. Once no file
    has room, a uniformly random file is picked and the batch overwrites
    uniformly random existing row slots in it, so files never grow past
    ``file_size`` rows.
    """

    def __init__(self, config: BufferConfig, seed: int | None = None):
        self.config = config
        self.dtype = _DTYPES[config.dtype_bytes]
        self.data_dir = Path(config.data_dir)
        try:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise BufferSetupError(f"cannot create data dir {self.data_dir}: {exc}") from exc
        if not os.access(self.data_dir, os.W_OK):
            raise BufferSetupError(f"data dir {self.data_dir} is not writable")

        seeds = np.random.SeedSequence(seed).spawn(2)
        self._rng = np.random.default_rng(seeds[0])
        self._prefetch_rng = np.random.default_rng(seeds[1])

        self.queue: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
        self._io_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._adds_since_save = 0
        self.max_queue_occupancy = 0
        self.files_read = 0
        # (file index, row slots) touched by the most recent add
        self.last_write: tuple[int, np.ndarray] | None = None

        meta = self.data_dir / METADATA_NAME
        if meta.exists():
            self.state = load_metadata(meta)
            self._check_compatible(self.state)
        else:
            self.state = BufferState(
                config.capacity_tokens, config.file_size, config.seq_len, config.dtype_bytes,
                [0] * config.file_count, 0,
            )
        self._fds = []
        try:
            for i in range(config.file_count):
                self._fds.append(os.open(self.file_path(i), os.O_RDWR | os.O_CREAT, 0o644))
        except OSError as exc:
            self._close_fds()
            raise BufferSetupError(f"cannot create buffer files in {self.data_dir}: {exc}") from exc
        if not meta.exists():
            self.save_metadata()

    def _check_compatible(self, state: BufferState) -> None:
        cfg = self.config
        for name in ("dtype_bytes", "seq_len", "file_size", "capacity_tokens"):
            if getattr(state, name) != getattr(cfg, name):
                raise IncompatibleStoreError(
                    f"stored {name}={getattr(state, name)} but config has {getattr(cfg, name)}"
                )
        if state.file_count != cfg.file_count:
            raise IncompatibleStoreError(f"stored metadata lists {state.file_count} files, expected {cfg.file_count}")

    # -- layout ------------------------------------------------------------

    def file_path(self, i: int) -> Path:
        return self.data_dir / f"buffer_{i}.bin"

    @property
    def file_count(self) -> int:
        return self.config.file_count

    @property
    def sizes(self) -> list[int]:
        return list(self.state.sizes)

    @property
    def total(self) -> int:
        return self.state.total

    @property
    def resident_rows(self) -> int:
        return sum(self.state.sizes)

    # -- writing -------------------------------------------------------------

    def _encode(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] != self.config.seq_len:
            raise ValueError(f"batch must have shape (n, {self.config.seq_len}), got {batch.shape}")
        if batch.size and (batch.min() < 0 or batch.max() > np.iinfo(self.dtype).max):
            raise ValueError(f"token ids do not fit in {self.config.dtype_bytes}-byte storage")
        return np.ascontiguousarray(batch, dtype=self.dtype)

    def add(self, batch) -> None:
        rows = self._encode(batch)
        n = rows.shape[0]
        cfg = self.config
        if n > cfg.file_size:
            raise OversizeBatchError(f"batch of {n} rows exceeds file_size={cfg.file_size}")
        if n == 0:
            return
        sizes = self.state.sizes
        target = next((i for i, s in enumerate(sizes) if s + n <= cfg.file_size), None)
        with self._io_lock:
            if target is not None:
                os.pwrite(self._fds[target], rows.tobytes(), sizes[target] * cfg.row_bytes)
                slots = np.arange(sizes[target], sizes[target] + n)
                sizes[target] += n
            else:
                target = int(self._rng.integers(cfg.file_count))
                filled = sizes[target]
                slots = self._rng.choice(filled, size=n, replace=n > filled)
                fd = self._fds[target]
                for slot, row in zip(slots, rows):
                    os.pwrite(fd, row.tobytes(), int(slot) * cfg.row_bytes)
            self.state.total += n
            self.last_write = (target, slots)
        self._adds_since_save += 1
        if self._adds_since_save >= cfg.metadata_every:
            self.save_metadata()

    def save_metadata(self) -> None:
        write_metadata(self.state, self.data_dir / METADATA_NAME)
        self._adds_since_save = 0

    # -- reading ------------------------------------------------------------

    def read_file(self, i: int) -> np.ndarray:
        """All filled rows of file ``i`` as a ``(sizes[i], seq_len)`` array."""
        with self._io_lock:
            n = self.state.sizes[i]
            raw = os.pread(self._fds[i], n * self.config.row_bytes, 0)
        return np.frombuffer(raw, dtype=self.dtype).reshape(n, self.config.seq_len)

    def prefetch_once(self) -> bool:
        """Read one random non-empty file into the queue if there is room."""
        if self.queue.full():
            return False
        candidates = [i for i, s in enumerate(self.state.sizes) if s > 0]
        if not candidates:
            return False
        i = candidates[int(self._prefetch_rng.integers(len(candidates)))]
        item = (self.read_file(i), i)
        self.files_read += 1
        self.queue.put_nowait(item)
        self.max_queue_occupancy = max(self.max_queue_occupancy, self.queue.qsize())
        return True

    def fill_queue(self) -> int:
        """Synchronously top the queue up to capacity; returns items added."""
        added = 0
        while self.prefetch_once():
            added += 1
        return added

    def _prefetch_loop(self) -> None:
        while not self._stop.is_set():
            if not self.prefetch_once():
                self._stop.wait(self.config.idle_interval)

    def start_prefetch(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._prefetch_loop, name="replay-prefetch", daemon=True)
        self._thread.start()

    @property
    def prefetching(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def get_batch(self, fraction: float, effective_batch_size: int) -> np.ndarray:
        """``floor(fraction * effective_batch_size)`` rows from one prefetched file.

        Rows are drawn without replacement, or with replacement when the file
        holds fewer rows than requested. Returns an empty ``(0, seq_len)``
        array when nothing has been prefetched yet.
        """
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        want = int(np.floor(fraction * effective_batch_size))
        try:
            rows, _ = self.queue.get_nowait()
        except queue.Empty:
            return np.empty((0, self.config.seq_len), dtype=np.int64)
        idx = self._rng.choice(rows.shape[0], size=want, replace=want > rows.shape[0])
        return rows[idx].astype(np.int64)

    # -- lifecycle --------------------------------------------------------

    def stop_prefetch(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def shutdown(self) -> None:
        self.stop_prefetch()
        if self._fds:
            if self._adds_since_save:
                self.save_metadata()
            self._close_fds()

    def _close_fds(self) -> None:
        for fd in self._fds:
            os.close(fd)
        self._fds = []

    def __enter__(self) -> "ReplayBuffer":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
