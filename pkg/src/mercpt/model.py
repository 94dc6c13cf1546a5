"""Neural n-gram language model with hand-written backpropagation.

The model embeds the ``context`` tokens preceding each position, concatenates
the embeddings, applies one tanh hidden layer and a softmax over the
vocabulary. Every position ``t`` in ``[context, seq_len)`` of every row is a
prediction target. All arithmetic is float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

PARAM_FIELDS = ("embeddings", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int
    context: int
    hidden_dim: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")

    @property
    def param_count(self) -> int:
        v, d, n, h = self.vocab_size, self.embed_dim, self.context, self.hidden_dim
        return v * d + n * d * h + h + h * v + v


@dataclass
class ModelParams:
    """Model weights. Also used to hold gradients, which share the layout."""

    embeddings: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dims(self) -> ModelDims:
        vocab, embed = self.embeddings.shape
        return ModelDims(vocab, embed, self.w1.shape[0] // embed, self.w1.shape[1])

    def arrays(self) -> Iterator[np.ndarray]:
        for name in PARAM_FIELDS:
            yield getattr(self, name)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_FIELDS:
            yield name, getattr(self, name)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, dims: ModelDims) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != dims.param_count:
            raise ValueError(f"expected {dims.param_count} values, got {vec.size}")
        out, pos = [], 0
        for shape in param_shapes(dims):
            n = int(np.prod(shape))
            out.append(vec[pos:pos + n].reshape(shape).copy())
            pos += n
        return cls(*out)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


Gradients = ModelParams


def param_shapes(dims: ModelDims) -> list[tuple[int, ...]]:
    v, d, n, h = dims.vocab_size, dims.embed_dim, dims.context, dims.hidden_dim
    return [(v, d), (n * d, h), (h,), (h, v), (v,)]


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    v, d, n, h = dims.vocab_size, dims.embed_dim, dims.context, dims.hidden_dim
    # an embedding lookup is a one-hot matmul, so its fan-in is 1
    emb = rng.standard_normal((v, d))
    w1 = rng.standard_normal((n * d, h)) / np.sqrt(n * d)
    w2 = rng.standard_normal((h, v)) / np.sqrt(h)
    return ModelParams(emb, w1, np.zeros(h), w2, np.zeros(v))


def _windows(batch: np.ndarray, context: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ValueError(f"batch must be 2-D (rows, seq_len), got shape {batch.shape}")
    if batch.shape[1] < context + 1:
        raise ValueError(f"rows need at least context+1={context + 1} tokens, got {batch.shape[1]}")
    if batch.size and (batch.min() < 0 or batch.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    batch = batch.astype(np.int64, copy=False)
    seq_len = batch.shape[1]
    # ctx[r, p, j] = batch[r, p + j] predicts batch[r, p + context]
    ctx = np.lib.stride_tricks.sliding_window_view(batch, context, axis=1)[:, : seq_len - context]
    return ctx.reshape(-1, context), batch[:, context:].reshape(-1)


def _forward(params: ModelParams, ctx: np.ndarray):
    emb = params.embeddings[ctx].reshape(ctx.shape[0], -1)
    hidden = np.tanh(emb @ params.w1 + params.b1)
    logits = hidden @ params.w2 + params.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return emb, hidden, shifted - log_z


def loss(params: ModelParams, batch: np.ndarray) -> float:
    """Mean next-token cross-entropy in nats per predicted token."""
    ctx, targets = _windows(batch, params.dims.context, params.dims.vocab_size)
    _, _, log_probs = _forward(params, ctx)
    return float(-log_probs[np.arange(targets.size), targets].mean())


def loss_and_grad(params: ModelParams, batch: np.ndarray) -> tuple[float, Gradients]:
    dims = params.dims
    ctx, targets = _windows(batch, dims.context, dims.vocab_size)
    m = targets.size
    emb, hidden, log_probs = _forward(params, ctx)
    value = float(-log_probs[np.arange(m), targets].mean())

    d_logits = np.exp(log_probs)
    d_logits[np.arange(m), targets] -= 1.0
    d_logits /= m

    g_w2 = hidden.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ params.w2.T) * (1.0 - hidden * hidden)
    g_w1 = emb.T @ d_pre
    g_b1 = d_pre.sum(axis=0)
    d_emb = (d_pre @ params.w1.T).reshape(-1, dims.embed_dim)
    g_emb = np.zeros_like(params.embeddings)
    np.add.at(g_emb, ctx.ravel(), d_emb)
    return value, ModelParams(g_emb, g_w1, g_b1, g_w2, g_b2)


# -- checkpoints ------------------------------------------------------------

_HEADER = struct.Struct("<5q")


def save_params(params: ModelParams, path: str | Path) -> None:
    """Write ``vocab, embed, context, hidden, param_count`` as int64 then the doubles."""
    dims = params.dims
    header = _HEADER.pack(dims.vocab_size, dims.embed_dim, dims.context, dims.hidden_dim, dims.param_count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    v, d, n, h, count = _HEADER.unpack_from(raw)
    dims = ModelDims(v, d, n, h)
    if count != dims.param_count:
        raise ValueError(f"{path}: header count {count} does not match dims ({dims.param_count})")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return ModelParams.from_flat(body, dims)
