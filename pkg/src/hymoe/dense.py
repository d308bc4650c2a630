"""Toy decoder-style language model whose FFN layers get upcycled.

The architecture is deliberately plain: learned token + position embeddings,
pre-norm causal multi-head attention, a two-matmul SiLU feed-forward, RMS
norms without bias, and a linear output head. Everything runs in float64 on
the autodiff tape from :mod:`hymoe.tensor`.

Every sample is padded to ``max_seq_len`` before the layer stack runs and the
logits are sliced back afterwards. Fixed internal shapes keep prefix logits
bitwise reproducible: evaluating a sequence and any of its prefixes performs
identical reductions position by position, so causality holds exactly rather
than merely within a tolerance. Masked attention scores are *set* to a large
negative constant (not added to) for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    gather_rows,
    masked_fill,
    matmul,
    narrow,
    power,
    silu,
    softmax_axis,
    tmean,
    transpose,
)

MASK_VALUE = -1e30
NORM_EPS = 1e-6


@dataclass(frozen=True)
class DenseConfig:
    """Shape of the dense base model. Desk-scale defaults train in minutes."""

    vocab_size: int = 512
    hidden_size: int = 64
    num_layers: int = 4
    ffn_hidden: int = 256
    num_heads: int = 2
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "num_layers", "ffn_hidden", "num_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"DenseConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "ffn_hidden": self.ffn_hidden,
            "num_heads": self.num_heads,
            "max_seq_len": self.max_seq_len,
        }


@dataclass
class DenseCheckpoint:
    """A dense config plus its named parameters."""

    config: DenseConfig
    params: dict[str, Parameter]
    meta: dict = field(default_factory=dict)

    def param(self, name: str) -> Parameter:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"checkpoint has no parameter named {name!r}") from None


def init_dense(config: DenseConfig, seed: int = 0) -> DenseCheckpoint:
    """Fresh random dense checkpoint; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    h, f, v = config.hidden_size, config.ffn_hidden, config.vocab_size

    def mat(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols))

    params: dict[str, Parameter] = {}

    def put(name, data):
        params[name] = Parameter(name, data, trainable=True)

    put("embed.tok", mat(v, h, 0.08))
    put("embed.pos", mat(config.max_seq_len, h, 0.08))
    for l in range(config.num_layers):
        pre = f"layer.{l}"
        put(f"{pre}.norm1", np.ones(h))
        for w in ("wq", "wk", "wv", "wo"):
            put(f"{pre}.attn.{w}", mat(h, h, h**-0.5))
        put(f"{pre}.norm2", np.ones(h))
        put(f"{pre}.ffn.w1", mat(h, f, h**-0.5))
        put(f"{pre}.ffn.w2", mat(f, h, f**-0.5))
    put("final_norm", np.ones(h))
    put("head", mat(h, v, h**-0.5))
    return DenseCheckpoint(config=config, params=params, meta={"step": 0, "seed": seed})


# ---------------------------------------------------------------------------
# building blocks shared with the hybrid model


def rmsnorm(x: Tensor, scale: Tensor) -> Tensor:
    ms = tmean(x * x, axis=1, keepdims=True)
    return x * power(ms + NORM_EPS, -0.5) * scale


def ffn_forward(x: Tensor, w1: Tensor | Parameter, w2: Tensor | Parameter) -> Tensor:
    """Two-layer feed-forward with SiLU between; the function every expert computes."""
    w1 = w1.value if isinstance(w1, Parameter) else w1
    w2 = w2.value if isinstance(w2, Parameter) else w2
    return matmul(silu(matmul(x, w1)), w2)


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              num_heads: int, mask: np.ndarray) -> Tensor:
    """Causal multi-head attention over one sample's (padded) positions."""
    length, hidden = x.shape
    head_dim = hidden // num_heads
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    scale = head_dim**-0.5
    heads = []
    for hd in range(num_heads):
        qh = narrow(q, 1, hd * head_dim, head_dim)
        kh = narrow(k, 1, hd * head_dim, head_dim)
        vh = narrow(v, 1, hd * head_dim, head_dim)
        scores = matmul(qh, transpose(kh)) * scale
        probs = softmax_axis(masked_fill(scores, mask, MASK_VALUE), 1)
        heads.append(matmul(probs, vh))
    return matmul(concat(heads, axis=1), wo)


def _validate_tokens(tokens: Sequence[int], config: DenseConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError(f"token sequence must be 1-D and non-empty, got shape {ids.shape}")
    if ids.size > config.max_seq_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = ids[(ids < 0) | (ids >= config.vocab_size)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    return ids


def pad_ids(ids: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.int64)
    out[: ids.size] = ids
    return out


def embed(ckpt: DenseCheckpoint, padded_ids: np.ndarray) -> Tensor:
    tok = gather_rows(ckpt.param("embed.tok").value, padded_ids)
    return tok + ckpt.param("embed.pos").value


def dense_layer(ckpt: DenseCheckpoint, layer: int, x: Tensor, mask: np.ndarray) -> Tensor:
    cfg = ckpt.config
    pre = f"layer.{layer}"
    normed = rmsnorm(x, ckpt.param(f"{pre}.norm1").value)
    h = x + attention(
        normed,
        ckpt.param(f"{pre}.attn.wq").value,
        ckpt.param(f"{pre}.attn.wk").value,
        ckpt.param(f"{pre}.attn.wv").value,
        ckpt.param(f"{pre}.attn.wo").value,
        cfg.num_heads,
        mask,
    )
    u = rmsnorm(h, ckpt.param(f"{pre}.norm2").value)
    return h + ffn_forward(u, ckpt.param(f"{pre}.ffn.w1"), ckpt.param(f"{pre}.ffn.w2"))


def head_logits(ckpt: DenseCheckpoint, x: Tensor, length: int) -> Tensor:
    normed = rmsnorm(x, ckpt.param("final_norm").value)
    logits = matmul(normed, ckpt.param("head").value)
    return narrow(logits, 0, 0, length)


def head_logits_flat(ckpt, x: Tensor, lengths: Sequence[int], stride: int) -> list[Tensor]:
    """Final norm + head over a flattened batch; per-sample [T_b x vocab] slices."""
    normed = rmsnorm(x, ckpt.param("final_norm").value)
    logits = matmul(normed, ckpt.param("head").value)
    return [narrow(logits, 0, b * stride, t_len) for b, t_len in enumerate(lengths)]


def dense_forward(ckpt: DenseCheckpoint, tokens: Sequence[int]) -> Tensor:
    """Causal logits for one sequence: [T x vocab], position t sees tokens <= t."""
    ids = _validate_tokens(tokens, ckpt.config)
    L = ckpt.config.max_seq_len
    mask = causal_mask(L)
    x = embed(ckpt, pad_ids(ids, L))
    for l in range(ckpt.config.num_layers):
        x = dense_layer(ckpt, l, x, mask)
    return head_logits(ckpt, x, ids.size)


def dense_forward_batch(ckpt: DenseCheckpoint, samples: Sequence[Sequence[int]]) -> list[Tensor]:
    """Per-sample logits; each sample is an independent graph over shared weights."""
    return [dense_forward(ckpt, sample) for sample in samples]
