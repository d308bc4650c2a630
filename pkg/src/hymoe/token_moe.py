"""Token-level MoE: a shared expert plus routed experts with normalized gating.

The router scores all experts with one softmax; expert slot 0 is the shared
expert. Two gating modes:

* ``"vanilla"``     — plain token-choice: the top-K affinity scores become the
  gate values unchanged, everything else gates to 0. The gates of a token do
  not generally sum to 1.
* ``"shared-normalized"`` — the shared expert is always selected, the best
  K-1 of the remaining experts join it, and the K selected scores are divided
  by their sum, so each token's gates add up to exactly 1.

Selections are discrete and fixed during backprop; gradients flow only
through the selected scores' values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import ffn_forward
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    gather_rows,
    matmul,
    reshape,
    scatter_cols,
    scatter_rows,
    softmax_axis,
    take_along_cols,
    take_pairs,
    tsum,
)

GATING_MODES = ("vanilla", "shared-normalized")


@dataclass(frozen=True)
class TokenMoEConfig:
    """Expert count includes the shared expert at slot 0."""

    num_experts: int = 6
    top_k: int = 2
    hidden_size: int = 64

    def __post_init__(self):
        if self.num_experts < 2:
            raise ValueError(f"num_experts must be >= 2, got {self.num_experts}")
        if not 2 <= self.top_k <= self.num_experts:
            raise ValueError(
                f"top_k must satisfy 2 <= K <= num_experts, got K={self.top_k}, N={self.num_experts}"
            )
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "hidden_size": self.hidden_size,
        }


@dataclass
class GateAssignment:
    """Per-token expert selection and differentiable gate values.

    ``indices`` is [T x K] (slot 0 holds the shared expert in
    shared-normalized mode), ``gates`` the matching gate values, ``scores``
    the full [T x N] affinity matrix, and ``norm`` the per-token scaling
    factor (None in vanilla mode, where no normalization happens).
    """

    mode: str
    num_experts: int
    top_k: int
    indices: np.ndarray
    gates: Tensor
    scores: Tensor
    norm: Tensor | None

    def dense_gates(self) -> Tensor:
        """[T x N] gate matrix; unselected experts are exactly 0."""
        return scatter_cols(self.gates, self.indices, self.num_experts)

    def selection_counts(self) -> np.ndarray:
        """How many tokens selected each expert (length N)."""
        return np.bincount(self.indices.reshape(-1), minlength=self.num_experts)


def token_affinity_scores(router_weight: Tensor | Parameter, x: Tensor) -> Tensor:
    """Affinity rows: softmax over experts of x @ W, one row per token."""
    w = router_weight.value if isinstance(router_weight, Parameter) else router_weight
    return softmax_axis(matmul(x, w), axis=1)


def compute_token_gates(scores: Tensor, cfg: TokenMoEConfig, mode: str) -> GateAssignment:
    if mode not in GATING_MODES:
        raise ValueError(f"unknown gating mode {mode!r}; expected one of {GATING_MODES}")
    if scores.ndim != 2 or scores.shape[1] != cfg.num_experts:
        raise ShapeError(
            f"scores shape {scores.shape} inconsistent with num_experts {cfg.num_experts}"
        )
    T = scores.shape[0]
    k = cfg.top_k

    if mode == "vanilla":
        order = np.argsort(-scores.data, axis=1, kind="stable")[:, :k].astype(np.int64)
        gates = take_along_cols(scores, order)
        return GateAssignment(mode, cfg.num_experts, k, order, gates, scores, None)

    # shared-normalized: slot 0 is forced, then the best K-1 routed experts.
    routed = scores.data[:, 1:]
    routed_order = np.argsort(-routed, axis=1, kind="stable")[:, : k - 1].astype(np.int64) + 1
    indices = np.concatenate([np.zeros((T, 1), dtype=np.int64), routed_order], axis=1)
    selected = take_along_cols(scores, indices)
    norm = tsum(selected, axis=1, keepdims=True)
    gates = selected / norm
    return GateAssignment(mode, cfg.num_experts, k, indices, gates, scores, norm)


def token_moe_forward(
    routed_experts: list[tuple[Parameter, Parameter]],
    shared_expert: tuple[Parameter, Parameter],
    assign: GateAssignment,
    x: Tensor,
) -> Tensor:
    """Combine expert outputs: sum over selected experts of gate * FFN_i(x_t).

    ``routed_experts`` hold slots 1..N-1; ``shared_expert`` is slot 0 (its
    parameters are expected to be frozen — the flag lives on the Parameters).
    """
    experts = [shared_expert] + list(routed_experts)
    if len(experts) != assign.num_experts:
        raise ShapeError(
            f"expert count {len(experts)} does not match assignment num_experts {assign.num_experts}"
        )
    if x.shape[0] != assign.indices.shape[0]:
        raise ShapeError(f"token count disagrees: x {x.shape} vs gates {assign.indices.shape}")
    out = None
    for i, (w1, w2) in enumerate(experts):
        rows, slots = np.nonzero(assign.indices == i)
        if rows.size == 0:
            continue
        inputs = gather_rows(x, rows)
        y = ffn_forward(inputs, w1, w2)
        weights = reshape(take_pairs(assign.gates, rows, slots), (rows.size, 1))
        contrib = scatter_rows(y * weights, rows, x.shape[0])
        out = contrib if out is None else out + contrib
    if out is None:  # unreachable for valid assignments, but keep the contract
        out = Tensor(np.zeros_like(x.data))
    return out
