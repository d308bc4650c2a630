"""Segment-level MoE: sliding-window segments routed by expert choice.

Each sample's first ``floor(T / window)`` windows become segments; a segment
embedding is the mean of its token vectors. Experts pick segments rather than
the other way round: every expert independently takes its top-r segments from
the expert-to-segment affinity matrix, which guarantees a perfectly even
load (exactly r segments per expert). Segment outputs are broadcast back to
their member tokens and fused with the token path through two learned
matrices, initialized to (identity, zero) so a fresh hybrid layer reproduces
the token path bit for bit.
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
    narrow,
    reshape,
    scatter_rows,
    softmax_axis,
    take_along_cols,
    top_k_rows,
    transpose,
)


@dataclass(frozen=True)
class SegmentMoEConfig:
    num_experts: int = 6
    window: int = 32
    capacity_factor: float = 1.0
    hidden_size: int = 64

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.capacity_factor < 1:
            raise ValueError(f"capacity_factor must be >= 1, got {self.capacity_factor}")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "window": self.window,
            "capacity_factor": self.capacity_factor,
            "hidden_size": self.hidden_size,
        }


@dataclass
class SegmentationPlan:
    """Where each segment lives inside a flattened [B * row_stride, hidden] batch.

    ``spans[v] = (sample, start, end)`` in token coordinates; flattened row
    indices are ``sample * row_stride + t``. Tokens past the last full window
    of a sample are recorded in ``leftover`` and receive no segment output.
    """

    batch_size: int
    lengths: tuple[int, ...]
    window: int
    row_stride: int
    spans: list[tuple[int, int, int]]
    leftover: list[tuple[int, int, int]]

    @property
    def total_segments(self) -> int:
        return len(self.spans)

    def segments_per_sample(self, sample: int) -> int:
        return self.lengths[sample] // self.window

    def position(self, v: int) -> int:
        """0-based window position of segment v inside its sample."""
        return self.spans[v][1] // self.window


def partition_segments(
    lengths: int | tuple[int, ...] | list[int],
    cfg: SegmentMoEConfig,
    batch_size: int | None = None,
    row_stride: int | None = None,
) -> SegmentationPlan:
    """Plan disjoint, contiguous windows of exactly ``cfg.window`` tokens.

    ``lengths`` is either one length shared by all samples (with
    ``batch_size``) or one length per sample. Samples shorter than the window
    contribute no segments; their tokens are all leftover.
    """
    if cfg.window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(lengths, int):
        if batch_size is None:
            raise ValueError("batch_size required when a single length is given")
        lengths = (lengths,) * batch_size
    lengths = tuple(int(t) for t in lengths)
    stride = row_stride if row_stride is not None else max(lengths)
    spans: list[tuple[int, int, int]] = []
    leftover: list[tuple[int, int, int]] = []
    for b, t_len in enumerate(lengths):
        p = t_len // cfg.window
        for j in range(p):
            spans.append((b, j * cfg.window, (j + 1) * cfg.window))
        if p * cfg.window < t_len:
            leftover.append((b, p * cfg.window, t_len))
    return SegmentationPlan(
        batch_size=len(lengths),
        lengths=lengths,
        window=cfg.window,
        row_stride=stride,
        spans=spans,
        leftover=leftover,
    )


def average_matrix(plan: SegmentationPlan) -> np.ndarray:
    """[V x B*stride] constant matrix averaging each segment's token rows."""
    mat = np.zeros((plan.total_segments, plan.batch_size * plan.row_stride))
    for v, (b, start, end) in enumerate(plan.spans):
        rows = b * plan.row_stride + np.arange(start, end)
        mat[v, rows] = 1.0 / plan.window
    return mat


def broadcast_matrix(plan: SegmentationPlan) -> np.ndarray:
    """[B*stride x V] constant matrix copying a segment's row to its tokens.

    Leftover and padding rows stay all-zero, so those tokens receive no
    segment-path contribution.
    """
    mat = np.zeros((plan.batch_size * plan.row_stride, plan.total_segments))
    for v, (b, start, end) in enumerate(plan.spans):
        rows = b * plan.row_stride + np.arange(start, end)
        mat[rows, v] = 1.0
    return mat


def embed_segments(plan: SegmentationPlan, hidden: Tensor) -> Tensor:
    """Mean token vector per segment: [V x hidden] from [B*stride x hidden]."""
    expected = plan.batch_size * plan.row_stride
    if hidden.shape[0] != expected:
        raise ShapeError(f"hidden rows {hidden.shape} inconsistent with plan rows {expected}")
    return matmul(Tensor(average_matrix(plan)), hidden)


def compute_capacity(total_segments: int, cfg: SegmentMoEConfig) -> int:
    """Segments per expert: floor(V * c / N), clamped to at least 1."""
    if total_segments < 1:
        raise ValueError(f"total_segments must be >= 1, got {total_segments}")
    r = int(total_segments * cfg.capacity_factor) // cfg.num_experts
    return max(r, 1)


@dataclass
class ExpertChoiceAssignment:
    """The (I, D, U) triple mapping each expert to its r chosen segments."""

    indices: np.ndarray      # I: [N x r] segment ids, r distinct per row
    weights: Tensor          # D: [N x r], D[i, j] = gate_matrix[i, I[i, j]]
    onehot: np.ndarray       # U: [N x r x V], one-hot over segments
    capacity: int
    gate_matrix: Tensor      # [N x V] expert-to-segment affinities


def expert_choice_route(
    router_weight: Tensor | Parameter, seg_emb: Tensor, capacity: int
) -> ExpertChoiceAssignment:
    """Each expert takes its top-``capacity`` segments by affinity.

    Affinities are softmax-normalized over experts per segment, then the
    matrix is transposed so rows are experts. Row-wise top-k uses the global
    tie rule (lower segment id wins).
    """
    w = router_weight.value if isinstance(router_weight, Parameter) else router_weight
    total = seg_emb.shape[0]
    if capacity > total:
        raise ValueError(f"capacity {capacity} exceeds segment count {total}")
    gate_matrix = transpose(softmax_axis(matmul(seg_emb, w), axis=1))
    indices = top_k_rows(gate_matrix.data, capacity)
    weights = take_along_cols(gate_matrix, indices)
    num_experts = gate_matrix.shape[0]
    onehot = np.zeros((num_experts, capacity, total))
    rows = np.repeat(np.arange(num_experts), capacity)
    cols = np.tile(np.arange(capacity), num_experts)
    onehot[rows, cols, indices.reshape(-1)] = 1.0
    return ExpertChoiceAssignment(indices, weights, onehot, capacity, gate_matrix)


def segment_moe_forward(
    experts: list[tuple[Parameter, Parameter]],
    assign: ExpertChoiceAssignment,
    seg_emb: Tensor,
) -> Tensor:
    """Weighted scatter of expert outputs back onto segment rows.

    Expert i processes the segments it chose; its j-th output row lands on
    segment I[i, j] scaled by D[i, j]. Segments no expert picked stay zero.
    """
    num_experts = assign.indices.shape[0]
    if len(experts) != num_experts:
        raise ShapeError(f"expert count {len(experts)} vs assignment rows {num_experts}")
    total = seg_emb.shape[0]
    out = None
    for i, (w1, w2) in enumerate(experts):
        chosen = assign.indices[i]
        x_in = gather_rows(seg_emb, chosen)
        y = ffn_forward(x_in, w1, w2)
        d_row = reshape(narrow(assign.weights, 0, i, 1), (assign.capacity, 1))
        contrib = scatter_rows(y * d_row, chosen, total)
        out = contrib if out is None else out + contrib
    return out


@dataclass
class FusionWeights:
    """Per-layer fusion pair; starts as (identity, zero) after upcycling."""

    token: Parameter
    segment: Parameter


def fuse_layer_outputs(
    o_tok: Tensor,
    o_seg: Tensor | None,
    plan: SegmentationPlan,
    fusion: FusionWeights,
) -> Tensor:
    """Per token: o_tok @ W_tok + (segment row of the token) @ W_seg.

    Tokens without a segment (leftover or padding rows) get the token path
    only. With no segments at all the segment term vanishes entirely.
    """
    fused = matmul(o_tok, fusion.token.value)
    if o_seg is not None and plan.total_segments > 0:
        spread = matmul(Tensor(broadcast_matrix(plan)), o_seg)
        fused = fused + matmul(spread, fusion.segment.value)
    return fused
