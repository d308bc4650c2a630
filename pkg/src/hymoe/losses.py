"""Next-token-prediction loss, load-balance loss, and the combined report.

The balance term is computed per layer from the token-level gate history and
summed: alpha * N * sum_i f_i * p_i, where f_i is the fraction of selections
that went to expert i (each token contributes K selections, normalized by
K*T) and p_i is the mean gate value of expert i over all T tokens. f is a
piecewise-constant selection statistic and carries no gradient; p rides the
tape, so the router is steered away from collapse through the gate values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, gather_rows, log_softmax_axis, take_pairs, tmean, tsum
from .token_moe import GateAssignment


def ntp_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the target ids: -(1/T) sum log p(x_t)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    if targets.ndim != 1 or targets.size != logits.shape[0]:
        raise ShapeError(
            f"targets length {targets.shape} does not match logits rows {logits.shape}"
        )
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError(f"target id outside vocabulary of size {logits.shape[1]}")
    logp = log_softmax_axis(logits, axis=1)
    picked = take_pairs(logp, np.arange(targets.size), targets)
    return -tmean(picked)


@dataclass
class BalanceResult:
    loss: Tensor
    per_layer_f: list[np.ndarray]
    per_layer_p: list[np.ndarray]


def load_balance_loss(
    gate_history: Sequence[GateAssignment],
    alpha: float,
    token_rows: np.ndarray | None = None,
    include_shared: bool = True,
) -> BalanceResult:
    """Per-layer alpha * N * sum_i f_i * p_i, summed over layers.

    ``gate_history`` holds one GateAssignment per layer for the batch.
    ``token_rows`` restricts the statistics to those rows (used to drop
    padding positions); by default every row counts. With
    ``include_shared=False`` the always-selected expert 0 is dropped from the
    sum (its f is the constant 1/K in shared-normalized mode, so including it
    only shifts the loss by a near-constant); the reported f/p vectors always
    cover all experts.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    total: Tensor | None = None
    per_layer_f: list[np.ndarray] = []
    per_layer_p: list[np.ndarray] = []
    for assign in gate_history:
        n = assign.num_experts
        dense = assign.dense_gates()
        indices = assign.indices
        if token_rows is not None:
            dense = gather_rows(dense, token_rows)
            indices = indices[token_rows]
        t_count = indices.shape[0]
        counts = np.bincount(indices.reshape(-1), minlength=n)
        f = counts / (assign.top_k * t_count)
        p = tmean(dense, axis=0)
        f_term = f if include_shared else np.concatenate([[0.0], f[1:]])
        layer_loss = tsum(p * Tensor(f_term)) * (alpha * n)
        per_layer_f.append(f)
        per_layer_p.append(p.data.copy())
        total = layer_loss if total is None else total + layer_loss
    if total is None:
        total = Tensor(0.0)
    return BalanceResult(loss=total, per_layer_f=per_layer_f, per_layer_p=per_layer_p)


@dataclass
class LossReport:
    """Scalars and routing statistics of one step; total = l_ntp + l_balance."""

    l_ntp: float
    l_balance: float
    total: float
    per_layer_f: list[list[float]]
    per_layer_p: list[list[float]]

    def to_json_dict(self, step: int) -> dict:
        return {
            "step": step,
            "l_ntp": self.l_ntp,
            "l_balance": self.l_balance,
            "total": self.total,
            "per_layer_f": self.per_layer_f,
            "per_layer_p": self.per_layer_p,
        }
