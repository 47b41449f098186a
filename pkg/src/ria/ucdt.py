"""User and Candidate Dual-Transformer: pointwise CTR from candidates and the user-context series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import HstuBlock, Init, Mlp, Module, TargetAttention
from .tensor import Tensor


@dataclass
class PointwiseOutput:
    reprs: Tensor   # [..., n, D] candidate representations after target attention
    logits: Tensor  # [..., n]

    @property
    def probs(self) -> Tensor:
        return T.sigmoid(self.logits)


class Ucdt(Module):
    def __init__(self, d: int, init: Init, depth: int = 1, heads: int = 1, head_hidden=None,
                 scorer_hidden: int | None = None, normalize: bool = True, eps: float = 1e-6,
                 zero_head: bool = False, query_residual: bool = False):
        self.d = d
        self.query_residual = query_residual
        self.candidate_blocks = [HstuBlock(d, init, "full", heads, eps) for _ in range(depth)]
        self.context_blocks = [HstuBlock(d, init, "causal", heads, eps) for _ in range(depth)]
        self.attention = TargetAttention(d, init, scorer_hidden, normalize)
        hidden = list(head_hidden) if head_hidden is not None else [max(d // 2, 1)]
        self.head = Mlp([d, *hidden, 1], init, zero_last=zero_head)

    def __call__(self, candidates: Tensor, context: Tensor, cand_valid: np.ndarray | None = None,
                 ctx_valid: np.ndarray | None = None) -> PointwiseOutput:
        """candidates [..., n, D], context [..., T, D] -> reprs and pointwise logits."""
        if candidates.shape[-1] != self.d or context.shape[-1] != self.d:
            raise ContractError(f"ucdt: widths {candidates.shape[-1]}/{context.shape[-1]} != D={self.d}", "ucdt")
        if candidates.shape[:-2] != context.shape[:-2]:
            raise ContractError(f"ucdt: batch shapes {candidates.shape} / {context.shape} differ", "ucdt")
        x = candidates
        for block in self.candidate_blocks:
            x = block(x, cand_valid)
        e = context
        for block in self.context_blocks:
            e = block(e, ctx_valid)
        n = x.shape[-2]
        keys = T.expand(e, -3, n)
        valid = None
        if ctx_valid is not None:
            valid = np.broadcast_to(np.asarray(ctx_valid, dtype=bool)[..., None, :], keys.shape[:-1])
        reprs = self.attention(x, keys, valid)
        if self.query_residual:
            reprs = x + reprs
        logits = T.reshape(self.head(reprs), reprs.shape[:-1])
        return PointwiseOutput(reprs, logits)


def bce_from_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Per-element binary cross-entropy, softplus(z) - y z (no reduction)."""
    y = T.as_tensor(np.asarray(labels), logits)
    out = T.softplus(logits) - y * logits
    return out if weights is None else out * T.as_tensor(np.asarray(weights), logits)


def pointwise_loss(probs: Tensor, labels: dict[int, int] | list[tuple[int, int]]) -> Tensor:
    """Mean BCE over the labeled positions (position -> click)."""
    pairs = sorted(labels.items()) if isinstance(labels, dict) else list(labels)
    if not pairs:
        raise ContractError("pointwise_loss: empty label set", "ucdt")
    n = probs.shape[-1]
    idx = np.array([p for p, _ in pairs])
    if idx.min() < 0 or idx.max() >= n:
        raise ContractError(f"pointwise_loss: label position outside [0, {n})", "ucdt")
    y = np.array([float(c) for _, c in pairs])
    picked = T.reshape(T.take_rows(T.reshape(probs, (n, 1)), idx), (len(idx),))
    return binary_cross_entropy(picked, y)


def binary_cross_entropy(probs: Tensor, labels) -> Tensor:
    """mean of -[y log p + (1 - y) log(1 - p)] on probabilities."""
    y = np.asarray(labels, dtype=probs.dtype)
    terms = []
    pos = y == 1
    neg = ~pos
    if pos.any():
        terms.append(T.tsum(T.log(T.take_rows(T.reshape(probs, (-1, 1)), np.flatnonzero(pos.reshape(-1))))))
    if neg.any():
        p_neg = T.take_rows(T.reshape(probs, (-1, 1)), np.flatnonzero(neg.reshape(-1)))
        terms.append(T.tsum(T.log(1.0 - p_neg)))
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return T.neg(total) * (1.0 / y.size)
