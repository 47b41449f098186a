"""Listwise Multi-HSTU: adaptor, HSTU stack over [t_o || w_o], listwise head and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingError
from .layers import HstuBlock, Init, Mlp, Module
from .tensor import Tensor


@dataclass
class ListwiseOutput:
    logits: Tensor                 # [..., m]
    stack_states: list[Tensor]     # M_1..M_I

    @property
    def probs(self) -> Tensor:
        return T.sigmoid(self.logits)


class Lmh(Module):
    def __init__(self, d: int, d_t: int, d_prime: int, depth: int, init: Init, heads: int = 1,
                 adaptor_hidden=None, head_hidden=None, eps: float = 1e-6, zero_head: bool = False):
        if depth < 1:
            raise ContractError(f"LMH depth I must be >= 1, got {depth}", "lmh")
        width = d_t + d_prime
        self.d = d
        self.width = width
        self.adaptor = Mlp([d, *(adaptor_hidden if adaptor_hidden is not None else [d]), d_t], init)
        self.blocks = [HstuBlock(width, init, "full", heads, eps) for _ in range(depth)]
        hidden = list(head_hidden) if head_hidden is not None else [max(width // 2, 1)]
        self.head = Mlp([width, *hidden, 1], init, zero_last=zero_head)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def adapt(self, reprs: Tensor) -> Tensor:
        """Row-wise MLP over the target list's x'' rows."""
        return self.adaptor(reprs)

    def __call__(self, reprs: Tensor, context: Tensor, keep_states: bool = False) -> ListwiseOutput:
        """reprs [..., m, D] (x'' in target order), context w [..., m, D'] -> listwise logits."""
        t = self.adapt(reprs)
        if t.shape[:-1] != context.shape[:-1]:
            raise ContractError(f"lmh: adaptor rows {t.shape} and context rows {context.shape} differ", "lmh")
        x = T.concat([t, context], axis=-1)
        states = []
        for block in self.blocks:
            x = block(x)
            if keep_states:
                states.append(x)
        logits = T.reshape(self.head(x), x.shape[:-1])
        return ListwiseOutput(logits, states)


def listwise_loss(probs: Tensor, clicks) -> Tensor:
    """Mean BCE over the m positions."""
    from .ucdt import binary_cross_entropy

    clicks = np.asarray(clicks)
    if clicks.shape != probs.shape:
        raise ContractError(f"listwise_loss: clicks {clicks.shape} vs probs {probs.shape}", "lmh")
    return binary_cross_entropy(probs, clicks)


def joint_loss(l1: Tensor, l2: Tensor, w1: float = 1.0, w2: float = 1.0) -> Tensor:
    """L = L1 + L2 (weights default to 1 and are skipped then)."""
    for tag, value in (("L1", l1), ("L2", l2)):
        if not math.isfinite(value.item()):
            raise TrainingError(f"{tag} is not finite ({value.item()})")
    a = l1 if w1 == 1.0 else l1 * w1
    b = l2 if w2 == 1.0 else l2 * w2
    return a + b
