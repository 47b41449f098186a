"""Context-aware User History and Target: page self-attention (PIAU) and position-wise target attention (PTAU)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import Init, Module, SelfAttention, TargetAttention
from .tensor import Tensor


class Cuht(Module):
    """One shared self-attention for every page, one target attention per position."""

    def __init__(self, d_prime: int, init: Init, heads: int = 1, scorer_hidden: int | None = None,
                 normalize: bool = True):
        self.d_prime = d_prime
        self.page_attention = SelfAttention(d_prime, init, heads)
        self.position_attention = TargetAttention(d_prime, init, scorer_hidden, normalize)

    def piau(self, pages: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """pages [..., m, D'] -> H with the same shape; every page uses the same parameters."""
        if pages.ndim < 2 or pages.shape[-1] != self.d_prime:
            raise ContractError(f"piau: page width {pages.shape[-1:]} != D'={self.d_prime}", "cuht")
        if pages.shape[-2] < 1:
            raise ContractError("piau: pages must hold m >= 1 rows", "cuht")
        return self.page_attention(pages, valid)

    def ptau(self, target: Tensor, history: Tensor, history_valid: np.ndarray | None = None) -> Tensor:
        """target H [..., m, D'], history H [..., L, m, D'] -> w [..., m, D'].

        w_o attends from target row o over row o of each history page. Pages
        marked invalid in ``history_valid`` [..., L] are excluded; a request
        with no valid page gets w_o = 0.
        """
        if history.ndim < 3 or history.shape[-3] == 0:
            raise ContractError("ptau: empty history; use the zero-history fallback", "cuht")
        if history.shape[:-3] != target.shape[:-2] or history.shape[-2:] != target.shape[-2:]:
            raise ContractError(f"ptau: target {target.shape} and history {history.shape} disagree", "cuht")
        nd = history.ndim
        keys = T.transpose(history, list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1])  # [..., m, L, D']
        valid = None
        if history_valid is not None:
            hv = np.asarray(history_valid, dtype=bool)
            valid = np.broadcast_to(hv[..., None, :], keys.shape[:-1])
        return self.position_attention(target, keys, valid)

    def zero_context(self, target: Tensor) -> Tensor:
        return T.Tensor(np.zeros(target.shape), dtype=target.dtype)

    def __call__(self, history_pages: Tensor | None, target_page: Tensor,
                 history_valid: np.ndarray | None = None) -> Tensor:
        h_target = self.piau(target_page)
        if history_pages is None or history_pages.shape[-3] == 0:
            return self.zero_context(h_target)
        h_hist = self.piau(history_pages)
        return self.ptau(h_target, h_hist, history_valid)


def piau_encode(pages: list[Tensor], cuht: Cuht) -> list[Tensor]:
    """H_k for k = 1..L+1 (last page is the target list)."""
    widths = {p.shape[-1] for p in pages}
    if len(widths) > 1:
        raise ContractError(f"piau_encode: inconsistent page widths {sorted(widths)}", "cuht")
    return [cuht.piau(p) for p in pages]


def ptau_attend(encodings: list[Tensor], cuht: Cuht) -> Tensor:
    """w [m, D'] from encodings H_1..H_L, H_{L+1} (target last)."""
    if len(encodings) < 2:
        raise ContractError("ptau_attend: L = 0 history pages", "cuht")
    history = T.concat([T.reshape(h, (1,) + h.shape) for h in encodings[:-1]], axis=0)
    return cuht.ptau(encodings[-1], history)
