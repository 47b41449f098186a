"""Full model assembly, batching of impression records and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RiaConfig
from .cuht import Cuht
from .data import CONTEXT_FIELDS, ITEM_FIELDS, ImpressionRecord
from .errors import ContractError
from .layers import EmbeddingTable, Init, Module, embed_features
from .lmh import ListwiseOutput, Lmh, joint_loss
from .tensor import Tensor
from .ucdt import PointwiseOutput, Ucdt, bce_from_logits

# click-marker rows added to page item embeddings
MARK_NO_CLICK, MARK_CLICK, MARK_TARGET = 0, 1, 2


@dataclass
class Batch:
    request_ids: list[str]
    cand: dict[str, np.ndarray]        # field -> [B, n]
    cand_valid: np.ndarray             # [B, n]
    ctx: dict[str, np.ndarray]         # field -> [B, T]
    ctx_valid: np.ndarray              # [B, T]
    hist: dict[str, np.ndarray]        # field -> [B, L, m]
    hist_click: np.ndarray             # [B, L, m]
    hist_valid: np.ndarray             # [B, L]
    tgt_idx: np.ndarray                # [B, m] candidate index per position
    clicks: np.ndarray                 # [B, m]
    cand_labels: np.ndarray            # [B, n] click for exposed candidates, else 0

    def __len__(self) -> int:
        return len(self.request_ids)

    def take(self, idx) -> "Batch":
        """Sub-batch of the given record indices."""
        idx = np.asarray(idx)
        return Batch([self.request_ids[i] for i in idx],
                     {f: v[idx] for f, v in self.cand.items()}, self.cand_valid[idx],
                     {f: v[idx] for f, v in self.ctx.items()}, self.ctx_valid[idx],
                     {f: v[idx] for f, v in self.hist.items()}, self.hist_click[idx], self.hist_valid[idx],
                     self.tgt_idx[idx], self.clicks[idx], self.cand_labels[idx])

    def target_ids(self) -> dict[str, np.ndarray]:
        return {f: np.take_along_axis(v, self.tgt_idx, axis=1) for f, v in self.cand.items()}


def history_for(rec: ImpressionRecord, cfg: RiaConfig):
    pages = rec.history_pages
    if cfg.history_mode == "clicked":
        pages = [p for p in pages if any(e.click for e in p)]
    return pages[-cfg.L:] if cfg.L > 0 else []


def collate(records: list[ImpressionRecord], cfg: RiaConfig) -> Batch:
    """Pack records into fixed-shape index arrays; short inputs are padded and masked."""
    B, n, t_len, m, L = len(records), cfg.n, cfg.T, cfg.m, cfg.L
    cand = {f: np.zeros((B, n), np.int64) for f in ITEM_FIELDS}
    cand_valid = np.zeros((B, n), bool)
    ctx = {f: np.zeros((B, t_len), np.int64) for f in CONTEXT_FIELDS}
    ctx_valid = np.zeros((B, t_len), bool)
    hist = {f: np.zeros((B, L, m), np.int64) for f in ITEM_FIELDS}
    hist_click = np.zeros((B, L, m), np.int64)
    hist_valid = np.zeros((B, L), bool)
    tgt_idx = np.zeros((B, m), np.int64)
    clicks = np.zeros((B, m))
    cand_labels = np.zeros((B, n))
    for b, rec in enumerate(records):
        if len(rec.candidates) > n:
            raise ContractError(f"record {rec.request_id}: {len(rec.candidates)} candidates > n={n}", "ria-train")
        if len(rec.target_page) != m:
            raise ContractError(f"record {rec.request_id}: page length {len(rec.target_page)} != m={m}", "ria-train")
        for i, c in enumerate(rec.candidates):
            for f in ITEM_FIELDS:
                cand[f][b, i] = c[f]
        cand_valid[b, : len(rec.candidates)] = True
        events = rec.context_events[-t_len:]
        for j, ev in enumerate(events):
            for f in CONTEXT_FIELDS:
                ctx[f][b, j] = ev.features[f]
        ctx_valid[b, : len(events)] = True
        for k, page in enumerate(history_for(rec, cfg)):
            if len(page) != m:
                raise ContractError(f"record {rec.request_id}: history page length != m={m}", "ria-train")
            for e in sorted(page, key=lambda e: e.position):
                for f in ITEM_FIELDS:
                    hist[f][b, k, e.position - 1] = e.features[f]
                hist_click[b, k, e.position - 1] = e.click
            hist_valid[b, k] = True
        tgt_idx[b] = rec.target_indices()
        for o, e in enumerate(rec.ordered_target()):
            clicks[b, o] = e.click
            cand_labels[b, tgt_idx[b, o]] = e.click
    return Batch([r.request_id for r in records], cand, cand_valid, ctx, ctx_valid, hist, hist_click,
                 hist_valid, tgt_idx, clicks, cand_labels)


@dataclass
class RiaOutput:
    pointwise: PointwiseOutput
    listwise: ListwiseOutput
    target_reprs: Tensor             # [B, m, D] x'' rows in target order
    history: Tensor | None           # [B, L, m, D'] H_1..H_L
    pointwise_target_logits: Tensor  # [B, m] pointwise logits of the target items


@dataclass
class LossBreakdown:
    total: Tensor
    l1: Tensor
    l2: Tensor


class RiaModel(Module):
    """Embeddings + UCDT + CUHT + LMH with both prediction heads."""

    def __init__(self, cfg: RiaConfig):
        cfg.validate()
        self.cfg = cfg
        self.dtype = T.dtype_for(cfg.precision)
        init = Init(cfg.seed, self.dtype)
        half = cfg.D // 2
        self.tables = {
            "item": EmbeddingTable("item", cfg.n_items, half, init),
            "category": EmbeddingTable("category", cfg.n_categories, half, init),
            "user": EmbeddingTable("user", cfg.n_users, half, init),
            "position": EmbeddingTable("position", cfg.m, cfg.P_pos, init),
            "marker": EmbeddingTable("marker", 3, cfg.D, init),
        }
        self.ucdt = Ucdt(cfg.D, init, cfg.ucdt_depth, cfg.heads, cfg.pointwise_hidden, cfg.scorer_hidden,
                         cfg.attention_normalize, cfg.ln_eps, cfg.zero_heads, cfg.query_residual)
        self.cuht = Cuht(cfg.D_prime, init, cfg.heads, cfg.scorer_hidden, cfg.attention_normalize)
        self.lmh = Lmh(cfg.D, cfg.d_t, cfg.D_prime, cfg.I, init, cfg.heads, cfg.adaptor_hidden,
                       cfg.listwise_hidden, cfg.ln_eps, cfg.zero_heads)

    # -- embeddings ----------------------------------------------------------
    def embed_items(self, ids: dict[str, np.ndarray]) -> Tensor:
        return embed_features(ids, self.tables, ITEM_FIELDS)

    def embed_context(self, ids: dict[str, np.ndarray]) -> Tensor:
        return embed_features(ids, self.tables, CONTEXT_FIELDS)

    def embed_pages(self, ids: dict[str, np.ndarray], markers: np.ndarray) -> Tensor:
        """[..., m] item ids -> [..., m, D'] rows of item (+ click marker) ⊕ position embedding."""
        items = self.embed_items(ids) + self.tables["marker"].lookup(markers)
        m = markers.shape[-1]
        pos = self.tables["position"].lookup(np.broadcast_to(np.arange(m), markers.shape))
        return T.concat([items, pos], axis=-1)

    # -- stages --------------------------------------------------------------
    def pointwise(self, batch: Batch) -> PointwiseOutput:
        return self.ucdt(self.embed_items(batch.cand), self.embed_context(batch.ctx),
                         batch.cand_valid, batch.ctx_valid)

    def history_encodings(self, batch: Batch) -> Tensor | None:
        if self.cfg.L == 0:
            return None
        return self.cuht.piau(self.embed_pages(batch.hist, batch.hist_click))

    def listwise(self, target_reprs: Tensor, history: Tensor | None, history_valid: np.ndarray | None,
                 target_ids: dict[str, np.ndarray], keep_states: bool = False) -> ListwiseOutput:
        """Everything after the cacheable stages: target-page PIAU, PTAU, adaptor, LMH, head."""
        first = next(iter(target_ids.values()))
        h_target = self.cuht.piau(self.embed_pages(target_ids, np.full(first.shape, MARK_TARGET)))
        if history is None or history.shape[-3] == 0:
            w = self.cuht.zero_context(h_target)
        else:
            w = self.cuht.ptau(h_target, history, history_valid)
        return self.lmh(target_reprs, w, keep_states)

    def __call__(self, batch: Batch, keep_states: bool = False) -> RiaOutput:
        point = self.pointwise(batch)
        target_reprs = T.gather(point.reprs, batch.tgt_idx)
        history = self.history_encodings(batch)
        lst = self.listwise(target_reprs, history, batch.hist_valid, batch.target_ids(), keep_states)
        lead = point.logits.shape
        target_point = T.gather(T.reshape(point.logits, lead + (1,)), batch.tgt_idx)
        return RiaOutput(point, lst, target_reprs, history, T.reshape(target_point, batch.tgt_idx.shape))

    # -- objective -----------------------------------------------------------
    def losses(self, batch: Batch, out: RiaOutput) -> LossBreakdown:
        if self.cfg.l1_scope == "exposed":
            l1 = T.mean(bce_from_logits(out.pointwise_target_logits, batch.clicks))
        else:
            valid = batch.cand_valid.astype(float)
            per = T.tsum(bce_from_logits(out.pointwise.logits, batch.cand_labels, valid), axis=-1)
            l1 = T.mean(per * (1.0 / valid.sum(axis=-1)))
        l2 = T.mean(bce_from_logits(out.listwise.logits, batch.clicks))
        return LossBreakdown(joint_loss(l1, l2, self.cfg.l1_weight, self.cfg.l2_weight), l1, l2)

    def loss(self, batch: Batch) -> LossBreakdown:
        return self.losses(batch, self(batch))


def ria_forward(record: ImpressionRecord, model: RiaModel) -> RiaOutput:
    """Single-record forward with every intermediate the losses and the cache need."""
    return model(collate([record], model.cfg))
