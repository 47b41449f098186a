"""Rank -> rerank pipeline around the representation cache.

The rank stage runs UCDT over all candidates and PIAU over the history
pages and stores x'' rows and H_k encodings. The rerank stage scores
candidate target lists either from the cache or by recomputing everything;
both routes feed identical arrays into the same listwise stage, so in a fixed
precision they agree bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cache import ReprCache, item_key, page_key
from .data import ITEM_FIELDS, ImpressionRecord
from .errors import CacheMissError, ContractError
from .layers import OpCounters, counting
from .model import RiaModel, collate, history_for

MODES = ("cached", "recompute", "verify")


@dataclass
class RankOutputs:
    reprs: np.ndarray   # [n, D] x'' per candidate, candidate order
    pages: np.ndarray   # [L_valid, m, D'] history encodings, oldest first


def rank_outputs(record: ImpressionRecord, model: RiaModel, counters: OpCounters | None = None) -> RankOutputs:
    """UCDT over the candidates and PIAU over the history pages for one request."""
    batch = collate([record], model.cfg)
    n = len(record.candidates)
    n_pages = len(history_for(record, model.cfg))
    with T.no_grad(), counting(counters if counters is not None else OpCounters()):
        point = model.pointwise(batch)
        history = model.history_encodings(batch)
    reprs = point.reprs.data[0, :n]
    width = model.cfg.D_prime
    pages = history.data[0, :n_pages] if history is not None else np.zeros((0, model.cfg.m, width), reprs.dtype)
    return RankOutputs(reprs, pages)


def rank_stage_precompute(record: ImpressionRecord, model: RiaModel, cache: ReprCache,
                          counters: OpCounters | None = None) -> int:
    """Store every candidate's x'' and every history page's H_k; returns the entry count n + L."""
    out = rank_outputs(record, model, counters)
    rid = record.request_id
    for i, item in enumerate(record.candidate_ids):
        cache.put(item_key(rid, item), out.reprs[i])
    for k in range(out.pages.shape[0]):
        cache.put(page_key(rid, k + 1), out.pages[k])
    return len(record.candidates) + out.pages.shape[0]


def cached_inputs(record: ImpressionRecord, model: RiaModel, cache: ReprCache) -> RankOutputs:
    """Rebuild the rank-stage outputs from the cache; any absent or stale key is a miss."""
    rid = record.request_id
    n_pages = len(history_for(record, model.cfg))
    keys = [item_key(rid, item) for item in record.candidate_ids]
    keys += [page_key(rid, k + 1) for k in range(n_pages)]
    values = cache.get_many(keys)
    n = len(record.candidates)
    reprs = np.stack(values[:n])
    if n_pages:
        pages = np.stack(values[n:])
    else:
        pages = np.zeros((0, model.cfg.m, model.cfg.D_prime), reprs.dtype)
    return RankOutputs(reprs, pages)


def _check_lists(record: ImpressionRecord, lists: Sequence[Sequence[int]], m: int) -> np.ndarray:
    if len(lists) == 0:
        raise ContractError("rerank: no target lists to score", "ec-pipeline")
    arr = np.asarray([list(p) for p in lists], dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != m:
        raise ContractError(f"rerank: every list must hold m={m} candidate indices", "ec-pipeline")
    n = len(record.candidates)
    if arr.min() < 0 or arr.max() >= n:
        raise ContractError(f"rerank: candidate index outside [0, {n})", "ec-pipeline")
    return arr


def listwise_scores(record: ImpressionRecord, lists: np.ndarray, model: RiaModel, inputs: RankOutputs,
                    counters: OpCounters | None = None) -> np.ndarray:
    """Listwise pCTR [q, m] for q lists given rank-stage outputs (the uncacheable stage)."""
    q = lists.shape[0]
    dtype = model.dtype
    reprs = T.Tensor(inputs.reprs[lists], dtype=dtype)
    history = None
    if inputs.pages.shape[0]:
        history = T.Tensor(np.broadcast_to(inputs.pages, (q,) + inputs.pages.shape), dtype=dtype)
    ids = {f: np.asarray([c[f] for c in record.candidates], dtype=np.int64)[lists] for f in ITEM_FIELDS}
    with T.no_grad(), counting(counters if counters is not None else OpCounters()):
        out = model.listwise(reprs, history, None, ids)
        probs = T.sigmoid(out.logits)
    return probs.data


@dataclass
class RerankResult:
    request_id: str
    mode: str
    lists: np.ndarray                 # [q, m] candidate indices
    pctr: np.ndarray                  # [q, m] listwise pCTR per position
    counters: dict[str, OpCounters]   # per path: "cached" and/or "recompute"
    max_abs_diff: float | None = None  # verify mode only
    fell_back: bool = False


def rerank_stage_score(record: ImpressionRecord, lists: Sequence[Sequence[int]], model: RiaModel,
                       cache: ReprCache | None = None, mode: str = "cached",
                       fallback: bool = False) -> RerankResult:
    """Score target lists in ``cached``, ``recompute`` or ``verify`` mode.

    Cached mode raises :class:`CacheMissError` unless every entry of the
    request is present and fresh; with ``fallback=True`` it recomputes instead.
    Verify mode needs the cache too and reports the largest absolute
    difference between the two routes.
    """
    if mode not in MODES:
        raise ContractError(f"rerank mode must be one of {MODES}, got {mode!r}", "ec-pipeline")
    arr = _check_lists(record, lists, model.cfg.m)
    counters: dict[str, OpCounters] = {}
    cached = recomputed = None
    fell_back = False
    if mode in ("cached", "verify"):
        if cache is None:
            raise ContractError(f"{mode} mode needs a cache", "ec-pipeline")
        try:
            inputs = cached_inputs(record, model, cache)
        except CacheMissError:
            if not (fallback and mode == "cached"):
                raise
            fell_back = True
        else:
            counters["cached"] = OpCounters()
            cached = listwise_scores(record, arr, model, inputs, counters["cached"])
    if mode in ("recompute", "verify") or fell_back:
        counters["recompute"] = c = OpCounters()
        recomputed = listwise_scores(record, arr, model, rank_outputs(record, model, c), c)
    diff = None
    if mode == "verify":
        diff = float(np.max(np.abs(cached.astype(np.float64) - recomputed.astype(np.float64))))
    pctr = cached if cached is not None else recomputed
    return RerankResult(record.request_id, mode, arr, pctr, counters, diff, fell_back)


# -- run accounting ------------------------------------------------------------

@dataclass
class PipelineRun:
    requests: int = 0
    entries: int = 0
    lists_scored: int = 0
    fallbacks: int = 0
    max_abs_diff: float = 0.0
    stage_counters: dict[str, OpCounters] = field(
        default_factory=lambda: {"rank": OpCounters(), "rerank": OpCounters()})
    stage_seconds: dict[str, float] = field(default_factory=lambda: {"rank": 0.0, "rerank": 0.0})

    def precompute(self, record: ImpressionRecord, model: RiaModel, cache: ReprCache) -> int:
        start = time.perf_counter()
        count = rank_stage_precompute(record, model, cache, self.stage_counters["rank"])
        self.stage_seconds["rank"] += time.perf_counter() - start
        self.requests += 1
        self.entries += count
        return count

    def rerank(self, record: ImpressionRecord, lists, model: RiaModel, cache: ReprCache,
               mode: str = "cached", fallback: bool = False) -> RerankResult:
        start = time.perf_counter()
        result = rerank_stage_score(record, lists, model, cache, mode, fallback)
        self.stage_seconds["rerank"] += time.perf_counter() - start
        for c in result.counters.values():
            self.stage_counters["rerank"].merge(c)
        self.lists_scored += len(result.lists)
        self.fallbacks += int(result.fell_back)
        if result.max_abs_diff is not None:
            self.max_abs_diff = max(self.max_abs_diff, result.max_abs_diff)
        return result


@dataclass
class PipelineReport:
    values: dict[str, float | int]

    def to_text(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.values.items()) + "\n"


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def pipeline_report(run: PipelineRun, cache: ReprCache | None = None) -> PipelineReport:
    """Fixed-key summary; wall-clock keys carry a ``_nondeterministic`` suffix."""
    stats = cache.stats if cache is not None else None
    values: dict[str, float | int] = {
        "requests": run.requests,
        "entries": run.entries,
        "lists_scored": run.lists_scored,
        "fallbacks": run.fallbacks,
        "hits": stats.hits if stats else 0,
        "misses": stats.misses if stats else 0,
        "hit_rate": stats.hit_rate if stats else 0.0,
        "evictions": stats.evictions if stats else 0,
        "max_abs_diff": run.max_abs_diff,
    }
    for stage in ("rank", "rerank"):
        for name, count in run.stage_counters[stage].as_dict().items():
            values[f"{stage}_{name}"] = count
    for stage in ("rank", "rerank"):
        values[f"{stage}_seconds_nondeterministic"] = run.stage_seconds[stage]
    return PipelineReport(values)
