"""Target-list enumeration and reward-maximizing list selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from .data import ImpressionRecord
from .errors import ContractError
from .pipeline import rerank_stage_score


@dataclass(frozen=True)
class ScoredList:
    items: tuple[int, ...]              # candidate indices in display order
    item_ids: tuple[int, ...]
    per_position_pctr: tuple[float, ...]
    reward: float

    @classmethod
    def build(cls, items: Sequence[int], item_ids: Sequence[int], pctr: Sequence[float]) -> "ScoredList":
        values = tuple(float(p) for p in pctr)
        return cls(tuple(int(i) for i in items), tuple(int(i) for i in item_ids), values, list_reward(values))


def list_reward(pctr: Sequence[float]) -> float:
    """R(u, P): sum of per-position pCTRs, accumulated left to right."""
    return float(sum(float(p) for p in pctr))


def enumerate_target_lists(n: int, m: int, budget: int = 10_000, seed: int = 0) -> list[tuple[int, ...]]:
    """Ordered m-permutations of candidate indices 0..n-1, sorted.

    All P(n, m) of them when that fits in ``budget``; otherwise ``budget``
    distinct ones drawn uniformly with a seeded generator.
    """
    if m < 1 or n < 1:
        raise ContractError(f"need n, m >= 1 (got n={n}, m={m})", "selection")
    if m > n:
        raise ContractError(f"list length m={m} exceeds candidate count n={n}", "selection")
    if budget < 1:
        raise ContractError(f"budget must be >= 1, got {budget}", "selection")
    if math.perm(n, m) <= budget:
        return list(permutations(range(n), m))
    rng = np.random.default_rng([seed, n, m])
    chosen: set[tuple[int, ...]] = set()
    while len(chosen) < budget:
        chosen.add(tuple(int(i) for i in rng.permutation(n)[:m]))
    return sorted(chosen)


def best_list(scored: Sequence[ScoredList]) -> ScoredList:
    """Argmax by reward; ties go to the lexicographically smallest item-id sequence."""
    if not scored:
        raise ContractError("select: no lists to choose from", "selection")
    return min(scored, key=lambda s: (-s.reward, s.item_ids))


def score_lists(record: ImpressionRecord, lists: Sequence[Sequence[int]], pctr: np.ndarray) -> list[ScoredList]:
    ids = record.candidate_ids
    pctr = np.asarray(pctr)
    if pctr.shape[0] != len(lists):
        raise ContractError(f"select: {pctr.shape[0]} score rows for {len(lists)} lists", "selection")
    return [ScoredList.build(p, [ids[i] for i in p], row) for p, row in zip(lists, pctr)]


def select_best_list(record: ImpressionRecord, lists: Sequence[Sequence[int]], model, cache=None,
                     mode: str = "recompute") -> ScoredList:
    """Score every list with the listwise head and return the reward maximizer."""
    if not lists:
        raise ContractError("select: no lists to choose from", "selection")
    result = rerank_stage_score(record, lists, model, cache, mode)
    return best_list(score_lists(record, lists, result.pctr))
