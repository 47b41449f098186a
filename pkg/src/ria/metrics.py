"""AUC and LogLoss, plus the reports the CLI prints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError

LOGLOSS_EPS = 1e-7
POOLING_MODES = ("global", "grouped")


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranked = values[order]
    starts = np.flatnonzero(np.r_[True, ranked[1:] != ranked[:-1]])
    ends = np.r_[starts[1:], len(values)]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via the rank-sum statistic in O(N log N)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    rank_sum = average_ranks(s)[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(N^2) reference: average over all (positive, negative) pairs."""
    s, y = _prepare(scores, labels)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC undefined for single-class input")
    wins = np.count_nonzero(pos[:, None] > neg[None, :])
    ties = np.count_nonzero(pos[:, None] == neg[None, :])
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def grouped_auc(scores, labels, groups) -> float:
    """Mean per-group AUC over groups that contain both classes."""
    s, y = _prepare(scores, labels)
    g = np.asarray(groups).reshape(-1)
    values = []
    for key in np.unique(g):
        sel = g == key
        if 0 < y[sel].sum() < sel.sum():
            values.append(auc(s[sel], y[sel]))
    if not values:
        raise UndefinedMetricError("no group contains both positive and negative labels")
    return float(np.mean(values))


def logloss(scores, labels, eps: float = LOGLOSS_EPS) -> float:
    """Mean binary cross-entropy with scores clamped to [eps, 1 - eps]."""
    s, y = _prepare(scores, labels)
    if s.size == 0:
        raise UndefinedMetricError("LogLoss of an empty set")
    p = np.clip(s, eps, 1.0 - eps)
    return float(-np.mean(np.where(y, np.log(p), np.log1p(-p))))


@dataclass(frozen=True)
class EvalReport:
    auc: float
    logloss: float
    n_examples: int
    pooling: str = "global"

    def to_text(self, prefix: str = "") -> str:
        return "\n".join([
            f"{prefix}auc={self.auc:.10f}",
            f"{prefix}logloss={self.logloss:.10f}",
            f"{prefix}n={self.n_examples}",
            f"{prefix}pooling={self.pooling}",
        ])

    def as_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "n": self.n_examples, "pooling": self.pooling}


def evaluate(scores, labels, groups=None, pooling: str = "global") -> EvalReport:
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}")
    s, y = _prepare(scores, labels)
    if pooling == "grouped":
        if groups is None:
            raise ValueError("grouped pooling needs request groups")
        value = grouped_auc(s, y, groups)
    else:
        value = auc(s, y)
    return EvalReport(value, logloss(s, y), int(s.size), pooling)


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
