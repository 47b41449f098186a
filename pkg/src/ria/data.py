"""Impression records: schema, validation, line-delimited I/O, synthetic logs and sparsity counts."""

from __future__ import annotations

import gzip
import hashlib
import io
import itertools
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .config import GeneratorConfig
from .errors import ContractError, ParseError, RecordError

SCHEMA_NAME = "ria-impressions"
SCHEMA_VERSION = 1

ITEM_FIELDS = ("item", "category")
CONTEXT_FIELDS = ("user", "item")


@dataclass
class Exposure:
    """One displayed slot: item features (always including ``item``), 1-based position, click."""

    features: dict[str, int]
    position: int
    click: int

    @property
    def item(self) -> int:
        return self.features["item"]


@dataclass
class ContextEvent:
    ts: int
    features: dict[str, int]


@dataclass
class ImpressionRecord:
    request_id: str
    user_id: int
    context_events: list[ContextEvent]
    candidates: list[dict[str, int]]
    history_pages: list[list[Exposure]] = field(default_factory=list)
    target_page: list[Exposure] = field(default_factory=list)

    @property
    def candidate_ids(self) -> list[int]:
        return [c["item"] for c in self.candidates]

    def ordered_target(self) -> list[Exposure]:
        return sorted(self.target_page, key=lambda e: e.position)

    def target_indices(self) -> list[int]:
        """Candidate index of each target slot, in position order."""
        where = {c["item"]: i for i, c in enumerate(self.candidates)}
        return [where[e.item] for e in self.ordered_target()]

    def with_target(self, candidate_indices: Iterable[int], clicks: Iterable[int] | None = None) -> "ImpressionRecord":
        """Same request, with the target page replaced by the given candidate order."""
        idx = list(candidate_indices)
        clicks = list(clicks) if clicks is not None else [0] * len(idx)
        page = [Exposure(dict(self.candidates[i]), o + 1, int(c)) for o, (i, c) in enumerate(zip(idx, clicks))]
        return ImpressionRecord(self.request_id, self.user_id, self.context_events, self.candidates,
                                self.history_pages, page)


# -- validation -----------------------------------------------------------------

def _is_id(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def validate_record(rec: ImpressionRecord, line: int | None = None) -> ImpressionRecord:
    rid = rec.request_id

    def fail(rule: str):
        raise RecordError(str(rid), rule, line)

    if not isinstance(rid, str) or not rid:
        fail("request_id nonempty")
    if not _is_id(rec.user_id):
        fail("feature ids are non-negative integers")
    if not rec.context_events:
        fail("context nonempty")
    last = None
    for ev in rec.context_events:
        if not isinstance(ev.ts, int) or (last is not None and ev.ts < last):
            fail("timestamps nondecreasing")
        last = ev.ts
        if not all(_is_id(v) for v in ev.features.values()):
            fail("feature ids are non-negative integers")
    if not rec.candidates:
        fail("candidates nonempty")
    ids = []
    for c in rec.candidates:
        if "item" not in c or not all(_is_id(v) for v in c.values()):
            fail("feature ids are non-negative integers")
        ids.append(c["item"])
    if len(set(ids)) != len(ids):
        fail("candidate ids unique")
    if not rec.target_page:
        fail("target page nonempty")
    m = len(rec.target_page)
    for page in [*rec.history_pages, rec.target_page]:
        if len(page) != m:
            fail("page lengths agree")
        if sorted(e.position for e in page) != list(range(1, m + 1)):
            fail("positions form a permutation")
        for e in page:
            if e.click not in (0, 1) or isinstance(e.click, bool):
                fail("clicks are binary")
            if "item" not in e.features or not all(_is_id(v) for v in e.features.values()):
                fail("feature ids are non-negative integers")
    id_set = set(ids)
    if any(e.item not in id_set for e in rec.target_page):
        fail("target ⊆ candidates")
    if len({e.item for e in rec.target_page}) != m:
        fail("target items distinct")
    return rec


# -- serialization -------------------------------------------------------------

def _exposure_dict(e: Exposure) -> dict:
    return {"features": e.features, "position": e.position, "click": e.click}


def record_to_dict(rec: ImpressionRecord) -> dict:
    return {
        "request_id": rec.request_id,
        "user_id": rec.user_id,
        "context": [{"ts": ev.ts, "features": ev.features} for ev in rec.context_events],
        "candidates": rec.candidates,
        "history": [[_exposure_dict(e) for e in page] for page in rec.history_pages],
        "target": [_exposure_dict(e) for e in rec.target_page],
    }


def record_from_dict(d: dict) -> ImpressionRecord:
    def exposure(x) -> Exposure:
        return Exposure(dict(x["features"]), x["position"], x["click"])

    return ImpressionRecord(
        request_id=d["request_id"],
        user_id=d["user_id"],
        context_events=[ContextEvent(ev["ts"], dict(ev["features"])) for ev in d["context"]],
        candidates=[dict(c) for c in d["candidates"]],
        history_pages=[[exposure(x) for x in page] for page in d.get("history", [])],
        target_page=[exposure(x) for x in d["target"]],
    )


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _open_write(path: Path) -> IO[str]:
    if path.suffix == ".gz":
        raw = open(path, "wb")
        gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
        return _ClosingText(gz, raw)
    return open(path, "w", encoding="utf-8", newline="\n")


class _ClosingText(io.TextIOWrapper):
    def __init__(self, gz, raw):
        super().__init__(gz, encoding="utf-8", newline="\n")
        self._raw = raw

    def close(self):
        super().close()
        self._raw.close()


def write_impressions(path: str | Path, records: Iterable[ImpressionRecord]) -> int:
    """Write a header line plus one JSON record per line. Returns the record count."""
    path = Path(path)
    count = 0
    with _open_write(path) as fh:
        fh.write(_dumps({"schema": SCHEMA_NAME, "version": SCHEMA_VERSION}) + "\n")
        for rec in records:
            fh.write(_dumps(record_to_dict(rec)) + "\n")
            count += 1
    return count


def _open_read(path: Path) -> IO[str]:
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def load_impressions(path: str | Path, schema_version: int = SCHEMA_VERSION,
                     problems: list | None = None) -> Iterator[ImpressionRecord]:
    """Stream validated records.

    Without ``problems`` the first malformed line raises (ParseError with
    line/column, or RecordError with the violated rule). With a list, errors
    are appended to it and the offending lines skipped.
    """
    path = Path(path)
    with _open_read(path) as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc.msg}", 1, exc.colno) from None
        if not isinstance(header, dict) or header.get("schema") != SCHEMA_NAME:
            raise ParseError("missing ria-impressions schema header", 1, 1)
        if header.get("version") != schema_version:
            raise ParseError(f"schema version {header.get('version')} != expected {schema_version}", 1, 1)
        seen: set[str] = set()
        for lineno, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ParseError(exc.msg, lineno, exc.colno) from None
                try:
                    rec = record_from_dict(obj)
                except (KeyError, TypeError, AttributeError) as exc:
                    rid = obj.get("request_id", "?") if isinstance(obj, dict) else "?"
                    raise RecordError(str(rid), f"schema field {exc}", lineno) from None
                validate_record(rec, lineno)
                if rec.request_id in seen:
                    raise RecordError(rec.request_id, "request_id unique", lineno)
                seen.add(rec.request_id)
            except (ParseError, RecordError) as err:
                if problems is None:
                    raise
                problems.append(err)
                continue
            yield rec


# -- synthetic click logs --------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class SyntheticWorld:
    """Latent users/items and the planted click model.

    logit(click at o) = a_u . b_{i_o} + pos_bias_o
                        + gamma * sum_{j != o} cos(b_{i_o}, b_{i_j}) * 2^-|o-j|
    """

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.noise_seed, 0])
        k = cfg.latent_dim
        centers = rng.normal(size=(cfg.n_categories, k))
        self.category = rng.integers(cfg.n_categories, size=cfg.n_items)
        items = centers[self.category] + cfg.cluster_spread * rng.normal(size=(cfg.n_items, k))
        self.item_vecs = items / np.linalg.norm(items, axis=1, keepdims=True)
        self.user_vecs = cfg.affinity_scale * rng.normal(size=(cfg.n_users, k)) / np.sqrt(k) * 2.0
        self.position_bias = np.asarray(cfg.biases(), dtype=np.float64)
        o = np.arange(cfg.m)
        self.decay = np.where(o[:, None] == o[None, :], 0.0, 2.0 ** -np.abs(o[:, None] - o[None, :]))

    def click_logits(self, user: int, items: np.ndarray) -> np.ndarray:
        """Click logits for items displayed in positions 1..m (in order)."""
        b = self.item_vecs[items]
        base = b @ self.user_vecs[user] + self.position_bias[: len(items)]
        if self.cfg.gamma == 0:
            return base
        sim = b @ b.T
        decay = self.decay[: len(items), : len(items)]
        return base + self.cfg.gamma * np.sum(sim * decay, axis=1)

    def click_probs(self, user: int, items: np.ndarray) -> np.ndarray:
        return _sigmoid(self.click_logits(user, items))

    def item_features(self, item: int) -> dict[str, int]:
        return {"item": int(item), "category": int(self.category[item])}


def generate_synthetic(cfg: GeneratorConfig) -> Iterator[ImpressionRecord]:
    """Seeded stream of requests from the planted click model.

    Each user carries a rolling series of pointwise behaviors (context) and a
    rolling window of their last L logged pages (history). Candidates are
    uniform over the catalog; the logged page is a uniform random m-subset of
    them in random order.
    """
    cfg.validate()
    world = SyntheticWorld(cfg)
    rng = np.random.default_rng([cfg.noise_seed, 1])
    behaviors: dict[int, deque] = {}
    pages: dict[int, deque] = {}
    clock = 1_000_000
    for r in range(cfg.n_requests):
        clock += 10
        user = int(rng.integers(cfg.n_users))
        if user not in behaviors:
            # warm start: T past behaviors drawn by preference from a random slate
            slate = rng.choice(cfg.n_items, size=min(4 * cfg.T, cfg.n_items), replace=False)
            pref = _sigmoid(world.item_vecs[slate] @ world.user_vecs[user])
            picks = rng.choice(slate, size=cfg.T, replace=True, p=pref / pref.sum())
            behaviors[user] = deque(((clock - 10 * (cfg.T - t), int(i)) for t, i in enumerate(picks)),
                                    maxlen=cfg.T)
            pages[user] = deque(maxlen=cfg.L) if cfg.L > 0 else deque(maxlen=0)
        cand = rng.choice(cfg.n_items, size=cfg.n, replace=False)
        shown = rng.permutation(cfg.n)[: cfg.m]
        items = cand[shown]
        clicks = (rng.random(cfg.m) < world.click_probs(user, items)).astype(int)
        target = [Exposure(world.item_features(i), o + 1, int(c)) for o, (i, c) in enumerate(zip(items, clicks))]
        yield ImpressionRecord(
            request_id=f"r{r:08d}",
            user_id=user,
            context_events=[ContextEvent(ts, {"user": user, "item": i}) for ts, i in behaviors[user]],
            candidates=[world.item_features(i) for i in cand],
            history_pages=[list(p) for p in pages[user]],
            target_page=target,
        )
        for i, c in zip(items, clicks):
            if c:
                behaviors[user].append((clock, int(i)))
        if cfg.L > 0:
            pages[user].append(target)


def expected_ctr(cfg: GeneratorConfig, n_samples: int = 20_000, seed: int = 12345) -> float:
    """Monte-Carlo mean click probability under the request sampling distribution."""
    world = SyntheticWorld(cfg)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_samples):
        user = int(rng.integers(cfg.n_users))
        items = rng.choice(cfg.n_items, size=cfg.m, replace=False)
        total += float(world.click_probs(user, items).mean())
    return total / n_samples


def empirical_ctr(records: Iterable[ImpressionRecord]) -> float:
    clicks = shown = 0
    for rec in records:
        clicks += sum(e.click for e in rec.target_page)
        shown += len(rec.target_page)
    return clicks / shown if shown else 0.0


def split_by_request(records: list[ImpressionRecord], val_fraction: float) -> tuple[list, list]:
    """Deterministic train/validation split on a hash of request_id."""
    train, val = [], []
    cut = int(round(val_fraction * 10_000))
    for rec in records:
        bucket = int(hashlib.sha256(rec.request_id.encode()).hexdigest()[:8], 16) % 10_000
        (val if bucket < cut else train).append(rec)
    return train, val


# -- combinatorial sparsity -------------------------------------------------------

@dataclass(frozen=True)
class SparsityRow:
    k: int
    distinct: int
    occurrences: int

    @property
    def mean_count(self) -> float:
        return self.occurrences / self.distinct if self.distinct else 0.0


def sparsity_report(records: Iterable[ImpressionRecord], k_max: int) -> list[SparsityRow]:
    """Exact co-exposure counts of unordered item k-subsets on logged pages, k = 1..k_max."""
    pages = [tuple(sorted(e.item for e in rec.target_page)) for rec in records]
    m = max((len(p) for p in pages), default=0)
    if k_max < 1 or k_max > m:
        raise ContractError(f"k_max must lie in [1, m={m}], got {k_max}", "data")
    rows = []
    for k in range(1, k_max + 1):
        counts = Counter(itertools.chain.from_iterable(itertools.combinations(p, k) for p in pages))
        rows.append(SparsityRow(k, len(counts), sum(counts.values())))
    return rows
