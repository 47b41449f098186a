"""Optimizer, training loop, evaluation and the depth sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import dumps, load_state
from .config import RiaConfig
from .data import ImpressionRecord, split_by_request
from .errors import ContractError, TrainingError
from .metrics import EvalReport, evaluate
from .model import Batch, RiaModel, collate

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params, grads: dict[str, np.ndarray], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected adaptive-moment update, in place, in registry order."""
    named_params = list(named_params)
    for name, _ in named_params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


@dataclass
class BatchLoss:
    total: np.floating
    l1: np.floating
    l2: np.floating


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_listwise: EvalReport
    val_listwise: EvalReport | None
    val_pointwise: EvalReport | None

    def to_text(self) -> str:
        lines = [f"epoch={self.epoch}", f"train_loss={self.train_loss:.10f}",
                 self.train_listwise.to_text("train_listwise_")]
        if self.val_listwise is not None:
            lines.append(self.val_listwise.to_text("val_listwise_"))
        if self.val_pointwise is not None:
            lines.append(self.val_pointwise.to_text("val_pointwise_"))
        return "\n".join(lines)


@dataclass
class TrainResult:
    model: RiaModel
    epochs: list[EpochReport]
    batch_losses: list[BatchLoss]
    initial_val: dict[str, EvalReport] | None
    best_epoch: int
    checkpoint: bytes


def predict(model: RiaModel, batch: Batch, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """(listwise probs [B, m], pointwise probs of target items [B, m]) without recording a graph."""
    lst, pnt = [], []
    with T.no_grad():
        for start in range(0, len(batch), chunk):
            sub = batch.take(np.arange(start, min(start + chunk, len(batch))))
            out = model(sub)
            lst.append(T.sigmoid(out.listwise.logits).data)
            pnt.append(T.sigmoid(out.pointwise_target_logits).data)
    return np.concatenate(lst), np.concatenate(pnt)


def evaluate_model(model: RiaModel, batch: Batch, pooling: str = "global") -> dict[str, EvalReport]:
    listwise, pointwise = predict(model, batch)
    groups = np.repeat(np.arange(len(batch)), model.cfg.m)
    y = batch.clicks.reshape(-1)
    return {
        "listwise": evaluate(listwise.reshape(-1), y, groups, pooling),
        "pointwise": evaluate(pointwise.reshape(-1), y, groups, pooling),
    }


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(model: RiaModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def train(records: Sequence[ImpressionRecord], cfg: RiaConfig,
          val_records: Sequence[ImpressionRecord] | None = None,
          on_epoch: Callable[[EpochReport], None] | None = None) -> TrainResult:
    """Minimize mean L1 + L2 over shuffled mini-batches with early stopping on val LogLoss.

    Without explicit ``val_records`` the input is split by request-id hash.
    The returned model carries the parameters of the best validation epoch.
    """
    if not records:
        raise ContractError("train: empty dataset", "ria-train")
    if val_records is None:
        train_recs, val_recs = split_by_request(list(records), cfg.val_fraction)
    else:
        train_recs, val_recs = list(records), list(val_records)
        overlap = {r.request_id for r in train_recs} & {r.request_id for r in val_recs}
        if overlap:
            raise ContractError(f"train/validation overlap on {len(overlap)} request ids", "ria-train")
    if not train_recs:
        raise ContractError("train: no training records after the split", "ria-train")
    model = RiaModel(cfg)
    named = list(model.named_parameters())
    train_batch = collate(train_recs, cfg)
    val_batch = collate(val_recs, cfg) if val_recs else None
    initial_val = evaluate_model(model, val_batch) if val_batch is not None and _two_class(val_batch) else None
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 7])
    epochs: list[EpochReport] = []
    batch_losses: list[BatchLoss] = []
    best = (math.inf, 0, _snapshot(model))
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        preds, labels, losses = [], [], []
        for idx in batch_order(len(train_batch), cfg.batch_size, rng):
            batch = train_batch.take(idx)
            T.zero_grads(p for _, p in named)
            out = model(batch)
            try:
                parts = model.losses(batch, out)
                value = parts.total.data.reshape(())[()]
                if not np.isfinite(value):
                    raise TrainingError(f"loss diverged at epoch {epoch} (L={value})")
                parts.total.backward()
                adam_step(named, {n: p.grad for n, p in named if p.grad is not None}, state,
                          cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
            except TrainingError as err:
                # hand back the last good parameters with the error
                load_state(model, best[2])
                err.checkpoint = dumps(model.named_parameters(), cfg)
                raise
            batch_losses.append(BatchLoss(value, parts.l1.data.reshape(())[()], parts.l2.data.reshape(())[()]))
            losses.append(float(value))
            preds.append(T.sigmoid(out.listwise.logits).data.reshape(-1))
            labels.append(batch.clicks.reshape(-1))
        train_report = evaluate(np.concatenate(preds), np.concatenate(labels))
        val_l = val_p = None
        if val_batch is not None and _two_class(val_batch):
            reports = evaluate_model(model, val_batch)
            val_l, val_p = reports["listwise"], reports["pointwise"]
        report = EpochReport(epoch, float(np.mean(losses)), train_report, val_l, val_p)
        epochs.append(report)
        log.info("epoch %d loss %.5f val_auc %s", epoch, report.train_loss, val_l.auc if val_l else None)
        if on_epoch:
            on_epoch(report)
        score = val_l.logloss if val_l is not None else report.train_loss
        if score < best[0]:
            best = (score, epoch, _snapshot(model))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    load_state(model, best[2])
    return TrainResult(model, epochs, batch_losses, initial_val, best[1], dumps(model.named_parameters(), cfg))


def _two_class(batch: Batch) -> bool:
    y = batch.clicks
    return 0 < y.sum() < y.size


# -- depth sweep ------------------------------------------------------------------

@dataclass
class SweepRow:
    depth: int
    seed: int
    listwise_auc: float
    pointwise_auc: float
    listwise_logloss: float
    initial_auc: float | None


@dataclass
class SweepResult:
    rows: list[SweepRow]
    errors: dict[tuple[int, int], str] = field(default_factory=dict)

    def median_auc(self, depth: int, head: str = "listwise") -> float:
        values = [getattr(r, f"{head}_auc") for r in self.rows if r.depth == depth]
        return float(np.median(values)) if values else math.nan

    def depths(self) -> list[int]:
        return sorted({r.depth for r in self.rows})

    def to_text(self) -> str:
        lines = ["depth\tseed\tlistwise_auc\tpointwise_auc\tlistwise_logloss"]
        for r in self.rows:
            lines.append(f"{r.depth}\t{r.seed}\t{r.listwise_auc:.6f}\t{r.pointwise_auc:.6f}\t{r.listwise_logloss:.6f}")
        lines.append("")
        lines.append("depth\tmedian_listwise_auc\tmedian_pointwise_auc")
        for d in self.depths():
            lines.append(f"{d}\t{self.median_auc(d):.6f}\t{self.median_auc(d, 'pointwise'):.6f}")
        for (d, s), msg in sorted(self.errors.items()):
            lines.append(f"error\tdepth={d}\tseed={s}\t{msg}")
        return "\n".join(lines) + "\n"


def depth_sweep(train_records: Sequence[ImpressionRecord], val_records: Sequence[ImpressionRecord],
                cfg: RiaConfig, depths: Sequence[int], seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> SweepResult:
    """Train one model per (depth, seed) on the same data; failures are recorded and skipped."""
    if not depths:
        raise ContractError("depth_sweep: no depths given", "ria-train")
    result = SweepResult([])
    for depth in depths:
        for seed in seeds:
            run_cfg = cfg.replace(I=depth, seed=seed)
            try:
                res = train(train_records, run_cfg, val_records)
            except TrainingError as exc:
                result.errors[(depth, seed)] = str(exc)
                continue
            best = res.epochs[res.best_epoch - 1] if res.best_epoch else res.epochs[-1]
            init = res.initial_val["listwise"].auc if res.initial_val else None
            result.rows.append(SweepRow(depth, seed, best.val_listwise.auc, best.val_pointwise.auc,
                                        best.val_listwise.logloss, init))
            log.info("sweep depth=%d seed=%d auc=%.5f", depth, seed, best.val_listwise.auc)
    return result


def plot_sweep(result: SweepResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    depths = result.depths()
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.plot(depths, [result.median_auc(d) for d in depths], marker="o", label="listwise (median)")
    ax.plot(depths, [result.median_auc(d, "pointwise") for d in depths], marker="s", ls="--",
            label="pointwise head (median)")
    for r in result.rows:
        ax.scatter([r.depth], [r.listwise_auc], s=8, color="grey", alpha=0.6)
    ax.set_xlabel("HSTU layers in the listwise stack")
    ax.set_ylabel("validation AUC")
    ax.set_xticks(depths)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
