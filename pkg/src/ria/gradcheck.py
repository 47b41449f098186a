"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-4
# the full model is checked with a four-point stencil: its curvature makes
# the two-point truncation error visible at 1e-5 relative accuracy
MODEL_STEP = 1e-3
# gradients smaller than this are compared on an absolute scale
REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class Probe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradReport:
    probes: list[Probe] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    def worst(self) -> Probe | None:
        return max(self.probes, key=lambda p: p.rel_err, default=None)


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    T.zero_grads(params)
    loss_fn().backward()
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, index: tuple[int, ...], step: float = STEP,
                 order: int = 2) -> float:
    """Central difference of accuracy ``order`` (2: two-point, 4: four-point stencil)."""
    old = param.data[index].item()

    def at(x: float) -> float:
        param.data[index] = x
        with T.no_grad():
            return loss_fn().item()

    try:
        if order == 2:
            return (at(old + step) - at(old - step)) / (2 * step)
        if order == 4:
            return (8 * (at(old + step) - at(old - step)) - (at(old + 2 * step) - at(old - 2 * step))) / (12 * step)
        raise ValueError(f"unsupported stencil order {order}")
    finally:
        param.data[index] = old


def check_gradients(loss_fn: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]], n_probes: int,
                    seed: int = 0, step: float = STEP, order: int = 2) -> GradReport:
    """Compare backward() against central differences on randomly sampled coordinates.

    Coordinates are drawn uniformly over all scalar parameters (weighted by
    tensor size); every tensor is probed at least once when n_probes allows.
    """
    start = time.perf_counter()
    names = [n for n, _ in named]
    params = [p for _, p in named]
    grads = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    picks: list[tuple[int, int]] = []
    if n_probes >= len(params):
        picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(params))]
    flat = rng.choice(int(sizes.sum()), size=max(n_probes - len(picks), 0), replace=False)
    offsets = np.cumsum(sizes) - sizes
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((i, int(f - offsets[i])))
    report = GradReport()
    for i, flat_idx in picks:
        idx = np.unravel_index(flat_idx, params[i].shape)
        idx = tuple(int(j) for j in idx)
        report.probes.append(Probe(names[i], idx, float(grads[i][idx]), numeric_grad(loss_fn, params[i], idx, step, order)))
    report.seconds = time.perf_counter() - start
    return report


def perturb_parameters(named: Sequence[tuple[str, Tensor]], seed: int, scale: float = 0.1) -> None:
    """Add noise to every parameter so zero-initialized maps become generic."""
    rng = np.random.default_rng(seed)
    for _, p in named:
        p.data += (scale * rng.standard_normal(p.shape)).astype(p.dtype)


def model_gradcheck(cfg=None, n_probes: int = 200, seed: int = 0, batch_size: int = 2,
                    step: float = MODEL_STEP, order: int = 4) -> GradReport:
    """Finite-difference check of the full joint loss on a tiny synthetic batch.

    Every parameter (including the zero-initialized f2 maps and heads) is
    perturbed first so that no gradient vanishes structurally.
    """
    from .config import GeneratorConfig, tiny_config
    from .data import generate_synthetic
    from .model import RiaModel, collate

    cfg = cfg or tiny_config()
    gen = GeneratorConfig(n_users=cfg.n_users, n_items=cfg.n_items, n_categories=cfg.n_categories,
                          n_requests=12, m=cfg.m, n=cfg.n, L=cfg.L, T=cfg.T, noise_seed=seed)
    records = list(generate_synthetic(gen))[-batch_size:]
    model = RiaModel(cfg)
    named = list(model.named_parameters())
    perturb_parameters(named, seed + 1)
    batch = collate(records, cfg)
    return check_gradients(lambda: model.loss(batch).total, named, n_probes, seed, step, order)
