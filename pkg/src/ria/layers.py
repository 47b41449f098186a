"""Neural building blocks: embeddings, MLPs, HSTU, target and self attention."""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, fields
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, EmbeddingLookupError
from .tensor import Tensor

MASK_MODES = ("causal", "full")


# -- operation counters --------------------------------------------------------

@dataclass
class OpCounters:
    """Per-instance evaluation counts (one HSTU eval = one sequence through one block)."""

    hstu_evals: int = 0
    target_attention_evals: int = 0
    self_attention_evals: int = 0
    mlp_evals: int = 0

    def merge(self, other: "OpCounters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_active_counters: contextvars.ContextVar[OpCounters | None] = contextvars.ContextVar("ria_counters", default=None)


@contextlib.contextmanager
def counting(counters: OpCounters):
    token = _active_counters.set(counters)
    try:
        yield counters
    finally:
        _active_counters.reset(token)


def _count(name: str, n: int) -> None:
    c = _active_counters.get()
    if c is not None:
        setattr(c, name, getattr(c, name) + int(n))


def _lead(shape: Sequence[int], trailing: int) -> int:
    return int(np.prod(shape[: len(shape) - trailing], dtype=np.int64))


# -- parameters ----------------------------------------------------------------

class Init:
    """Seeded parameter factory: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def __init__(self, seed: int, dtype=np.float64):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def uniform(self, shape: Sequence[int], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, dtype=self.dtype)

    def zeros(self, shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(shape)), requires_grad=True, dtype=self.dtype)

    def ones(self, shape: Sequence[int]) -> Tensor:
        return Tensor(np.ones(tuple(shape)), requires_grad=True, dtype=self.dtype)


class Module:
    """Container whose Tensor attributes with requires_grad are parameters.

    Registry names follow attribute insertion order, so they are stable
    across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Init, zero: bool = False, bias: bool = True):
        self.weight = init.zeros((d_in, d_out)) if zero else init.uniform((d_in, d_out), d_in)
        self.bias = init.zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear: input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = x @ self.weight if x.ndim >= 2 else T.reshape(T.reshape(x, (1, -1)) @ self.weight, (-1,))
        return y + self.bias if self.bias is not None else y


class Mlp(Module):
    """SiLU hidden layers, linear output (a logit when the last width is 1)."""

    def __init__(self, widths: Sequence[int], init: Init, zero_last: bool = False):
        widths = list(widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"mlp widths must be >= 2 positive entries, got {widths}", "layers")
        self.widths = widths
        self.layers = [Linear(a, b, init, zero=zero_last and i == len(widths) - 2)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        _count("mlp_evals", _lead(x.shape, 1))
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.silu(x)
        return x


class EmbeddingTable(Module):
    def __init__(self, name: str, vocab_size: int, dim: int, init: Init):
        if vocab_size < 1 or dim < 1:
            raise ContractError(f"embedding {name!r}: vocab and dim must be positive", "layers")
        self.field = name
        self.vocab_size = vocab_size
        self.dim = dim
        self.rows = init.uniform((vocab_size, dim), dim)

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size:
            bad = (ids < 0) | (ids >= self.vocab_size)
            if bad.any():
                raise EmbeddingLookupError(self.field, int(ids[bad].reshape(-1)[0]), self.vocab_size)
        return T.take_rows(self.rows, ids)


def embed_features(ids: Mapping[str, np.ndarray], tables: Mapping[str, EmbeddingTable],
                   fields_order: Sequence[str]) -> Tensor:
    """Concatenate per-field lookups in declaration order."""
    parts = []
    for name in fields_order:
        if name not in ids:
            raise ContractError(f"missing feature field {name!r}", "layers")
        parts.append(tables[name].lookup(ids[name]))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


# -- masks ---------------------------------------------------------------------

def structural_mask(s: int, mode: str) -> np.ndarray:
    if mode == "causal":
        return np.tril(np.ones((s, s), dtype=bool))
    if mode == "full":
        return np.ones((s, s), dtype=bool)
    raise ContractError(f"unknown mask mode {mode!r}", "layers")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, s, d = x.shape
    y = T.reshape(x, (*lead, s, heads, d // heads))
    nd = len(lead)
    return T.transpose(y, list(range(nd)) + [nd + 1, nd, nd + 2])


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, h, s, dh = x.shape
    nd = len(lead)
    y = T.transpose(x, list(range(nd)) + [nd + 1, nd, nd + 2])
    return T.reshape(y, (*lead, s, h * dh))


# -- HSTU ------------------------------------------------------------------------

class HstuBlock(Module):
    """Pointwise-gated, softmax-free attention block with a residual path.

    (U, V, Q, K) = split(SiLU(f1(X))); A = SiLU(QK^T / sqrt(d)) / s under the
    mask; out = X + f2(LayerNorm(AV * U)). f2 starts at zero, so a fresh block
    is the identity map.
    """

    def __init__(self, d: int, init: Init, mask_mode: str = "full", heads: int = 1, eps: float = 1e-6):
        if mask_mode not in MASK_MODES:
            raise ContractError(f"unknown mask mode {mask_mode!r}", "layers")
        if d % heads:
            raise ContractError(f"width {d} not divisible by {heads} heads", "layers")
        self.d = d
        self.mask_mode = mask_mode
        self.heads = heads
        self.eps = eps
        self.f1 = Linear(d, 4 * d, init)
        self.f2 = Linear(d, d, init, zero=True)
        self.gamma = init.ones((d,))
        self.beta = init.zeros((d,))

    def attention_weights(self, s: int, valid: np.ndarray | None, lead: tuple, dtype) -> np.ndarray:
        """Constant mask/s factor applied to SiLU scores, shape lead + (s, s)."""
        mask = structural_mask(s, self.mask_mode)
        if valid is None:
            return (mask / s).astype(dtype)
        valid = np.asarray(valid, dtype=bool)
        counts = np.maximum(valid.sum(axis=-1), 1)
        w = mask & valid[..., None, :]
        return (w / counts[..., None, None]).astype(dtype)

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.d:
            raise DimensionError(f"hstu_block: expected [..., s, {self.d}], got {x.shape}")
        s = x.shape[-2]
        if s == 0:
            raise ContractError("hstu_block: empty sequence", "layers")
        _count("hstu_evals", _lead(x.shape, 2))
        u, v, q, k = T.split(T.silu(self.f1(x)), 4)
        qh, kh, vh = (_split_heads(t, self.heads) for t in (q, k, v))
        dh = self.d // self.heads
        scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh))
        w = self.attention_weights(s, valid, x.shape[:-2], x.dtype)
        if self.heads > 1:
            w = np.ascontiguousarray(np.broadcast_to(np.expand_dims(w, -3), scores.shape)) \
                if w.ndim > 2 else w
        a = T.silu(scores) * w
        av = _merge_heads(T.matmul(a, vh), self.heads)
        return x + self.f2(T.layer_norm(av * u, self.gamma, self.beta, self.eps))


# -- attention ---------------------------------------------------------------------

class TargetAttention(Module):
    """DIN-style attention of one query over a set of keys (values are keys).

    Scores come from an MLP over [q, k, q - k, q * k]; with ``normalize`` they
    pass through a softmax, otherwise raw scores weight the keys directly.
    """

    def __init__(self, d: int, init: Init, hidden: int | None = None, normalize: bool = True):
        self.d = d
        self.normalize = normalize
        self.scorer = Mlp([4 * d, hidden or d, 1], init)

    def weights(self, q: Tensor, keys: Tensor, valid: np.ndarray | None = None) -> Tensor:
        if keys.ndim < 2 or keys.shape[-1] != self.d or q.shape[-1] != self.d:
            raise DimensionError(f"target_attention: query {q.shape} / keys {keys.shape} width != {self.d}")
        if q.shape[:-1] != keys.shape[:-2]:
            raise DimensionError(f"target_attention: query {q.shape} and keys {keys.shape} lead axes differ")
        n_keys = keys.shape[-2]
        if n_keys == 0:
            raise ContractError("target_attention: empty key set", "layers")
        _count("target_attention_evals", _lead(q.shape, 1))
        qe = T.expand(q, -2, n_keys)
        feats = T.concat([qe, keys, qe - keys, qe * keys], axis=-1)
        e = T.reshape(self.scorer(feats), keys.shape[:-1])
        if self.normalize:
            return T.softmax(e, valid)
        return e * valid.astype(e.dtype) if valid is not None else e

    def __call__(self, q: Tensor, keys: Tensor, valid: np.ndarray | None = None) -> Tensor:
        alpha = self.weights(q, keys, valid)
        lead = alpha.shape[:-1]
        out = T.matmul(T.reshape(alpha, lead + (1, alpha.shape[-1])), keys)
        return T.reshape(out, lead + (self.d,))


class SelfAttention(Module):
    """Scaled dot-product self-attention, bidirectional, no biases."""

    def __init__(self, d: int, init: Init, heads: int = 1):
        if d % heads:
            raise ContractError(f"width {d} not divisible by {heads} heads", "layers")
        self.d = d
        self.heads = heads
        self.w_q = init.uniform((d, d), d)
        self.w_k = init.uniform((d, d), d)
        self.w_v = init.uniform((d, d), d)

    def _project(self, e: Tensor):
        if e.ndim < 2 or e.shape[-1] != self.d:
            raise DimensionError(f"self_attention: expected [..., m, {self.d}], got {e.shape}")
        return (_split_heads(e @ w, self.heads) for w in (self.w_q, self.w_k, self.w_v))

    def _weights(self, q: Tensor, k: Tensor, valid: np.ndarray | None) -> Tensor:
        dh = self.d // self.heads
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
        mask = None
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            mask = valid[..., None, :] if self.heads == 1 else valid[..., None, None, :]
        return T.softmax(scores, mask)

    def attention_weights(self, e: Tensor, valid: np.ndarray | None = None) -> Tensor:
        q, k, _ = self._project(e)
        return self._weights(q, k, valid)

    def __call__(self, e: Tensor, valid: np.ndarray | None = None) -> Tensor:
        q, k, v = self._project(e)
        _count("self_attention_evals", _lead(e.shape, 2))
        return _merge_heads(T.matmul(self._weights(q, k, valid), v), self.heads)
