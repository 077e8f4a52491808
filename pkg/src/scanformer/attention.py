"""Multi-head attention over per-layer segment caches.

A cache holds one append-only segment per iteration: the text pass first, then
scale 0, 1, ... Queries of iteration ``l`` see their own tokens plus every
earlier segment, never a later one. Replaced (constant) tokens are stored once
per segment with a multiplicity ``n_const``; their key score is offset by
``log(n_const)``, which reproduces softmax attention over ``n_const`` identical
copies exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Tensor

# Additive score bias for blocked keys: exp() of it underflows to exactly 0.
BLOCKED = -1e30


@dataclass
class KVSegment:
    tag: object                    # "text" or a scale index
    keys: Tensor                   # (B, H, n, dh)
    values: Tensor                 # (B, H, n, dh)
    key_bias: np.ndarray | None    # (B, n) additive score bias (padding, log multiplicity)
    const_index: int | None = None
    n_const: int = 0

    @property
    def length(self) -> int:
        return self.keys.shape[2]

    @property
    def const_entry(self):
        if self.const_index is None:
            return None
        i = self.const_index
        return self.keys.data[:, :, i], self.values.data[:, :, i]


@dataclass
class LayerCache:
    segments: list = field(default_factory=list)

    def expected_tag(self):
        if not self.segments:
            return "text"
        last = self.segments[-1].tag
        return 0 if last == "text" else last + 1

    @property
    def entries(self) -> int:
        return sum(s.length for s in self.segments)


@dataclass
class KVCache:
    layers: list

    @classmethod
    def empty(cls, n_layers: int) -> "KVCache":
        return cls([LayerCache() for _ in range(n_layers)])

    def __getitem__(self, i) -> LayerCache:
        return self.layers[i]

    def __len__(self) -> int:
        return len(self.layers)

    def tags(self, layer: int = 0) -> list:
        return [s.tag for s in self.layers[layer].segments]


def append_segment(cache: LayerCache, tag, keys: Tensor, values: Tensor, key_bias=None,
                   const_index: int | None = None, n_const: int = 0) -> KVSegment:
    """Append one iteration's keys/values; segments must arrive in scan order."""
    expected = cache.expected_tag()
    if tag != expected:
        raise ContractError(f"segment {tag!r} appended where {expected!r} was expected")
    if keys.shape != values.shape:
        raise DimensionError(f"keys {keys.shape} vs values {values.shape}")
    if const_index is not None and n_const < 1:
        raise ContractError("a constant entry needs a multiplicity of at least 1")
    seg = KVSegment(tag, keys, values, key_bias, const_index, n_const)
    cache.segments.append(seg)
    return seg


def merge_bias(batch: int, n: int, const_index: int | None, n_const: int, dtype=np.float32) -> np.ndarray:
    bias = np.zeros((batch, n), dtype=dtype)
    if const_index is not None:
        if n_const < 1:
            raise ContractError("n_const must be >= 1 for a present constant entry")
        bias[:, const_index] = math.log(n_const)
    return bias


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(dh) + bias) v; ``bias`` is a constant broadcastable to the scores."""
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    needs_graph = nx.is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    if not needs_graph:
        nq, nk, g = q.shape[-2], k.shape[-2], int(np.prod(q.shape[:-2]))
        nx.record_macs(2 * g * nq * nk * dh)
        return Tensor(kernels.attention(q.data, k.data, v.data, bias, scale))
    scores = nx.matmul(q, nx.transpose(k, _swap_last(k.ndim))) * scale
    if bias is not None:
        scores = scores + np.asarray(bias, dtype=scores.dtype)
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class AttnParams:
    wqkv: Tensor
    bqkv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def project_qkv(x: Tensor, p: AttnParams):
    b, n, d = x.shape
    if d % p.heads:
        raise DimensionError(f"width {d} not divisible by {p.heads} heads")
    qkv = nx.linear(x, p.wqkv, p.bqkv)
    q = split_heads(qkv[:, :, :d], p.heads)
    k = split_heads(qkv[:, :, d:2 * d], p.heads)
    v = split_heads(qkv[:, :, 2 * d:], p.heads)
    return q, k, v


def mha_with_cache(x: Tensor, cache: LayerCache, p: AttnParams, tag, cur_bias=None,
                   const_index: int | None = None, n_const: int = 0,
                   store_detached: bool = True) -> Tensor:
    """Attention of the current iteration over (cached segments + itself).

    ``cur_bias`` is a ``(B, n)`` additive key bias for the current tokens
    (padding, and ``log(n_const)`` at ``const_index``). After the call the
    current keys/values are appended to ``cache`` under ``tag``; with
    ``store_detached`` the stored copy is cut from the gradient graph.
    """
    b, n, _ = x.shape
    q, k, v = project_qkv(x, p)
    if const_index is not None:
        merged = merge_bias(b, n, const_index, n_const, x.dtype)
        cur_bias = merged if cur_bias is None else cur_bias + merged
    keys = [s.keys for s in cache.segments] + [k]
    values = [s.values for s in cache.segments] + [v]
    biases = [_bias_or_zero(s.key_bias, b, s.length, x.dtype) for s in cache.segments]
    biases.append(_bias_or_zero(cur_bias, b, n, x.dtype))
    kk = keys[0] if len(keys) == 1 else nx.concat(keys, axis=2)
    vv = values[0] if len(values) == 1 else nx.concat(values, axis=2)
    bias = np.concatenate(biases, axis=1)[:, None, None, :]
    out = scaled_dot_attention(q, kk, vv, bias)
    out = nx.linear(merge_heads(out), p.wo, p.bo)
    if store_detached:
        k, v = nx.detach(k), nx.detach(v)
    append_segment(cache, tag, k, v, cur_bias, const_index, n_const if const_index is not None else 0)
    return out


def _bias_or_zero(bias, b, n, dtype):
    if bias is None:
        return np.zeros((b, n), dtype=dtype)
    return np.broadcast_to(np.asarray(bias, dtype=dtype), (b, n))


def masked_mha(x: Tensor, p: AttnParams, bias) -> Tensor:
    """Plain attention of ``x`` over itself under an explicit additive score mask."""
    q, k, v = project_qkv(x, p)
    out = scaled_dot_attention(q, k, v, bias)
    return nx.linear(merge_heads(out), p.wo, p.bo)


def block_causal_bias(segment_lengths, key_bias=None) -> np.ndarray:
    """``(n, n)`` score mask: a query of segment ``i`` may see keys of segments ``<= i``.

    ``key_bias`` optionally adds a per-key offset of length ``n`` (padding).
    """
    seg = np.repeat(np.arange(len(segment_lengths)), segment_lengths)
    mask = np.where(seg[None, :] <= seg[:, None], 0.0, BLOCKED)
    if key_bias is not None:
        mask = mask + np.asarray(key_bias)[None, :]
    return mask.astype(np.float32)


def merged_attention(q, keys, values, n_const: int | None = None):
    """Single-query attention where the last key/value row stands for ``n_const`` copies.

    Uses the padding-column construction: the query gets a trailing 1 and the
    keys a trailing column that is 0 except ``log(n_const)`` on the constant
    row, so the constant score is lifted by ``log(n_const)`` inside one dot
    product. ``n_const=None`` means there is no constant entry.
    """
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
    keys = keys if isinstance(keys, Tensor) else Tensor(np.asarray(keys))
    values = values if isinstance(values, Tensor) else Tensor(np.asarray(values))
    dh = q.shape[-1]
    nk = keys.shape[0]
    if keys.shape != (nk, dh) or values.shape[0] != nk:
        raise DimensionError(f"q{q.shape} keys{keys.shape} values{values.shape}")
    pad = np.zeros((nk, 1), dtype=keys.dtype)
    if n_const is not None:
        if n_const < 1:
            raise ContractError("n_const = 0 with a constant entry present; drop the entry instead")
        pad[-1, 0] = math.log(n_const)
    single = q.ndim == 1
    qm = nx.reshape(q, (1, dh)) if single else q
    qp = nx.concat([qm * (1.0 / math.sqrt(dh)), np.ones((qm.shape[0], 1), dtype=q.dtype)], axis=1)
    kp = nx.concat([keys, pad], axis=1)
    attn = nx.softmax(nx.matmul(qp, nx.transpose(kp)), axis=-1)
    out = nx.matmul(attn, values)
    return nx.reshape(out, (values.shape[-1],)) if single else out
