"""Partial attention over KV shards and log-sum-exp merging.

Each KV-binding instance attends a query against its own shard only and
returns the shard-normalized output together with the log of the shard's
softmax denominator. The MoE binding recombines the partials exactly:
weights ``exp(lse_k - lse_total)`` rescale each shard's output to the
global softmax normalization.

Arrays follow ``q[..., d]``, ``K[..., L, d]``, ``V[..., L, d]`` so a leading
head axis broadcasts through every function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DcpError


class EmptyShard(DcpError):
    pass


@dataclass
class AttnShardResult:
    partial_out: np.ndarray  # [..., d]
    lse: np.ndarray  # [...]


def _scores(q, K, scale):
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    return np.einsum("...d,...ld->...l", q, K) * scale


def reference_attention(q, K, V, scale: float | None = None) -> np.ndarray:
    """One-pass softmax(scale * K q) @ V with max subtraction."""
    q, K, V = np.asarray(q), np.asarray(K), np.asarray(V)
    if K.shape[-2] < 1:
        raise ValueError("attention needs at least one key")
    s = _scores(q, K, scale)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("...l,...ld->...d", p, V)


def shard_attention(q, K_shard, V_shard, scale: float | None = None) -> AttnShardResult:
    q, K_shard, V_shard = np.asarray(q), np.asarray(K_shard), np.asarray(V_shard)
    if K_shard.shape[-2] == 0:
        raise EmptyShard("shard holds no keys")
    s = _scores(q, K_shard, scale)
    mx = s.max(axis=-1, keepdims=True)
    p = np.exp(s - mx)
    denom = p.sum(axis=-1, keepdims=True)
    out = np.einsum("...l,...ld->...d", p / denom, V_shard)
    lse = (mx + np.log(denom))[..., 0]
    return AttnShardResult(out, lse)


def lse_merge(partials: Sequence[AttnShardResult]) -> np.ndarray:
    """Combine shard partials into the full-softmax output.

    Partials are folded in list order so the reduction is reproducible.
    """
    if not partials:
        raise ValueError("lse_merge needs at least one partial")
    if len(partials) == 1:
        return partials[0].partial_out
    lse = np.stack([np.asarray(p.lse) for p in partials])  # [k, ...]
    out = np.stack([np.asarray(p.partial_out) for p in partials])  # [k, ..., d]
    mx = lse.max(axis=0)
    w = np.exp(lse - mx)
    w /= w.sum(axis=0)
    acc = np.zeros_like(out[0])
    for k in range(len(partials)):
        acc = acc + w[k][..., None] * out[k]
    return acc


def merged_result(partials: Sequence[AttnShardResult]) -> AttnShardResult:
    """Merge into a new partial (output plus combined LSE) for incremental folding."""
    lse = np.stack([np.asarray(p.lse) for p in partials])
    mx = lse.max(axis=0)
    total = mx + np.log(np.exp(lse - mx).sum(axis=0))
    return AttnShardResult(lse_merge(partials), total)


def split_keys(L: int, shards: int, rng: np.random.Generator | None = None, contiguous: bool = True) -> list[np.ndarray]:
    """Partition key indices 0..L-1 into ``shards`` non-empty groups."""
    if not 1 <= shards <= L:
        raise ValueError("need 1 <= shards <= L")
    rng = rng or np.random.default_rng(0)
    cuts = np.sort(rng.choice(np.arange(1, L), size=shards - 1, replace=False)) if shards > 1 else []
    idx = np.arange(L) if contiguous else rng.permutation(L)
    return [np.sort(a) for a in np.split(idx, cuts)]


def distributed_attention(q, K, V, groups: Sequence[np.ndarray], scale: float | None = None) -> np.ndarray:
    """Route q to each key group, attend locally, merge at the origin."""
    parts = [shard_attention(q, K[..., g, :], V[..., g, :], scale) for g in groups if len(g)]
    return lse_merge(parts)


def rel_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def validate_merge(n_cases: int = 1000, seed: int = 0, dtype=np.float32) -> dict:
    """Random-instance check of sharded attention against the monolithic oracle.

    The distributed path runs in ``dtype``; the oracle in float64.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        d = int(rng.choice([8, 16, 64]))
        L = int(rng.integers(8, 513))
        shards = int(rng.choice([1, 2, 4, 8]))
        q = rng.standard_normal(d)
        K = rng.standard_normal((L, d))
        V = rng.standard_normal((L, d))
        groups = split_keys(L, shards, rng, contiguous=bool(rng.integers(2)))
        got = distributed_attention(q.astype(dtype), K.astype(dtype), V.astype(dtype), groups)
        ref = reference_attention(q, K, V)
        worst = max(worst, rel_l2(got, ref))
    return {"cases": n_cases, "max_rel_err": worst}
