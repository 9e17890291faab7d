"""Reference numerics for one Transformer block, monolithic and partitioned.

Tensors are plain float64 numpy arrays (row-major, rows = tokens). Block
structure is post-norm::

    h   = norm1(x + W_O-projected multi-head attention(x))
    out = norm2(h + W_L2 @ gelu(W_L1 @ h))

In the partitioned run every chip computes a partial of the attention and FC
outputs from its own shards; the skip term is folded into the reduction on
the root chip, which also applies the normalization before broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import CacheFull, PlanMismatch, ShapeMismatch
from .model import BlockWeights, ModelConfig
from .partition import PartitionPlan, tensor_shape

LN_EPS = 1e-5


def softmax_row(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def gelu(x: np.ndarray, approximate: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if approximate:
        return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def layer_norm_row(x: np.ndarray, weight: np.ndarray | None = None, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    return y if weight is None else y * weight


def rms_norm_row(x: np.ndarray, weight: np.ndarray | None = None, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x / np.sqrt((x**2).mean(axis=-1, keepdims=True) + eps)
    return y if weight is None else y * weight


def normalize(x: np.ndarray, weight: np.ndarray, kind: str) -> np.ndarray:
    return rms_norm_row(x, weight) if kind == "rms" else layer_norm_row(x, weight)


def attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    scale_dim: int,
    causal: bool = False,
    offset: int | None = None,
) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V for one head.

    With ``causal`` set, query row ``i`` sits at absolute position
    ``offset + i`` and sees keys ``0..offset+i``. ``offset`` defaults to
    ``len(K) - len(Q)``, i.e. the queries are the newest positions.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeMismatch("attention operands must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ShapeMismatch(f"Q width {Q.shape[1]} != K width {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"K has {K.shape[0]} rows, V has {V.shape[0]}")
    if scale_dim < 1:
        raise ShapeMismatch("scale_dim must be >= 1")
    logits = Q @ K.T / np.sqrt(scale_dim)
    if causal:
        if offset is None:
            offset = K.shape[0] - Q.shape[0]
        rows = np.arange(Q.shape[0])[:, None] + offset
        logits = np.where(np.arange(K.shape[0])[None, :] <= rows, logits, -np.inf)
    return softmax_row(logits) @ V


class KVCache:
    """Append-only key/value store for a set of heads."""

    def __init__(self, heads, capacity: int, head_dim: int):
        self.heads = tuple(heads)
        self.capacity = capacity
        self.head_dim = head_dim
        self.k = np.zeros((len(self.heads), capacity, head_dim))
        self.v = np.zeros((len(self.heads), capacity, head_dim))
        self.filled = 0

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        """Append rows for every held head; ``k_new``/``v_new`` are (heads, rows, P)."""
        if k_new.shape != v_new.shape or k_new.shape[0] != len(self.heads) or k_new.shape[2] != self.head_dim:
            raise ShapeMismatch(f"cache append of shape {k_new.shape}, holding {len(self.heads)} heads")
        rows = k_new.shape[1]
        if self.filled + rows > self.capacity:
            raise CacheFull(f"cache holds {self.filled}/{self.capacity}, cannot append {rows}")
        self.k[:, self.filled : self.filled + rows] = k_new
        self.v[:, self.filled : self.filled + rows] = v_new
        self.filled += rows

    def keys(self, i: int) -> np.ndarray:
        return self.k[i, : self.filled]

    def values(self, i: int) -> np.ndarray:
        return self.v[i, : self.filled]

    def subset(self, heads) -> "KVCache":
        """Copy of the cache restricted to ``heads`` (global head ids)."""
        idx = [self.heads.index(h) for h in heads]
        out = KVCache(heads, self.capacity, self.head_dim)
        out.k[:] = self.k[idx]
        out.v[:] = self.v[idx]
        out.filled = self.filled
        return out

    def copy(self) -> "KVCache":
        return self.subset(self.heads)


def _check_input(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim:
        raise ShapeMismatch(f"input has shape {x.shape}, expected (tokens, {cfg.embed_dim})")
    if not np.all(np.isfinite(x)):
        raise ShapeMismatch("input contains non-finite values")
    return x


def _heads_attention(x, Wq, Wk, Wv, heads, cfg: ModelConfig, cache: KVCache | None) -> np.ndarray:
    """Attention for a contiguous run of heads; returns the concatenated context (rows, P*len(heads))."""
    P = cfg.head_dim
    q_all, k_all, v_all = x @ Wq, x @ Wk, x @ Wv
    n = len(heads)
    split = lambda m: m.reshape(m.shape[0], n, P).transpose(1, 0, 2)  # noqa: E731
    q_h, k_h, v_h = split(q_all), split(k_all), split(v_all)
    if cache is not None:
        if tuple(cache.heads) != tuple(heads):
            raise PlanMismatch(f"cache holds heads {cache.heads}, chip computes {tuple(heads)}")
        cache.append(k_h, v_h)
    out = np.empty((x.shape[0], n * P))
    for i in range(n):
        if cache is not None:
            K, V = cache.keys(i), cache.values(i)
        else:
            K, V = k_h[i], v_h[i]
        out[:, i * P : (i + 1) * P] = attention(q_h[i], K, V, P, causal=cfg.causal)
    return out


def run_block_monolithic(
    x: np.ndarray, w: BlockWeights, cfg: ModelConfig, cache: KVCache | None = None
) -> np.ndarray:
    """One full block on a single device. A cache, if given, is appended to in place."""
    x = _check_input(x, cfg)
    w.check_shapes(cfg)
    if cache is not None and cache.heads != tuple(range(cfg.num_heads)):
        raise ShapeMismatch("monolithic cache must hold every head")
    ctx = _heads_attention(x, w.W_query, w.W_key, w.W_value, range(cfg.num_heads), cfg, cache)
    h = normalize(x + ctx @ w.W_O, w.norm1, cfg.norm)
    ff = gelu(h @ w.W_L1, cfg.gelu_approx) @ w.W_L2
    return normalize(h + ff, w.norm2, cfg.norm)


@dataclass
class ChipState:
    chip_id: int
    shards: dict[str, np.ndarray]
    heads: range
    cache: KVCache | None = None
    norms: tuple[np.ndarray, np.ndarray] | None = None  # root chip only
    scratch: dict[str, np.ndarray] = field(default_factory=dict)

    def weight_elements(self) -> int:
        n = sum(a.size for a in self.shards.values())
        if self.norms is not None:
            n += sum(a.size for a in self.norms)
        return n


def materialize_chips(
    plan: PartitionPlan, w: BlockWeights, cfg: ModelConfig, caches: list[KVCache] | None = None
) -> list[ChipState]:
    """Slice the dense weights into per-chip copies holding exactly their shards."""
    w.check_shapes(cfg)
    chips = []
    for c in range(plan.n_chips):
        mine = plan.shards_for(c)
        if set(mine) != set(BlockWeights.MATRICES):
            raise PlanMismatch(f"chip {c} does not hold one shard of every tensor")
        shards = {}
        for name, spec in mine.items():
            rows, cols = tensor_shape(cfg, name)
            if spec.rows.end > rows or spec.cols.end > cols:
                raise PlanMismatch(f"{name} shard on chip {c} exceeds tensor shape {(rows, cols)}")
            shards[name] = np.array(getattr(w, name)[spec.index()], copy=True)
        state = ChipState(c, shards, plan.heads_for(c, cfg.head_dim))
        if caches is not None:
            state.cache = caches[c]
        if c == plan.tree.root:
            state.norms = (w.norm1.copy(), w.norm2.copy())
        chips.append(state)
    return chips


def split_cache(cache: KVCache, plan: PartitionPlan, cfg: ModelConfig) -> list[KVCache]:
    """Distribute a monolithic cache into per-chip slices following the plan's head mapping."""
    return [cache.subset(tuple(plan.heads_for(c, cfg.head_dim))) for c in range(plan.n_chips)]


def _all_reduce(partials: list[np.ndarray], plan: PartitionPlan, label: str, log, nbytes: int) -> np.ndarray:
    """Hierarchical sum of ``partials``; returns the value held by the root."""
    acc = {c: p for c, p in enumerate(partials)}
    for lvl, level in enumerate(plan.tree.levels):
        for g in level:
            total = acc[g.receiver]
            for s in g.senders:
                if log is not None:
                    log.append((s, g.receiver, nbytes, f"{label}.reduce", lvl))
                total = total + acc.pop(s)
            acc[g.receiver] = total
    return acc[plan.tree.root]


def _broadcast(value: np.ndarray, plan: PartitionPlan, label: str, log, nbytes: int) -> list[np.ndarray]:
    held = {plan.tree.root: value}
    depth = len(plan.tree.levels)
    for lvl in reversed(range(depth)):
        for g in plan.tree.levels[lvl]:
            for s in g.senders:
                if log is not None:
                    log.append((g.receiver, s, nbytes, f"{label}.broadcast", depth - 1 - lvl))
                held[s] = held[g.receiver].copy()
    return [held[c] for c in range(plan.n_chips)]


def run_block_partitioned(
    x: np.ndarray,
    plan: PartitionPlan,
    w: BlockWeights,
    cfg: ModelConfig,
    caches: list[KVCache] | None = None,
    message_log: list | None = None,
    chips: list[ChipState] | None = None,
) -> np.ndarray:
    """Run one block split over ``plan.n_chips`` simulated chips.

    ``caches`` holds one KVCache per chip (each with that chip's heads) and is
    appended to in place. Every transferred tensor is recorded in
    ``message_log`` as ``(src, dst, bytes, label, level)`` when a list is
    passed. Returns the root's final output.
    """
    x = _check_input(x, cfg)
    if caches is not None and len(caches) != plan.n_chips:
        raise PlanMismatch(f"{len(caches)} caches for {plan.n_chips} chips")
    if chips is None:
        chips = materialize_chips(plan, w, cfg, caches)
    root = plan.tree.root
    msg_bytes = x.shape[0] * cfg.embed_dim * cfg.bytes_per_elem

    # every chip holds the full input after the previous broadcast
    partials = []
    for st in chips:
        sh = st.shards
        ctx = _heads_attention(x, sh["W_query"], sh["W_key"], sh["W_value"], st.heads, cfg, st.cache)
        part = ctx @ sh["W_O"]
        partials.append(x + part if st.chip_id == root else part)
    attn = _all_reduce(partials, plan, "mhsa", message_log, msg_bytes)
    norm1, norm2 = chips[root].norms
    h_all = _broadcast(normalize(attn, norm1, cfg.norm), plan, "mhsa", message_log, msg_bytes)

    partials = []
    for st in chips:
        h = h_all[st.chip_id]
        part = gelu(h @ st.shards["W_L1"], cfg.gelu_approx) @ st.shards["W_L2"]
        partials.append(h + part if st.chip_id == root else part)
    ff = _all_reduce(partials, plan, "fc", message_log, msg_bytes)
    out_all = _broadcast(normalize(ff, norm2, cfg.norm), plan, "fc", message_log, msg_bytes)
    return out_all[root]


def new_cache(cfg: ModelConfig, heads=None, capacity: int | None = None) -> KVCache:
    heads = range(cfg.num_heads) if heads is None else heads
    return KVCache(tuple(heads), capacity or cfg.kv_cache_len or cfg.seq_len, cfg.head_dim)
