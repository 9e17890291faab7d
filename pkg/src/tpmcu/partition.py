"""Tensor-parallel sharding of one Transformer block across chips.

Attention weights are split along the head axis, the two FC matrices along
the intermediate (F) axis. After the MHSA and after the FC layer the partial
outputs are summed by a hierarchical reduce (groups of ``fan_in`` chips),
normalized on the root chip and broadcast back along the same tree.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass
from typing import Iterator

from .errors import ConfigError, IndivisibleHeads, IndivisibleIntermediate
from .model import ModelConfig, ValidationResult, block_weight_bytes, sharded_param_count

TENSORS = ("W_query", "W_key", "W_value", "W_O", "W_L1", "W_L2")
HEAD_COL_TENSORS = ("W_query", "W_key", "W_value")
PLAN_FORMAT = "tpmcu.plan/1"


def tensor_shape(cfg: ModelConfig, tensor: str) -> tuple[int, int]:
    E, PH, F = cfg.embed_dim, cfg.proj_dim, cfg.intermediate_dim
    return {
        "W_query": (E, PH),
        "W_key": (E, PH),
        "W_value": (E, PH),
        "W_O": (PH, E),
        "W_L1": (E, F),
        "W_L2": (F, E),
    }[tensor]


@dataclass(frozen=True)
class AxisRange:
    """Half-open index range ``[start, end)`` along one tensor axis."""

    start: int
    end: int
    axis: str  # "E", "head" (P*H axis), or "F"

    @property
    def size(self) -> int:
        return self.end - self.start

    def as_slice(self) -> slice:
        return slice(self.start, self.end)


@dataclass(frozen=True)
class ShardSpec:
    chip: int
    tensor: str
    rows: AxisRange
    cols: AxisRange

    @property
    def numel(self) -> int:
        return self.rows.size * self.cols.size

    def index(self) -> tuple[slice, slice]:
        return self.rows.as_slice(), self.cols.as_slice()


@dataclass(frozen=True)
class ReduceGroup:
    receiver: int
    senders: tuple[int, ...]


@dataclass(frozen=True)
class ReduceTree:
    fan_in: int
    levels: tuple[tuple[ReduceGroup, ...], ...]
    root: int = 0

    @property
    def n_messages(self) -> int:
        return sum(len(g.senders) for level in self.levels for g in level)


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    nbytes: int
    label: str
    level: int


@dataclass(frozen=True)
class SyncPoint:
    name: str
    reduce: tuple[Message, ...]
    norm_chip: int
    broadcast: tuple[Message, ...]


@dataclass(frozen=True)
class CommSchedule:
    syncs: tuple[SyncPoint, ...]

    def messages(self) -> Iterator[Message]:
        for sync in self.syncs:
            yield from sync.reduce
            yield from sync.broadcast


@dataclass(frozen=True)
class PartitionPlan:
    n_chips: int
    shards: tuple[ShardSpec, ...]
    tree: ReduceTree
    schedule: CommSchedule
    chip_weight_bytes: tuple[int, ...]

    def shards_for(self, chip: int) -> dict[str, ShardSpec]:
        return {s.tensor: s for s in self.shards if s.chip == chip}

    def heads_for(self, chip: int, head_dim: int) -> range:
        spec = self.shards_for(chip)["W_query"].cols
        return range(spec.start // head_dim, spec.end // head_dim)

    def replace(self, **changes) -> "PartitionPlan":
        return dataclasses.replace(self, **changes)


def build_reduce_tree(n_chips: int, fan_in: int = 4) -> ReduceTree:
    """Group chips ``fan_in`` at a time; the lowest id of each group receives."""
    if n_chips < 1:
        raise ConfigError("n_chips must be >= 1")
    if fan_in < 2:
        raise ConfigError("fan_in must be >= 2")
    levels = []
    alive = list(range(n_chips))
    while len(alive) > 1:
        groups = []
        for i in range(0, len(alive), fan_in):
            members = alive[i : i + fan_in]
            groups.append(ReduceGroup(members[0], tuple(members[1:])))
        levels.append(tuple(groups))
        alive = [g.receiver for g in groups]
    return ReduceTree(fan_in=fan_in, levels=tuple(levels), root=alive[0])


def build_schedule(tree: ReduceTree, message_bytes: int) -> CommSchedule:
    syncs = []
    for name in ("mhsa", "fc"):
        reduce = tuple(
            Message(s, g.receiver, message_bytes, f"{name}.reduce", lvl)
            for lvl, level in enumerate(tree.levels)
            for g in level
            for s in g.senders
        )
        # broadcast walks the tree top-down
        depth = len(tree.levels)
        broadcast = tuple(
            Message(g.receiver, s, message_bytes, f"{name}.broadcast", depth - 1 - lvl)
            for lvl, level in reversed(list(enumerate(tree.levels)))
            for g in level
            for s in g.senders
        )
        syncs.append(SyncPoint(name, reduce, tree.root, broadcast))
    return CommSchedule(tuple(syncs))


def check_divisible(cfg: ModelConfig, n_chips: int) -> None:
    if n_chips < 1:
        raise ConfigError("n_chips must be >= 1")
    if cfg.num_heads % n_chips:
        raise IndivisibleHeads(f"IndivisibleHeads: num_heads={cfg.num_heads} not divisible by {n_chips} chips")
    if cfg.intermediate_dim % n_chips:
        raise IndivisibleIntermediate(
            f"IndivisibleIntermediate: intermediate_dim={cfg.intermediate_dim} not divisible by {n_chips} chips"
        )


def plan_partition(cfg: ModelConfig, n_chips: int, fan_in: int = 4) -> PartitionPlan:
    check_divisible(cfg, n_chips)
    E, P, F = cfg.embed_dim, cfg.head_dim, cfg.intermediate_dim
    heads = cfg.num_heads // n_chips
    f_width = F // n_chips
    full_e = AxisRange(0, E, "E")
    shards = []
    for chip in range(n_chips):
        cols = AxisRange(chip * heads * P, (chip + 1) * heads * P, "head")
        frange = AxisRange(chip * f_width, (chip + 1) * f_width, "F")
        shards += [ShardSpec(chip, t, full_e, cols) for t in HEAD_COL_TENSORS]
        shards.append(ShardSpec(chip, "W_O", cols, full_e))
        shards.append(ShardSpec(chip, "W_L1", full_e, frange))
        shards.append(ShardSpec(chip, "W_L2", frange, full_e))
    tree = build_reduce_tree(n_chips, fan_in)
    schedule = build_schedule(tree, cfg.query_len * E * cfg.bytes_per_elem)
    per_chip = sharded_param_count(cfg) // n_chips * cfg.bytes_per_elem
    return PartitionPlan(n_chips, tuple(shards), tree, schedule, (per_chip,) * n_chips)


def comm_bytes_per_block(plan: PartitionPlan, cfg: ModelConfig) -> int:
    """Closed form: 2 syncs x (reduce + broadcast) x (n-1) messages of query_len*E*b bytes."""
    return 4 * (plan.n_chips - 1) * cfg.query_len * cfg.embed_dim * cfg.bytes_per_elem


def _rect_overlap(a: ShardSpec, b: ShardSpec) -> int:
    rows = min(a.rows.end, b.rows.end) - max(a.rows.start, b.rows.start)
    cols = min(a.cols.end, b.cols.end) - max(a.cols.start, b.cols.start)
    return max(rows, 0) * max(cols, 0)


def verify_plan(plan: PartitionPlan, cfg: ModelConfig) -> ValidationResult:
    """Check disjointness, coverage, even split, tree shape and the two-sync schedule."""
    v: list[str] = []
    n = plan.n_chips
    P, b = cfg.head_dim, cfg.bytes_per_elem

    for tensor in TENSORS:
        rows, cols = tensor_shape(cfg, tensor)
        parts = [s for s in plan.shards if s.tensor == tensor]
        for s in parts:
            if not (0 <= s.chip < n):
                v.append(f"{tensor}: shard on unknown chip {s.chip}")
            for rng, bound in ((s.rows, rows), (s.cols, cols)):
                if not (0 <= rng.start < rng.end <= bound):
                    v.append(f"{tensor}: chip {s.chip} range [{rng.start}, {rng.end}) empty or out of bounds")
        for a, c in itertools.combinations(parts, 2):
            if _rect_overlap(a, c):
                v.append(f"duplication: {tensor} chips {a.chip} and {c.chip} overlap")
        if sum(s.numel for s in parts) != rows * cols:
            v.append(f"coverage: {tensor} shards cover {sum(s.numel for s in parts)} of {rows * cols} elements")

    for chip in range(n):
        mine = [s for s in plan.shards if s.chip == chip]
        by_name = {s.tensor: s for s in mine}
        if len(by_name) != len(mine):
            v.append(f"duplication: chip {chip} holds two shards of one tensor")
        for t in HEAD_COL_TENSORS:
            s = by_name.get(t)
            if s and (s.rows.size != cfg.embed_dim or s.cols.start % P or s.cols.end % P):
                v.append(f"{t}: chip {chip} shard is not a run of whole heads over the full E axis")
        s = by_name.get("W_O")
        if s and (s.cols.size != cfg.embed_dim or s.rows.start % P or s.rows.end % P):
            v.append(f"W_O: chip {chip} shard is not a run of whole heads over the full E axis")
        l1, l2 = by_name.get("W_L1"), by_name.get("W_L2")
        if l1 and l2 and (l1.cols.start, l1.cols.end) != (l2.rows.start, l2.rows.end):
            v.append(f"W_L1/W_L2: chip {chip} F-ranges differ")

    held = [sum(s.numel for s in plan.shards if s.chip == c) * b for c in range(n)]
    if len(set(held)) > 1:
        v.append(f"uneven split: per-chip weight bytes {held}")
    if tuple(held) != tuple(plan.chip_weight_bytes):
        v.append("chip_weight_bytes does not match the shards")

    senders = [s for level in plan.tree.levels for g in level for s in g.senders]
    if sorted(senders) != sorted(set(range(n)) - {plan.tree.root}):
        v.append("tree: every non-root chip must send exactly once")
    if any(len(g.senders) + 1 > plan.tree.fan_in for level in plan.tree.levels for g in level):
        v.append("tree: group larger than fan_in")

    syncs = plan.schedule.syncs
    if len(syncs) != 2:
        v.append(f"sync count: {len(syncs)} sync points, expected 2")
    msg_bytes = cfg.query_len * cfg.embed_dim * b
    for sync in syncs:
        if len(sync.reduce) != n - 1 or len(sync.broadcast) != n - 1:
            v.append(f"sync {sync.name}: expected {n - 1} reduce and broadcast messages")
        if sync.norm_chip != plan.tree.root:
            v.append(f"sync {sync.name}: normalization off the root chip")
        for m in sync.reduce + sync.broadcast:
            if m.nbytes != msg_bytes:
                v.append(f"sync {sync.name}: message {m.src}->{m.dst} carries {m.nbytes} bytes, expected {msg_bytes}")
    return ValidationResult(tuple(dict.fromkeys(v)))


def per_chip_weight_bytes(cfg: ModelConfig, n_chips: int) -> int:
    check_divisible(cfg, n_chips)
    return (block_weight_bytes(cfg) - 2 * cfg.embed_dim * cfg.bytes_per_elem) // n_chips


# --------------------------------------------------------------------------
# JSON layout


def plan_to_dict(plan: PartitionPlan) -> dict:
    return {
        "format": PLAN_FORMAT,
        "n_chips": plan.n_chips,
        "chip_weight_bytes": list(plan.chip_weight_bytes),
        "shards": [
            {
                "chip": s.chip,
                "tensor": s.tensor,
                "rows": [s.rows.start, s.rows.end, s.rows.axis],
                "cols": [s.cols.start, s.cols.end, s.cols.axis],
            }
            for s in plan.shards
        ],
        "tree": {
            "fan_in": plan.tree.fan_in,
            "root": plan.tree.root,
            "levels": [[{"receiver": g.receiver, "senders": list(g.senders)} for g in lvl] for lvl in plan.tree.levels],
        },
        "schedule": [
            {
                "name": s.name,
                "norm_chip": s.norm_chip,
                "reduce": [[m.src, m.dst, m.nbytes, m.level] for m in s.reduce],
                "broadcast": [[m.src, m.dst, m.nbytes, m.level] for m in s.broadcast],
            }
            for s in plan.schedule.syncs
        ],
    }


def plan_from_dict(data: dict) -> PartitionPlan:
    if data.get("format") != PLAN_FORMAT:
        raise ConfigError(f"unsupported plan format {data.get('format')!r}")
    shards = tuple(
        ShardSpec(d["chip"], d["tensor"], AxisRange(*d["rows"]), AxisRange(*d["cols"])) for d in data["shards"]
    )
    t = data["tree"]
    tree = ReduceTree(
        fan_in=t["fan_in"],
        levels=tuple(tuple(ReduceGroup(g["receiver"], tuple(g["senders"])) for g in lvl) for lvl in t["levels"]),
        root=t["root"],
    )
    syncs = tuple(
        SyncPoint(
            s["name"],
            tuple(Message(a, b, n, f"{s['name']}.reduce", l) for a, b, n, l in s["reduce"]),
            s["norm_chip"],
            tuple(Message(a, b, n, f"{s['name']}.broadcast", l) for a, b, n, l in s["broadcast"]),
        )
        for s in data["schedule"]
    )
    return PartitionPlan(data["n_chips"], shards, tree, CommSchedule(syncs), tuple(data["chip_weight_bytes"]))


def dumps_plan(plan: PartitionPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=1, sort_keys=True)


def loads_plan(text: str) -> PartitionPlan:
    return plan_from_dict(json.loads(text))
