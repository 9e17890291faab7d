"""Event-driven timing model of N chips executing one Transformer block.

Each chip runs its kernels in dataflow order on its compute cluster. Weight
shards are either kept on chip (L2) or streamed from off-chip memory (L3)
through a single per-chip L3 port; streamed loads block the kernel that
needs them, while prefetches of the next block's weights fill idle port
time. Partial outputs travel over point-to-point chip-to-chip links along
the reduce tree and come back along the same tree.

All timing is deterministic: the same inputs give the same event list.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .errors import InconsistentPlan
from .model import AUTOREGRESSIVE, ModelConfig, activation_bytes
from .partition import TENSORS, PartitionPlan, plan_partition, tensor_shape

CATEGORIES = ("compute", "c2c", "l2", "l3")


@dataclass(frozen=True)
class ChipSpec:
    cores: int = 8
    clock_hz: float = 5e8
    macs_per_core_per_cycle: float = 2.0
    l1_bytes: int = 262_144
    l2_bytes: int = 2_097_152
    l1_bandwidth_bits: int = 256
    l3_bandwidth: float = 0.25e9  # bytes/s through the chip's single L3 port

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"ChipSpec.{name} must be positive")
        if self.l1_bytes >= self.l2_bytes:
            raise ValueError("l1_bytes must be smaller than l2_bytes")

    @property
    def peak_macs_per_cycle(self) -> float:
        return self.cores * self.macs_per_core_per_cycle


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: float = 5e8  # bytes/s
    per_message_latency: float = 1e-6  # s
    energy_per_byte: float = 1e-10  # J/B

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"LinkSpec.{name} must be non-negative")
        if self.bandwidth == 0:
            raise ValueError("LinkSpec.bandwidth must be positive")

    def message_time(self, nbytes: int) -> float:
        return nbytes / self.bandwidth + self.per_message_latency


# vector kernels cost this many core-ops per element
VECTOR_OPS = {"softmax": 4.0, "gelu": 8.0, "norm": 6.0, "elementwise": 1.0}


@dataclass(frozen=True)
class EfficiencyModel:
    """Core utilization as a saturating function of kernel size.

    For matrix kernels ``util = u_max * rows/(rows + m_half) * cols/(cols + k_half)``
    where ``rows`` is the number of output rows (1 for a GEMV) and ``cols``
    the output width. Vector kernels use the cols term on their total
    element count.
    Every kernel additionally pays ``fixed_overhead`` cycles.
    """

    u_max: float = 0.8
    k_half: float = 16.0
    m_half: float = 36.0  # row half-saturation; GEMV rows pay the most
    fixed_overhead: int = 200

    def util(self, rows: int, cols: int) -> float:
        u = self.u_max * cols / (cols + self.k_half)
        if self.m_half:
            u *= rows / (rows + self.m_half)
        return u

    def util_vector(self, length: int) -> float:
        return self.u_max * length / (length + self.k_half)


@dataclass(frozen=True)
class KernelDesc:
    kind: str  # gemm | gemv | softmax | gelu | norm | elementwise
    M: int = 1
    N: int = 1
    K: int = 1
    batch: int = 1
    bytes_in: int = 0
    bytes_out: int = 0
    label: str = ""
    weight: str | None = None  # weight tensor this kernel reads, if any

    def __post_init__(self):
        if min(self.M, self.N, self.K, self.batch) < 1:
            raise ValueError(f"kernel {self.label!r} has non-positive dims")

    @property
    def is_matrix(self) -> bool:
        return self.kind in ("gemm", "gemv")

    @property
    def macs(self) -> int:
        return self.batch * self.M * self.N * self.K if self.is_matrix else 0

    @property
    def work(self) -> float:
        if self.is_matrix:
            return float(self.macs)
        return self.batch * self.M * self.N * VECTOR_OPS[self.kind]


def matmul_kernel(label, M, N, K, b, batch=1, weight=None) -> KernelDesc:
    kind = "gemv" if M == 1 else "gemm"
    return KernelDesc(kind, M, N, K, batch, batch * (M * K + K * N) * b, batch * M * N * b, label, weight)


def vector_kernel(kind, label, rows, length, b, inputs=1) -> KernelDesc:
    return KernelDesc(kind, rows, length, 1, 1, inputs * rows * length * b, rows * length * b, label)


def kernel_work_cycles(k: KernelDesc, chip: ChipSpec, eff: EfficiencyModel) -> float:
    """Cycles spent on useful work, before rounding and fixed overhead."""
    if k.is_matrix:
        util = eff.util(k.M, k.N)
    else:
        util = eff.util_vector(k.batch * k.M * k.N)
    return k.work / (chip.peak_macs_per_cycle * util)


def kernel_cycles(k: KernelDesc, chip: ChipSpec, eff: EfficiencyModel) -> int:
    return eff.fixed_overhead + math.ceil(kernel_work_cycles(k, chip, eff) - 1e-9)


# --------------------------------------------------------------------------
# per-chip program


def block_kernels(cfg: ModelConfig, n_chips: int, chip: int, root: int = 0) -> dict[str, list[KernelDesc]]:
    """Kernels chip ``chip`` runs in each of the two compute phases."""
    b, E, P = cfg.bytes_per_elem, cfg.embed_dim, cfg.head_dim
    q, kv = cfg.query_len, cfg.kv_len
    heads = cfg.num_heads // n_chips
    f_loc = cfg.intermediate_dim // n_chips
    mhsa = [
        matmul_kernel("q_proj", q, P * heads, E, b, weight="W_query"),
        matmul_kernel("k_proj", q, P * heads, E, b, weight="W_key"),
        matmul_kernel("v_proj", q, P * heads, E, b, weight="W_value"),
        matmul_kernel("scores", q, kv, P, b, batch=heads),
        vector_kernel("softmax", "softmax", q * heads, kv, b),
        matmul_kernel("context", q, P, kv, b, batch=heads),
        matmul_kernel("out_proj", q, E, P * heads, b, weight="W_O"),
    ]
    fc = [
        matmul_kernel("fc1", q, f_loc, E, b, weight="W_L1"),
        vector_kernel("gelu", "gelu", q, f_loc, b),
        matmul_kernel("fc2", q, E, f_loc, b, weight="W_L2"),
    ]
    if chip == root:
        mhsa.append(vector_kernel("elementwise", "skip_add", q, E, b, inputs=2))
        fc.append(vector_kernel("elementwise", "skip_add", q, E, b, inputs=2))
    return {"mhsa": mhsa, "fc": fc}


def scratch_bytes(cfg: ModelConfig, n_chips: int) -> int:
    """Intermediate tensors beyond the ones counted by activation_bytes."""
    b, q = cfg.bytes_per_elem, cfg.query_len
    heads = cfg.num_heads // n_chips
    scores = heads * q * cfg.kv_len * b
    context = q * cfg.head_dim * heads * b
    hidden = q * (cfg.intermediate_dim // n_chips) * b
    return scores + context + hidden


def working_set_bytes(cfg: ModelConfig, n_chips: int) -> int:
    return activation_bytes(cfg, n_chips).total + scratch_bytes(cfg, n_chips)


# --------------------------------------------------------------------------
# residency


@dataclass(frozen=True)
class ResidencyPlan:
    n_chips: int
    homes: dict  # tensor -> "L2" | "L3"
    prefetched: tuple[str, ...]  # shards whose next-block copy is prefetched into L2
    double_buffer: bool
    all_blocks_resident: bool
    shard_bytes: dict  # tensor -> bytes per chip
    activation_bytes: int
    spill_bytes: int
    l2_used: int

    @property
    def streamed(self) -> tuple[str, ...]:
        return tuple(t for t in TENSORS if self.homes[t] == "L3")

    @property
    def steady_state_l3_bytes(self) -> int:
        """L3 traffic per chip per block in steady state."""
        weights = sum(self.shard_bytes[t] for t in self.streamed + self.prefetched)
        return weights + 2 * self.spill_bytes


def plan_residency(cfg: ModelConfig, plan: PartitionPlan, chip: ChipSpec) -> ResidencyPlan:
    """Decide where each per-chip weight shard lives in steady state.

    Activations are placed first; any excess over L2 spills to L3. If every
    block's shards fit next to them, the whole model stays on chip. Otherwise
    shards are taken in execution order and each one gets an L2 slot plus a
    prefetch slot for the next block's copy while space lasts; the rest are
    streamed from L3 when needed.
    """
    n = plan.n_chips
    shard_bytes = {}
    for s in plan.shards_for(0).values():
        shard_bytes[s.tensor] = s.numel * cfg.bytes_per_elem
    block = sum(shard_bytes.values())
    act = working_set_bytes(cfg, n)
    spill = max(0, act - chip.l2_bytes)
    act_l2 = act - spill

    if spill == 0 and cfg.num_blocks * block + act <= chip.l2_bytes:
        homes = {t: "L2" for t in TENSORS}
        return ResidencyPlan(n, homes, (), False, True, shard_bytes, act, 0, cfg.num_blocks * block + act)

    budget = chip.l2_bytes - act_l2
    homes, prefetched = {}, []
    used = 0
    stop = False
    for t in TENSORS:
        need = 2 * shard_bytes[t]
        if not stop and used + need <= budget:
            homes[t] = "L2"
            prefetched.append(t)
            used += need
        else:
            stop = True
            homes[t] = "L3"
    double = len(prefetched) == len(TENSORS)
    return ResidencyPlan(n, homes, tuple(prefetched), double, False, shard_bytes, act, spill, act_l2 + used)


# --------------------------------------------------------------------------
# timeline


@dataclass(frozen=True)
class Event:
    start: float
    end: float
    chip: int
    resource: str
    category: str
    label: str
    nbytes: int = 0
    peer: int | None = None  # receiving chip of a c2c transfer
    macs: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    n_chips: int
    events: list[Event] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def by_category(self, category: str, chip: int | None = None) -> list[Event]:
        return [
            e
            for e in self.events
            if e.category == category and (chip is None or e.chip == chip or e.peer == chip)
        ]

    @property
    def c2c_messages(self) -> int:
        return len(self.by_category("c2c"))

    @property
    def c2c_bytes(self) -> int:
        return sum(e.nbytes for e in self.by_category("c2c"))

    def l3_bytes(self, chip: int) -> int:
        return sum(e.nbytes for e in self.events if e.category == "l3" and e.chip == chip)

    def l2_bytes(self, chip: int) -> int:
        return sum(e.nbytes for e in self.events if e.category == "l2" and e.chip == chip)

    def compute_time(self, chip: int) -> float:
        return sum(e.duration for e in self.events if e.category == "compute" and e.chip == chip)

    def total_macs(self) -> int:
        return sum(e.macs for e in self.events)

    def counters(self) -> dict:
        chips = range(self.n_chips)
        return {
            "c2c_messages": self.c2c_messages,
            "c2c_bytes": self.c2c_bytes,
            "l3_bytes": [self.l3_bytes(j) for j in chips],
            "l2_l1_bytes": [self.l2_bytes(j) for j in chips],
            "compute_time": [self.compute_time(j) for j in chips],
        }

    def critical_chip(self) -> int:
        ends = [0.0] * self.n_chips
        for e in self.events:
            for c in (e.chip, e.peer):
                if c is not None:
                    ends[c] = max(ends[c], e.end)
        return max(range(self.n_chips), key=lambda c: (ends[c], -c))

    def breakdown(self, chip: int | None = None) -> dict[str, float]:
        """Exclusive time per category on one chip, summing to the makespan.

        Overlapping activity is charged once, with priority compute > c2c >
        l3 > l2; time with no activity is reported as ``idle``.
        """
        chip = self.critical_chip() if chip is None else chip
        span = self.makespan
        intervals = {c: [] for c in CATEGORIES}
        for e in self.events:
            if (e.chip == chip or e.peer == chip) and e.end > e.start:
                intervals[e.category].append((e.start, e.end))
        points = sorted({0.0, span} | {t for iv in intervals.values() for s, e in iv for t in (s, e)})
        out = dict.fromkeys(CATEGORIES + ("idle",), 0.0)
        order = ("compute", "c2c", "l3", "l2")
        for a, b in zip(points, points[1:]):
            mid = 0.5 * (a + b)
            for cat in order:
                if any(s <= mid < e for s, e in intervals[cat]):
                    out[cat] += b - a
                    break
            else:
                out["idle"] += b - a
        return out


class _Sim:
    def __init__(self, cfg, plan, residency, chip, link, eff):
        self.cfg, self.plan, self.res = cfg, plan, residency
        self.chip, self.link, self.eff = chip, link, eff
        self.events: list[Event] = []
        self.ready = [0.0] * plan.n_chips
        self.l3_free = [0.0] * plan.n_chips
        self.link_free: dict[tuple[int, int], float] = defaultdict(float)
        self.l1_bytes_per_s = chip.l1_bandwidth_bits / 8 * chip.clock_hz

    def l3_demand(self, c: int, nbytes: int, label: str) -> None:
        start = max(self.ready[c], self.l3_free[c])
        end = start + nbytes / self.chip.l3_bandwidth
        self.events.append(Event(start, end, c, "l3", "l3", label, nbytes))
        self.l3_free[c] = end
        self.ready[c] = end

    def run(self, c: int, k: KernelDesc) -> None:
        if k.weight and self.res.homes[k.weight] == "L3":
            self.l3_demand(c, self.res.shard_bytes[k.weight], f"load:{k.weight}")
        start = self.ready[c]
        end = start + kernel_cycles(k, self.chip, self.eff) / self.chip.clock_hz
        self.events.append(Event(start, end, c, "compute", "compute", k.label, macs=k.macs))
        # L1 refills are double-buffered behind compute: charged bytes, no time
        self.events.append(Event(start, end, c, "dma", "l2", k.label, k.bytes_in + k.bytes_out))
        self.ready[c] = end

    def send(self, src: int, dst: int, nbytes: int, label: str, not_before: float) -> float:
        start = max(not_before, self.ready[src], self.link_free[(src, dst)])
        end = start + self.link.message_time(nbytes)
        self.events.append(Event(start, end, src, f"link{src}-{dst}", "c2c", label, nbytes, peer=dst))
        self.link_free[(src, dst)] = end
        return end

    def sync(self, name: str) -> None:
        sync = next(s for s in self.plan.schedule.syncs if s.name == name)
        q, E, b = self.cfg.query_len, self.cfg.embed_dim, self.cfg.bytes_per_elem
        acc = vector_kernel("elementwise", f"{name}.accumulate", q, E, b, inputs=2)
        by_level = defaultdict(list)
        for m in sync.reduce:
            by_level[m.level].append(m)
        barrier = 0.0
        for lvl in sorted(by_level):
            arrivals = [(m, self.send(m.src, m.dst, m.nbytes, m.label, barrier)) for m in by_level[lvl]]
            for m, arrived in arrivals:
                self.ready[m.dst] = max(self.ready[m.dst], arrived)
                self.run(m.dst, acc)
            barrier = max(self.ready[m.dst] for m, _ in arrivals)
        self.run(sync.norm_chip, vector_kernel("norm", f"{name}.norm", q, E, b))
        by_level = defaultdict(list)
        for m in sync.broadcast:
            by_level[m.level].append(m)
        barrier = 0.0
        for lvl in sorted(by_level):
            arrivals = [(m, self.send(m.src, m.dst, m.nbytes, m.label, barrier)) for m in by_level[lvl]]
            for m, arrived in arrivals:
                self.ready[m.dst] = max(self.ready[m.dst], arrived)
            barrier = max(t for _, t in arrivals)

    def prefetch(self, c: int) -> None:
        """Stream next-block shards through idle gaps of the chip's L3 port."""
        pending = [(t, self.res.shard_bytes[t]) for t in self.res.prefetched]
        busy = sorted((e.start, e.end) for e in self.events if e.chip == c and e.category == "l3")
        gaps, cursor = [], 0.0
        for s, e in busy:
            if s > cursor:
                gaps.append((cursor, s))
            cursor = max(cursor, e)
        gaps.append((cursor, math.inf))
        bw = self.chip.l3_bandwidth
        gi = 0
        t = gaps[0][0]
        for tensor, nbytes in pending:
            left = nbytes
            while left > 0:
                g_start, g_end = gaps[gi]
                t = max(t, g_start)
                room = (g_end - t) * bw
                if room <= 0:
                    gi += 1
                    continue
                chunk = left if room >= left else int(room)
                if chunk <= 0:
                    gi += 1
                    continue
                end = t + chunk / bw
                self.events.append(Event(t, end, c, "l3", "l3", f"prefetch:{tensor}", chunk))
                left -= chunk
                t = end

    def simulate(self) -> Timeline:
        n = self.plan.n_chips
        root = self.plan.tree.root
        programs = [block_kernels(self.cfg, n, c, root) for c in range(n)]
        for c in range(n):
            mhsa = programs[c]["mhsa"]
            for i, k in enumerate(mhsa):
                if i == 3 and self.res.spill_bytes:
                    self.l3_demand(c, self.res.spill_bytes, "spill:write")
                    self.l3_demand(c, self.res.spill_bytes, "spill:read")
                self.run(c, k)
        self.sync("mhsa")
        for c in range(n):
            for k in programs[c]["fc"]:
                self.run(c, k)
        self.sync("fc")
        for c in range(n):
            self.prefetch(c)
        self.events.sort(key=lambda e: (e.start, e.chip, e.resource, e.end, e.label))
        return Timeline(n, self.events)


def simulate_block(
    cfg: ModelConfig,
    plan: PartitionPlan,
    residency: ResidencyPlan,
    chip: ChipSpec | None = None,
    link: LinkSpec | None = None,
    eff: EfficiencyModel | None = None,
) -> Timeline:
    if residency.n_chips != plan.n_chips:
        raise InconsistentPlan(f"residency for {residency.n_chips} chips, plan for {plan.n_chips}")
    if set(residency.homes) != set(TENSORS):
        raise InconsistentPlan("residency does not place every weight tensor")
    for s in plan.shards_for(0).values():
        if s.numel * cfg.bytes_per_elem != residency.shard_bytes[s.tensor]:
            raise InconsistentPlan(f"residency shard size of {s.tensor} disagrees with the plan")
    return _Sim(cfg, plan, residency, chip or ChipSpec(), link or LinkSpec(), eff or EfficiencyModel()).simulate()


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepPoint:
    n_chips: int
    makespan: float
    speedup: float
    breakdown: dict
    timeline: Timeline
    residency: ResidencyPlan
    plan: PartitionPlan


def simulate_config(cfg, n_chips, chip=None, link=None, eff=None, fan_in=4):
    chip = chip or ChipSpec()
    plan = plan_partition(cfg, n_chips, fan_in)
    res = plan_residency(cfg, plan, chip)
    return plan, res, simulate_block(cfg, plan, res, chip, link, eff)


def sweep(cfg, n_chips_list, chip=None, link=None, eff=None, fan_in=4) -> list[SweepPoint]:
    """Simulate each chip count; speedups are relative to a single chip."""
    _, _, base = simulate_config(cfg, 1, chip, link, eff, fan_in)
    t1 = base.makespan
    points = []
    for n in n_chips_list:
        plan, res, tl = simulate_config(cfg, n, chip, link, eff, fan_in)
        points.append(SweepPoint(n, tl.makespan, t1 / tl.makespan, tl.breakdown(), tl, res, plan))
    return points
