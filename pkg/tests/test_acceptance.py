"""Acceptance suite: one test (and one printed PASS/FAIL line) per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
Criterion 5 is reported as its four parts, 5a to 5d.
"""

import sys
import time

import numpy as np
import pytest

from conftest import chip_counts, small_config
from tpmcu.cli import RunSpec, format_csv, format_json, main, run_rows
from tpmcu.energy import edp, energy_total
from tpmcu.execution import materialize_chips, new_cache, run_block_monolithic, run_block_partitioned, split_cache
from tpmcu.model import BlockWeights, ModelConfig, block_weight_bytes, preset
from tpmcu.partition import TENSORS, plan_partition, tensor_shape, verify_plan
from tpmcu.perf import ChipSpec, Event, Timeline, plan_residency, simulate_config, sweep

RTOL = 1e-5
SWEEP_BUDGET_S = 30.0


@pytest.fixture
def emit(capsys):
    def _emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {tag}: {'PASS' if ok else 'FAIL'} ({detail})")

    return _emit


def rel_err(got, ref):
    return float(np.max(np.abs(got - ref)) / (np.max(np.abs(ref)) + 1e-30))


# --------------------------------------------------------------------------
# 1. equivalence


def _equivalence_case(rng):
    cfg = small_config(rng)
    w = BlockWeights.random(cfg, rng)
    worst = 0.0
    if cfg.mode == "autoregressive":
        # cache already holds S-1 positions; the step adds the last one
        cache = new_cache(cfg)
        prior = cfg.S - 1
        if prior:
            cache.append(rng.standard_normal((cfg.H, prior, cfg.P)), rng.standard_normal((cfg.H, prior, cfg.P)))
        x = rng.standard_normal((1, cfg.E))
        ref_cache = cache.copy()
        ref = run_block_monolithic(x, w, cfg, ref_cache)
        for n in chip_counts(cfg):
            plan = plan_partition(cfg, n)
            worst = max(worst, rel_err(run_block_partitioned(x, plan, w, cfg, split_cache(cache, plan, cfg)), ref))
    else:
        x = rng.standard_normal((cfg.S, cfg.E))
        ref = run_block_monolithic(x, w, cfg)
        for n in chip_counts(cfg):
            worst = max(worst, rel_err(run_block_partitioned(x, plan_partition(cfg, n), w, cfg), ref))
    return cfg.mode, worst


def test_criterion_1_equivalence(emit):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    results = [_equivalence_case(rng) for _ in range(200)]
    elapsed = time.perf_counter() - t0
    worst = max(e for _, e in results)
    modes = {m for m, _ in results}
    ok = worst <= RTOL and elapsed < 60 and modes == {"prompt", "autoregressive"}
    emit(1, ok, f"200 cases, max rel err {worst:.2e} <= {RTOL:g}, {elapsed:.1f}s < 60s")
    assert ok


# --------------------------------------------------------------------------
# 2. no duplication


def _random_valid(rng):
    H = int(rng.choice([1, 2, 4, 8, 16, 32, 64]))
    P = int(rng.integers(1, 65))
    F = H * int(rng.integers(1, 33))
    cfg = ModelConfig(
        seq_len=int(rng.integers(1, 17)),
        embed_dim=P * H,
        head_dim=P,
        num_heads=H,
        intermediate_dim=F,
        bytes_per_elem=int(rng.choice([1, 2, 4])),
    )
    return cfg, int(rng.choice(chip_counts(cfg)))


def _tiles_exactly(cfg, plan, tensor):
    """Shards of one tensor form a partition of its index rectangle (interval reasoning)."""
    rows, cols = tensor_shape(cfg, tensor)
    parts = sorted(
        ((s.rows.start, s.rows.end, s.cols.start, s.cols.end) for s in plan.shards if s.tensor == tensor)
    )
    full_rows = all((r0, r1) == (0, rows) for r0, r1, _, _ in parts)
    full_cols = all((c0, c1) == (0, cols) for _, _, c0, c1 in parts)
    if full_rows:
        cuts = sorted((c0, c1) for _, _, c0, c1 in parts)
        bound = cols
    elif full_cols:
        cuts = sorted((r0, r1) for r0, r1, _, _ in parts)
        bound = rows
    else:
        return False
    edge = 0
    for a, b in cuts:
        if a != edge or b <= a:
            return False
        edge = b
    return edge == bound


def test_criterion_2_no_duplication(emit):
    rng = np.random.default_rng(202)
    bad = []
    for i in range(500):
        cfg, n = _random_valid(rng)
        plan = plan_partition(cfg, n)
        if not verify_plan(plan, cfg).ok:
            bad.append((i, "verify_plan"))
        if not all(_tiles_exactly(cfg, plan, t) for t in TENSORS):
            bad.append((i, "tiling"))
        shard_bytes = sum(s.numel for s in plan.shards) * cfg.b
        if shard_bytes + 2 * cfg.E * cfg.b != block_weight_bytes(cfg):
            bad.append((i, "bytes"))

    # exhaustive index check at small dims, including the norm vectors held by the root
    exhaustive = 0
    for H in (1, 2, 4, 8):
        for P in (1, 2, 3):
            for F in (H, 2 * H, 3 * H):
                cfg = ModelConfig(seq_len=1, embed_dim=P * H, head_dim=P, num_heads=H, intermediate_dim=F)
                w = BlockWeights.zeros(cfg)
                for n in chip_counts(cfg):
                    plan = plan_partition(cfg, n)
                    for t in TENSORS:
                        hits = np.zeros(tensor_shape(cfg, t), dtype=int)
                        for s in plan.shards:
                            if s.tensor == t:
                                hits[s.index()] += 1
                        if not (hits == 1).all():
                            bad.append((cfg, n, t))
                    held = sum(c.weight_elements() for c in materialize_chips(plan, w, cfg)) * cfg.b
                    if held != block_weight_bytes(cfg):
                        bad.append((cfg, n, "held bytes"))
                    exhaustive += 1
    ok = not bad
    emit(2, ok, f"500 random plans + {exhaustive} exhaustive index checks, {len(bad)} violations")
    assert ok, bad[:5]


# --------------------------------------------------------------------------
# 3. communication accounting


def test_criterion_3_comm_accounting(emit):
    rows = []
    ok = True
    for mode in ("autoregressive", "prompt"):
        # 64 one-wide heads so every n up to 64 divides H
        cfg = ModelConfig(
            seq_len=3, embed_dim=64, head_dim=1, num_heads=64, intermediate_dim=64,
            mode=mode, kv_cache_len=3 if mode == "autoregressive" else 0,
        )  # fmt: skip
        rng = np.random.default_rng(303)
        w = BlockWeights.random(cfg, rng)
        x = rng.standard_normal((cfg.query_len, cfg.E))
        for n in (2, 4, 8, 16, 32, 64):
            closed = 4 * (n - 1) * cfg.query_len * cfg.E * cfg.b
            plan = plan_partition(cfg, n)
            log = []
            caches = [new_cache(cfg, plan.heads_for(c, cfg.P)) for c in range(n)] if mode == "autoregressive" else None
            run_block_partitioned(x, plan, w, cfg, caches, message_log=log)
            enumerated = sum(m[2] for m in log)
            _, _, tl = simulate_config(cfg, n)
            simulated = tl.c2c_bytes
            same_pairs = sorted((e.chip, e.peer) for e in tl.by_category("c2c")) == sorted((m[0], m[1]) for m in log)
            ok &= enumerated == simulated == closed and same_pairs and len(log) == 4 * (n - 1)
            rows.append(n)
    emit(3, ok, f"simulated == enumerated == 4(n-1)qEb for n in {sorted(set(rows))}, both modes")
    assert ok


# --------------------------------------------------------------------------
# 4. energy formula


def test_criterion_4_energy(emit):
    def rel(a, b):
        return abs(a - b) / abs(b)

    checks = []
    one_ms = Timeline(1, [Event(0.0, 1e-3, 0, "compute", "compute", "k")])
    checks.append(rel(energy_total(one_ms).total_energy, 8 * 13e-3 * 1e-3))
    c2c = Timeline(2, [Event(0.0, 1e-6, 1, "link1-0", "c2c", "m", 28_672, peer=0)])
    checks.append(rel(energy_total(c2c).components["c2c"], 28_672 * 100e-12))
    mixed = Timeline(
        2,
        [
            Event(0.0, 3e-3, 0, "compute", "compute", "a"),
            Event(0.0, 1e-3, 1, "compute", "compute", "b"),
            Event(0.0, 2e-3, 0, "l3", "l3", "load", 786_432),
            Event(0.0, 3e-3, 1, "dma", "l2", "b", 131_072),
            Event(3e-3, 4e-3, 1, "link1-0", "c2c", "m", 1024, peer=0),
        ],
    )
    hand = 1024 * 1e-10 + 0.104 * 3e-3 + 786_432 * 1e-10 + 0.104 * 1e-3 + 131_072 * 2e-12
    checks.append(rel(energy_total(mixed).total_energy, hand))
    worst = max(checks)
    product = edp(0.64e-3, 0.54e-3)
    ok = worst <= 1e-12 and product == 0.64e-3 * 0.54e-3 and abs(product - 3.456e-7) <= 1e-12 * 3.456e-7
    emit(4, ok, f"max rel err {worst:.1e} <= 1e-12; EDP 0.64 mJ x 0.54 ms = {product:.4e} J*s")
    assert ok


# --------------------------------------------------------------------------
# 5. trends under default constants


def _timed_sweep(cfg, ns):
    t0 = time.perf_counter()
    pts = sweep(cfg, ns)
    return pts, time.perf_counter() - t0


def test_criterion_5a_autoregressive_superlinear(emit):
    pts, dt = _timed_sweep(preset("tinyllama", "autoregressive"), [1, 2, 4, 8])
    one, eight = pts[0], pts[-1]
    l3_share = one.breakdown["l3"] / one.makespan
    ok = eight.speedup > 8 and l3_share > 0.5 and dt < SWEEP_BUDGET_S
    emit("5a", ok, f"TinyLlama AR speedup@8 = {eight.speedup:.2f} > 8, 1-chip l3 share {l3_share:.2f} > 0.5, {dt:.2f}s")
    assert ok


def test_criterion_5b_prompt_compute_bound(emit):
    pts, dt = _timed_sweep(preset("tinyllama", "prompt"), [1, 2, 4, 8])
    share = pts[0].breakdown["compute"] / pts[0].makespan
    ok = share > 0.5 and dt < SWEEP_BUDGET_S
    emit("5b", ok, f"TinyLlama prompt 1-chip compute share {share:.2f} > 0.5, {dt:.2f}s")
    assert ok


def test_criterion_5c_mobilebert_superlinear(emit):
    pts, dt = _timed_sweep(preset("mobilebert"), [1, 2, 4])
    s4 = pts[-1].speedup
    ok = s4 > 4 and dt < SWEEP_BUDGET_S
    emit("5c", ok, f"MobileBERT speedup@4 = {s4:.3f} (needs > 4), {dt:.2f}s")
    assert ok


def test_criterion_5d_scaled_model(emit):
    cfg = preset("tinyllama-scaled", "autoregressive")
    ns = [1, 2, 4, 8, 16, 32, 64]
    pts, dt = _timed_sweep(cfg, ns)
    s = [p.speedup for p in pts]
    monotone = all(b >= a for a, b in zip(s, s[1:]))
    superlinear = s[3] > 8 and s[4] > 16
    res32 = plan_residency(cfg, plan_partition(cfg, 32), ChipSpec())
    _, _, tl32 = simulate_config(cfg, 32)
    l3_32 = sum(tl32.l3_bytes(j) for j in range(32))
    resident = res32.all_blocks_resident and res32.steady_state_l3_bytes == 0 and l3_32 == 0
    ok = monotone and superlinear and resident and dt < SWEEP_BUDGET_S
    emit(
        "5d",
        ok,
        f"speedups {[round(v, 1) for v in s]} non-decreasing={monotone}, "
        f"super-linear at 8/16={superlinear}, 32-chip all resident with 0 L3 bytes={resident}, {dt:.2f}s",
    )
    assert ok


# --------------------------------------------------------------------------
# 6. kv-cache oracle


def test_criterion_6_kv_cache(emit):
    rng = np.random.default_rng(606)
    T = 8
    worst = 0.0
    for _ in range(20):
        base = small_config(rng, mode="prompt", causal=True).replace(seq_len=T)
        ar = base.replace(mode="autoregressive", kv_cache_len=T)
        w = BlockWeights.random(base, rng)
        x = rng.standard_normal((T, base.E))
        ref = run_block_monolithic(x, w, base)
        n = int(rng.choice(chip_counts(base)))
        plan = plan_partition(ar, n)
        mono_cache = new_cache(ar)
        caches = split_cache(new_cache(ar), plan, ar)
        chips = materialize_chips(plan, w, ar, caches)
        for t in range(T):
            step = x[t : t + 1]
            worst = max(worst, rel_err(run_block_monolithic(step, w, ar, mono_cache)[0], ref[t]))
            worst = max(worst, rel_err(run_block_partitioned(step, plan, w, ar, caches, chips=chips)[0], ref[t]))
    ok = worst <= RTOL
    emit(6, ok, f"20 configs x {T} steps vs causal prompt pass, max rel err {worst:.2e} <= {RTOL:g}")
    assert ok


# --------------------------------------------------------------------------
# 7. determinism


def test_criterion_7_determinism(emit, tmp_path):
    specs = [
        RunSpec(preset("tinyllama", "autoregressive"), [1, 2, 3, 4, 8]),
        RunSpec(preset("tinyllama", "prompt"), [1, 8]),
        RunSpec(preset("mobilebert"), [1, 2, 4]),
        RunSpec(preset("tinyllama-scaled"), [1, 16, 64]),
    ]
    same = True
    for spec in specs:
        a = [format_csv(run_rows(spec), spec.constants()), format_json(run_rows(spec), spec.constants())]
        b = [format_csv(run_rows(spec), spec.constants()), format_json(run_rows(spec), spec.constants())]
        same &= a == b
    files = []
    for i in range(2):
        for fmt in ("csv", "json"):
            out = tmp_path / f"{i}.{fmt}"
            main(["run", "--preset", "tinyllama", "--chips", "1..8", "--format", fmt, "--seed", "7", "--out", str(out)])
            files.append(out.read_bytes())
    same &= files[0] == files[2] and files[1] == files[3]
    emit(7, same, "repeated RunSpecs give byte-identical CSV and JSON")
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
