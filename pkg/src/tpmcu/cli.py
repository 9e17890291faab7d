"""Command-line harness: ``tpmcu run``, ``tpmcu verify`` and ``tpmcu report``.

``run`` sweeps chip counts for one workload and writes one row per count
(CSV or JSON). ``verify`` checks partitioned execution against the
single-device reference and validates each plan. ``report`` merges run CSVs
into labeled series and renders figures next to the merged table.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .energy import EnergyConstants, energy_total
from .errors import ConfigError, TpmcuError
from .execution import materialize_chips, new_cache, run_block_monolithic, run_block_partitioned, split_cache
from .model import AUTOREGRESSIVE, CONFIG_KEYS, PRESET_NAMES, BlockWeights, ModelConfig, check, load_config, preset
from .partition import AxisRange, check_divisible, plan_partition, verify_plan
from .perf import ChipSpec, EfficiencyModel, LinkSpec, simulate_config

CONFIG_DIR_ENV = "TPMCU_CONFIG_DIR"
RUN_SCHEMA = "tpmcu.run/1"
DEFAULT_SEED = 1234
VERIFY_RTOL = 1e-5

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2, 3

COLUMNS = (
    "series", "preset", "mode", "n_chips", "status", "makespan_s", "speedup",
    "t_compute", "t_c2c", "t_l3", "t_l2", "t_idle",
    "e_compute", "e_c2c", "e_l3_l2", "e_l2_l1", "e_total", "edp",
    "c2c_bytes", "l3_bytes", "l2_l1_bytes", "all_blocks_resident", "streamed", "error",
)  # fmt: skip

CALIBRATION = {"chip": ChipSpec, "link": LinkSpec, "eff": EfficiencyModel, "energy": EnergyConstants}


# --------------------------------------------------------------------------
# run specification


@dataclass
class RunSpec:
    cfg: ModelConfig
    n_chips: list
    fmt: str = "csv"
    seed: int = DEFAULT_SEED
    fan_in: int = 4
    chip: ChipSpec = field(default_factory=ChipSpec)
    link: LinkSpec = field(default_factory=LinkSpec)
    eff: EfficiencyModel = field(default_factory=EfficiencyModel)
    energy: EnergyConstants = field(default_factory=EnergyConstants)

    def constants(self) -> dict:
        """Every value that influences the output, echoed into the header."""
        return {
            "model": asdict(self.cfg),
            "chip": asdict(self.chip),
            "link": asdict(self.link),
            "eff": asdict(self.eff),
            "energy": asdict(self.energy),
            "fan_in": self.fan_in,
            "seed": self.seed,
        }


def parse_chips(text: str) -> list:
    """``1,2,4`` or ``1..64`` (powers of two between the bounds), or a mix."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(v) for v in part.split("..", 1))
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad chip range {part!r}")
            n = 1
            while n <= hi:
                if n >= lo:
                    out.append(n)
                n *= 2
        else:
            n = int(part)
            if n < 1:
                raise ConfigError(f"chip count must be >= 1, got {n}")
            out.append(n)
    if not out:
        raise ConfigError(f"no chip counts in {text!r}")
    return list(dict.fromkeys(out))


def _config_dir() -> Path | None:
    value = os.environ.get(CONFIG_DIR_ENV)
    return Path(value) if value else None


def _find_config(path: str) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    d = _config_dir()
    if d is not None and (d / p).exists():
        return d / p
    return p


def resolve_config(preset_name: str | None, config: str | None, section: str | None, mode: str | None) -> ModelConfig:
    """Pick the workload from a config file, the config dir, or the built-in presets."""
    if config:
        configs = load_config(_find_config(config))
        name = section or preset_name
        if name is None:
            if len(configs) != 1:
                raise ConfigError(f"{config} defines {sorted(configs)}; pick one with --section")
            name = next(iter(configs))
        if name not in configs:
            raise ConfigError(f"{config} has no section [{name}]")
        cfg = configs[name]
        return check(cfg.replace(mode=mode) if mode and mode != cfg.mode else cfg)
    if preset_name is None:
        raise ConfigError("give --preset or --config")
    d = _config_dir()
    if preset_name not in PRESET_NAMES and d is not None and d.is_dir():
        for ini in sorted(d.glob("*.ini")):
            configs = load_config(ini)
            if preset_name in configs:
                cfg = configs[preset_name]
                return check(cfg.replace(mode=mode) if mode and mode != cfg.mode else cfg)
    return check(preset(preset_name, mode=mode))


def apply_overrides(spec: RunSpec, items: list[str]) -> RunSpec:
    """Apply ``group.key=value`` settings, e.g. ``chip.l3_bandwidth=5e8`` or ``model.S=32``."""
    model_values = {}
    groups = {name: {} for name in CALIBRATION}
    for item in items:
        key, sep, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key in CONFIG_KEYS:
            model_values[key] = raw
            continue
        group, _, name = key.partition(".")
        if group not in CALIBRATION:
            raise ConfigError(f"unknown setting {key!r}")
        fields = {f.name: f for f in dataclasses.fields(CALIBRATION[group])}
        if name not in fields:
            raise ConfigError(f"unknown setting {key!r}; {group} has {', '.join(fields)}")
        kind = int if fields[name].type in ("int", int) else float
        try:
            groups[group][name] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    cfg = spec.cfg
    if model_values:
        changes = {}
        for key, raw in model_values.items():
            attr, conv = CONFIG_KEYS[key]
            try:
                changes[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        cfg = check(cfg.replace(**changes))
    try:
        return dataclasses.replace(
            spec,
            cfg=cfg,
            **{g: dataclasses.replace(getattr(spec, g), **v) for g, v in groups.items() if v},
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# run


def describe(exc: Exception) -> str:
    name, msg = type(exc).__name__, str(exc)
    return msg if msg.startswith(name) else f"{name}: {msg}"


def _series_label(cfg: ModelConfig) -> str:
    return f"{cfg.name}/{cfg.mode}"


def run_rows(spec: RunSpec) -> list[dict]:
    """One row per requested chip count; bad counts become error rows."""
    cfg = spec.cfg
    base = None
    rows = []
    for n in spec.n_chips:
        row = dict.fromkeys(COLUMNS, "")
        row.update(series=_series_label(cfg), preset=cfg.name, mode=cfg.mode, n_chips=n)
        try:
            if base is None:
                base = simulate_config(cfg, 1, spec.chip, spec.link, spec.eff, spec.fan_in)[2].makespan
            _, res, tl = simulate_config(cfg, n, spec.chip, spec.link, spec.eff, spec.fan_in)
        except TpmcuError as exc:
            row.update(status="error", error=describe(exc))
            rows.append(row)
            continue
        rep = energy_total(tl, spec.energy)
        brk = tl.breakdown()
        comps = rep.components
        row.update(
            status="ok",
            makespan_s=tl.makespan,
            speedup=base / tl.makespan,
            **{f"t_{k}": brk[k] for k in ("compute", "c2c", "l3", "l2", "idle")},
            **{f"e_{k}": comps[k] for k in ("compute", "c2c", "l3_l2", "l2_l1")},
            e_total=rep.total_energy,
            edp=rep.edp,
            c2c_bytes=tl.c2c_bytes,
            l3_bytes=sum(tl.l3_bytes(j) for j in range(n)),
            l2_l1_bytes=sum(tl.l2_bytes(j) for j in range(n)),
            all_blocks_resident=res.all_blocks_resident,
            streamed=" ".join(res.streamed),
        )
        rows.append(row)
    return rows


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_csv(rows: list[dict], constants: dict | None) -> str:
    buf = io.StringIO()
    if constants is not None:
        buf.write(f"# schema={RUN_SCHEMA}\n")
        buf.write(f"# constants={json.dumps(constants, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_cell(r[c]) for c in COLUMNS])
    return buf.getvalue()


def format_json(rows: list[dict], constants: dict) -> str:
    clean = [{k: (None if v == "" else v) for k, v in r.items()} for r in rows]
    doc = {"schema": RUN_SCHEMA, "version": __version__, "constants": constants, "rows": clean}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = resolve_config(args.preset, args.config, args.section, args.mode)
    spec = RunSpec(cfg, parse_chips(args.chips), args.format, args.seed, args.fan_in)
    spec = apply_overrides(spec, args.set or [])
    rows = run_rows(spec)
    if spec.fmt == "json":
        text = format_json(rows, spec.constants())
    else:
        text = format_csv(rows, spec.constants())
    _emit(text, args.out)
    bad = [r for r in rows if r["status"] != "ok"]
    for r in bad:
        print(f"error: n_chips={r['n_chips']}: {r['error']}", file=sys.stderr)
    if len(bad) == len(rows):
        return EXIT_FAIL
    return EXIT_PARTIAL if bad else EXIT_OK


# --------------------------------------------------------------------------
# verify


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


def inject_duplicate(plan):
    """Make chip 1's W_query shard reuse chip 0's columns (a deliberately broken plan)."""
    shards = list(plan.shards)
    first = next(s for s in shards if s.chip == 0 and s.tensor == "W_query")
    for i, s in enumerate(shards):
        if s.chip == 1 and s.tensor == "W_query":
            cols = AxisRange(first.cols.start, first.cols.end, first.cols.axis)
            shards[i] = dataclasses.replace(s, cols=cols)
    return plan.replace(shards=tuple(shards))


def verify_one(cfg: ModelConfig, n: int, seed: int, fault: str | None = None, steps: int = 4) -> tuple[bool, float, str]:
    """Returns (passed, max relative error, message) for one chip count."""
    check_divisible(cfg, n)
    plan = plan_partition(cfg, n)
    if fault == "duplicate":
        if n < 2:
            return False, float("nan"), "fault injection needs at least 2 chips"
        plan = inject_duplicate(plan)
    result = verify_plan(plan, cfg)
    if not result.ok:
        return False, float("nan"), "; ".join(result.violations)

    rng = np.random.default_rng([seed, n])
    w = BlockWeights.random(cfg, rng)
    if cfg.mode == AUTOREGRESSIVE:
        cap = max(cfg.kv_cache_len, steps)
        ref_cache = new_cache(cfg, capacity=cap)
        caches = split_cache(ref_cache, plan, cfg)
        chips = materialize_chips(plan, w, cfg, caches)
        err = 0.0
        for _ in range(min(steps, cap)):
            x = rng.standard_normal((1, cfg.embed_dim))
            ref = run_block_monolithic(x, w, cfg, ref_cache)
            got = run_block_partitioned(x, plan, w, cfg, caches, chips=chips)
            err = max(err, _rel_err(got, ref))
    else:
        x = rng.standard_normal((cfg.seq_len, cfg.embed_dim))
        err = _rel_err(run_block_partitioned(x, plan, w, cfg), run_block_monolithic(x, w, cfg))
    ok = err <= VERIFY_RTOL
    return ok, err, "ok" if ok else f"max relative error {err:.3e} above {VERIFY_RTOL:g}"


def cmd_verify(args) -> int:
    cfg = resolve_config(args.preset, args.config, args.section, args.mode)
    spec = apply_overrides(RunSpec(cfg, parse_chips(args.chips), seed=args.seed), args.set or [])
    failed = False
    for n in spec.n_chips:
        try:
            ok, err, msg = verify_one(spec.cfg, n, spec.seed, args.inject_fault)
        except TpmcuError as exc:
            ok, err, msg = False, float("nan"), describe(exc)
        print(f"n_chips={n:<3d} {'PASS' if ok else 'FAIL'}  max_rel_err={err:.3e}  {msg}")
        failed |= not ok
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------
# report


def read_run_csv(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    missing = [c for c in ("series", "n_chips", "status") if rows and c not in rows[0]]
    if missing:
        raise ConfigError(f"{path}: not a run table (missing {', '.join(missing)})")
    return rows


def merge_runs(paths: list[str]) -> list[dict]:
    """Concatenate run tables. A series label seen in two files gets the file stem appended."""
    if not paths:
        raise ConfigError("report needs at least one run file")
    merged, owner = [], {}
    for path in paths:
        if not Path(path).is_file():
            raise ConfigError(f"missing run file {path}")
        for r in read_run_csv(path):
            label = r["series"]
            if owner.setdefault(label, path) != path:
                label = f"{label}@{Path(path).stem}"
            merged.append({**r, "series": label})
    return merged


def cmd_report(args) -> int:
    rows = merge_runs(args.paths)
    text = format_csv(rows, None)
    _emit(text, args.out)
    if args.out and not args.no_plots:
        from .plotting import render_all

        ok_rows = [r for r in rows if r["status"] == "ok"]
        if ok_rows:
            for p in render_all(ok_rows, args.out):
                print(f"wrote {p}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _add_workload_args(p: argparse.ArgumentParser, chips_default: str) -> None:
    p.add_argument("--preset", help=f"built-in preset ({', '.join(PRESET_NAMES)}) or a section in ${CONFIG_DIR_ENV}")
    p.add_argument("--config", help=f"INI config file (relative paths also tried under ${CONFIG_DIR_ENV})")
    p.add_argument("--section", help="section of --config to use")
    p.add_argument("--mode", choices=("prompt", "autoregressive"))
    p.add_argument("--chips", default=chips_default, help="e.g. 1,2,4,8 or 1..64")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a constant, e.g. chip.l3_bandwidth=5e8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpmcu", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a chip-count sweep")
    _add_workload_args(p, "1,2,4,8")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--fan-in", type=int, default=4)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check partitioned execution against the reference")
    _add_workload_args(p, "1,2,4,8")
    p.add_argument("--inject-fault", choices=("duplicate",), help="break the plan on purpose")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="merge run CSVs and render figures")
    p.add_argument("paths", nargs="*", help="run CSV files")
    p.add_argument("--out", help="merged CSV; figures are written next to it")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TpmcuError, ValueError, OSError) as exc:
        print(f"error: {describe(exc)}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
