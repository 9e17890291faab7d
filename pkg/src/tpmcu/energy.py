"""Analytical energy model over simulated timelines.

Total energy is the chip-to-chip traffic plus, per chip, cluster power times
busy compute time and the L3<->L2 and L2<->L1 traffic::

    E = N_c2c * e_c2c + sum_j (P_chip * T_comp_j + N_l3_j * e_l3_l2 + N_l2_j * e_l2_l1)

with ``P_chip = cores_per_chip * core_power``. Idle time costs nothing.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .perf import Timeline

COMPONENTS = ("c2c", "compute", "l3_l2", "l2_l1")
REPORT_FORMAT = "tpmcu.energy/1"


@dataclass(frozen=True)
class EnergyConstants:
    e_c2c: float = 100e-12  # J/B over the chip-to-chip link
    e_l3_l2: float = 100e-12  # J/B off-chip memory access
    e_l2_l1: float = 2e-12  # J/B on-chip L2 access
    core_power: float = 13e-3  # W per core
    cores_per_chip: int = 8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"EnergyConstants.{name} must be non-negative")

    @property
    def chip_power(self) -> float:
        return self.core_power * self.cores_per_chip


@dataclass
class EnergyReport:
    per_chip: list[dict] = field(default_factory=list)  # compute / l3_l2 / l2_l1 joules per chip
    c2c: float = 0.0
    makespan: float = 0.0

    def component(self, name: str) -> float:
        if name == "c2c":
            return self.c2c
        return sum(chip[name] for chip in self.per_chip)

    @property
    def components(self) -> dict[str, float]:
        return {name: self.component(name) for name in COMPONENTS}

    @property
    def total_energy(self) -> float:
        return sum(self.components.values())

    @property
    def edp(self) -> float:
        return edp(self, self.makespan)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "makespan_s": self.makespan,
            "total_energy_j": self.total_energy,
            "edp_js": self.edp,
            "components_j": self.components,
            "per_chip_j": self.per_chip,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        """One row per chip, then a ``total`` row; chip-to-chip energy is only on the total row."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["chip", *COMPONENTS, "total"])
        for j, chip in enumerate(self.per_chip):
            row = [0.0, chip["compute"], chip["l3_l2"], chip["l2_l1"]]
            writer.writerow([j, *(repr(v) for v in row), repr(sum(row))])
        comps = self.components
        writer.writerow(["total", *(repr(comps[c]) for c in COMPONENTS), repr(self.total_energy)])
        return buf.getvalue()


def energy_total(t: Timeline, k: EnergyConstants | None = None) -> EnergyReport:
    k = k or EnergyConstants()
    per_chip = []
    for j in range(t.n_chips):
        per_chip.append(
            {
                "compute": k.chip_power * t.compute_time(j),
                "l3_l2": t.l3_bytes(j) * k.e_l3_l2,
                "l2_l1": t.l2_bytes(j) * k.e_l2_l1,
            }
        )
    return EnergyReport(per_chip=per_chip, c2c=t.c2c_bytes * k.e_c2c, makespan=t.makespan)


def edp(report: EnergyReport | float, makespan: float) -> float:
    """Energy-delay product in J*s."""
    energy = report.total_energy if isinstance(report, EnergyReport) else float(report)
    if energy < 0 or makespan < 0:
        raise ValueError("energy and makespan must be non-negative")
    return energy * makespan
