import csv
import io
import json

import pytest

from tpmcu.energy import EnergyConstants, EnergyReport, edp, energy_total
from tpmcu.model import preset
from tpmcu.perf import Event, Timeline, simulate_config


def _rel(a, b):
    return abs(a - b) / abs(b)


def test_empty_timeline():
    assert energy_total(Timeline(1, [])).total_energy == 0.0


def test_one_ms_compute():
    t = Timeline(1, [Event(0.0, 1e-3, 0, "compute", "compute", "k")])
    assert _rel(energy_total(t).total_energy, 104e-6) <= 1e-12


def test_c2c_component():
    t = Timeline(2, [Event(0.0, 1e-3, 1, "link1-0", "c2c", "m", 28_672, peer=0)])
    rep = energy_total(t)
    assert _rel(rep.components["c2c"], 2.8672e-6) <= 1e-12
    assert rep.total_energy == rep.components["c2c"]


def test_hand_substitution_two_chips():
    ev = [
        Event(0.0, 2e-3, 0, "compute", "compute", "a"),
        Event(0.0, 5e-4, 1, "compute", "compute", "b"),
        Event(0.0, 1e-3, 1, "l3", "l3", "load", 1_000_000),
        Event(0.0, 2e-3, 0, "dma", "l2", "a", 3_000),
        Event(2e-3, 3e-3, 1, "link1-0", "c2c", "m", 1024, peer=0),
    ]
    k = EnergyConstants()
    hand = 1024 * 1e-10 + (0.104 * 2e-3 + 3_000 * 2e-12) + (0.104 * 5e-4 + 1_000_000 * 1e-10)
    rep = energy_total(Timeline(2, ev), k)
    assert _rel(rep.total_energy, hand) <= 1e-12
    assert rep.makespan == 3e-3


def test_idle_time_costs_nothing():
    busy = Timeline(1, [Event(0.0, 1e-3, 0, "compute", "compute", "k")])
    stalled = Timeline(1, busy.events + [Event(1e-3, 9e-3, 0, "link0-1", "c2c", "wait", 0, peer=1)])
    assert energy_total(stalled).total_energy == energy_total(busy).total_energy


def test_edp_examples():
    assert edp(0.0, 1.0) == 0.0
    assert edp(0.64e-3, 0.54e-3) == 0.64e-3 * 0.54e-3
    assert _rel(edp(0.64e-3, 0.54e-3), 3.456e-7) <= 1e-12
    assert edp(2.0, 6.0) == 4 * edp(1.0, 3.0)
    with pytest.raises(ValueError):
        edp(-1.0, 1.0)


def test_linearity_in_bytes():
    ev = [Event(0.0, 1e-3, 0, "l3", "l3", "x", 500), Event(0.0, 1e-3, 0, "dma", "l2", "x", 700)]
    scaled = [Event(e.start, e.end, e.chip, e.resource, e.category, e.label, 3 * e.nbytes) for e in ev]
    a, b = energy_total(Timeline(1, ev)), energy_total(Timeline(1, scaled))
    for c in ("l3_l2", "l2_l1"):
        assert b.components[c] == pytest.approx(3 * a.components[c], rel=1e-15)


def test_simulated_report_consistent():
    _, _, tl = simulate_config(preset("tinyllama"), 8)
    rep = energy_total(tl)
    assert rep.total_energy == pytest.approx(sum(rep.components.values()), rel=1e-15)
    assert all(v >= 0 for v in rep.components.values())
    assert rep.edp == rep.total_energy * tl.makespan


def test_serialization():
    _, _, tl = simulate_config(preset("tinyllama"), 2)
    rep = energy_total(tl)
    doc = json.loads(rep.to_json())
    assert doc["format"] == "tpmcu.energy/1" and len(doc["per_chip_j"]) == 2
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["chip"] for r in rows] == ["0", "1", "total"]
    assert float(rows[-1]["total"]) == rep.total_energy
    assert EnergyReport().total_energy == 0.0


def test_negative_constants_rejected():
    with pytest.raises(ValueError):
        EnergyConstants(e_c2c=-1.0)
