"""Regenerate the network fixtures under src/anoca/data.

Every file is produced deterministically; rerunning the script must leave
the working tree unchanged.
"""
from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from anoca.network import (BatteryParams, Bus, BusKind, LineBranch, LoadSpec, NetworkModel,
                           ProsumerSpec, parse_phases, serialize_network, transformer_from_pct,
                           validate)

DATA = Path(__file__).resolve().parents[1] / "src" / "anoca" / "data"
ABC = parse_phases("abc")
# 336,400 26/7 ACSR phase conductors with 4/0 neutral, ohm per mile
Z_MILE = np.array([[0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.1535 + 0.3849j],
                   [0.1560 + 0.5017j, 0.4666 + 1.0482j, 0.1580 + 0.4236j],
                   [0.1535 + 0.3849j, 0.1580 + 0.4236j, 0.4615 + 1.0651j]])
KV_HI = 12.47 / math.sqrt(3)
KV_LO = 4.16 / math.sqrt(3)


def toy2() -> NetworkModel:
    """Slack plus one single-phase prosumer bus behind a short resistive line."""
    buses = (Bus("src", parse_phases("a"), BusKind.SLACK, KV_LO),
             Bus("house", parse_phases("a"), BusKind.PROSUMER, KV_LO))
    line = LineBranch.from_impedance("src", "house", parse_phases("a"), [[2.0 + 1.0j]], 400.0)
    load = LoadSpec("house", parse_phases("a"), (40.0,), (10.0,))
    pros = ProsumerSpec("house", parse_phases("a")[0], 200.0,
                        BatteryParams(100.0, 50.0, 0.95, 0.95, 50.0))
    return NetworkModel(buses, (line,), (), (load,), (pros,), 1.0, "toy2")


def _ieee4_loads(scale: float) -> LoadSpec:
    p = [1275.0 * scale, 1800.0 * scale, 2375.0 * scale]
    q = [pk * math.tan(math.acos(pf)) for pk, pf in zip(p, (0.85, 0.90, 0.95))]
    return LoadSpec("4", ABC, tuple(p), tuple(q))


def ieee4() -> NetworkModel:
    """Standard step-down unbalanced 4-node feeder, grounded wye on both sides."""
    buses = (Bus("1", ABC, BusKind.SLACK, KV_HI), Bus("2", ABC, BusKind.JUNCTION, KV_HI),
             Bus("3", ABC, BusKind.JUNCTION, KV_LO), Bus("4", ABC, BusKind.LOAD, KV_LO))
    l12 = LineBranch.from_impedance("1", "2", ABC, Z_MILE * 2000 / 5280, 600.0)
    l34 = LineBranch.from_impedance("3", "4", ABC, Z_MILE * 2500 / 5280, 600.0)
    tr = transformer_from_pct("2", "3", ABC, KV_LO, 6000.0, 1.0, 6.0, tap_min=0.9, tap_max=1.1,
                              tap_fixed=1.0)
    return NetworkModel(buses, (l12, l34), (tr,), (_ieee4_loads(1.0),), (), 6.0, "ieee4")


def ieee4_balanced() -> NetworkModel:
    """The 4-node feeder with its balanced load set of 1800 kW per phase at 0.9 power factor."""
    base = ieee4()
    q = 1800.0 * math.tan(math.acos(0.9))
    load = LoadSpec("4", ABC, (1800.0,) * 3, (q,) * 3)
    return NetworkModel(base.buses, base.lines, base.transformers, (load,), (), 6.0,
                        "ieee4_balanced")


def ieee4_anoca() -> NetworkModel:
    """The 4-node feeder at 30% load with a variable tap and three
    aggregated prosumers at the load bus, one per phase."""
    base = ieee4()
    buses = base.buses[:3] + (Bus("4", ABC, BusKind.PROSUMER, KV_LO),)
    l12 = LineBranch.from_impedance("1", "2", ABC, Z_MILE * 2000 / 5280, 1500.0)
    l34 = LineBranch.from_impedance("3", "4", ABC, Z_MILE * 2500 / 5280, 1500.0)
    tr = transformer_from_pct("2", "3", ABC, KV_LO, 12000.0, 1.0, 6.0, tap_min=0.91, tap_max=1.05)
    load = _ieee4_loads(0.3)
    bat = BatteryParams(1600.0, 400.0, 0.95, 0.95, 800.0)
    pros = tuple(ProsumerSpec("4", ph, 2.0 * p, bat, 1.0, cat)
                 for ph, p, cat in zip(ABC, load.p_kw, "ACB"))
    return NetworkModel(buses, (l12, l34), (tr,), (load,), pros, 6.0, "ieee4_anoca")


def mesh(n_buses: int = 60, n_prosumers: int = 24, seed: int = 11, load_kw=(5.0, 15.0),
         pros_kw=(60.0, 120.0), span_miles=(0.03, 0.08)) -> NetworkModel:
    """Synthetic meshed 4.16 kV feeder: a random tree closed by a few ties,
    fed through a regulating transformer from a 12.47 kV source."""
    rng = np.random.default_rng(seed)
    buses = [Bus("src", ABC, BusKind.SLACK, KV_HI)]
    ids = [f"n{i:02d}" for i in range(n_buses - 1)]
    lines = []
    parent = {}
    for i, bid in enumerate(ids[1:], start=1):
        # attach to one of the last few buses to get long laterals
        parent[bid] = ids[int(rng.integers(max(0, i - 4), i))]
    ties = []
    while len(ties) < 4:
        a, b = sorted(rng.choice(len(ids), 2, replace=False))
        pair = (ids[a], ids[b])
        if parent.get(pair[1]) != pair[0] and parent.get(pair[0]) != pair[1] and pair not in ties:
            ties.append(pair)
    for child, par in parent.items():
        miles = float(rng.uniform(*span_miles))
        lines.append(LineBranch.from_impedance(par, child, ABC, Z_MILE * miles, 900.0))
    for a, b in ties:
        miles = float(rng.uniform(0.3, 0.6))
        lines.append(LineBranch.from_impedance(a, b, ABC, Z_MILE * miles, 900.0))
    tr = transformer_from_pct("src", ids[0], ABC, KV_LO, 5000.0, 1.0, 6.0, tap_min=0.95, tap_max=1.05)
    pros_buses = sorted(rng.choice(np.arange(5, len(ids)), n_prosumers, replace=False))
    loads, pros = [], []
    cats = "ABC"
    for i, bid in enumerate(ids):
        if i == 0:
            buses.append(Bus(bid, ABC, BusKind.JUNCTION, KV_LO))
            continue
        is_pros = i in pros_buses
        buses.append(Bus(bid, ABC, BusKind.PROSUMER if is_pros else BusKind.LOAD, KV_LO))
        p = rng.uniform(*load_kw, 3)
        q = p * rng.uniform(0.2, 0.4, 3)
        if is_pros:
            k = int(np.searchsorted(pros_buses, i))
            ph = ABC[k % 3]
            p[ph.order] = rng.uniform(*pros_kw)
            q[ph.order] = 0.2 * p[ph.order]
            pv = float(2.0 * p[ph.order])
            bat = BatteryParams(4.0 * pv, pv, 0.95, 0.95, 2.0 * pv)
            pros.append(ProsumerSpec(bid, ph, pv, bat, 1.0, cats[k % 3]))
        loads.append(LoadSpec(bid, ABC, tuple(float(x) for x in p), tuple(float(x) for x in q)))
    return NetworkModel(tuple(buses), tuple(lines), (tr,), tuple(loads), tuple(pros), 1.0,
                        f"mesh{n_buses}")


FIXTURES = {"toy2.net": toy2, "ieee4.net": ieee4, "ieee4_balanced.net": ieee4_balanced,
            "ieee4_anoca.net": ieee4_anoca,
            "mesh60.net": mesh}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, build in FIXTURES.items():
        model = build()
        diags = validate(model)
        if diags:
            raise SystemExit(f"{name}: " + "; ".join(map(str, diags)))
        summary = " ".join(build.__doc__.split())
        header = f"# {summary}\n# generated by scripts/make_fixtures.py\n"
        (args.out / name).write_text(header + serialize_network(model), encoding="utf-8")
        print(f"wrote {args.out / name}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
