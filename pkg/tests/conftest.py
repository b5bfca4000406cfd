from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from anoca.network import (BatteryParams, Bus, BusKind, LineBranch, LoadSpec, NetworkModel,
                           ProsumerSpec, load_network, parse_phases, transformer_from_pct)

DATA = Path(__file__).resolve().parents[1] / "src" / "anoca" / "data"
ABC = parse_phases("abc")
KV_LO = 4.16 / math.sqrt(3)
KV_HI = 12.47 / math.sqrt(3)
Z_MILE = np.array([[0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.1535 + 0.3849j],
                   [0.1560 + 0.5017j, 0.4666 + 1.0482j, 0.1580 + 0.4236j],
                   [0.1535 + 0.3849j, 0.1580 + 0.4236j, 0.4615 + 1.0651j]])


def fixture_network(name: str) -> NetworkModel:
    return load_network(DATA / f"{name}.net")


@pytest.fixture(scope="session")
def toy2():
    return fixture_network("toy2")


@pytest.fixture(scope="session")
def ieee4():
    return fixture_network("ieee4")


@pytest.fixture(scope="session")
def ieee4_anoca():
    return fixture_network("ieee4_anoca")


@pytest.fixture(scope="session")
def mesh60():
    return fixture_network("mesh60")


def random_feeder(seed: int, n_buses: int = 6, ties: int = 0, transformer: bool = False,
                  load_kw=(20.0, 120.0), prosumers: int = 0, partial_phases: bool = False,
                  miles=(0.05, 0.3)) -> NetworkModel:
    """Small random three-phase feeder (at most ``n_buses`` buses) for property tests.

    With ``partial_phases`` some leaf buses carry a single phase.
    """
    rng = np.random.default_rng(seed)
    buses = [Bus("s", ABC, BusKind.SLACK, KV_HI if transformer else KV_LO)]
    lines, trs = [], []
    first = "s"
    if transformer:
        buses.append(Bus("t", ABC, BusKind.JUNCTION, KV_LO))
        trs.append(transformer_from_pct("s", "t", ABC, KV_LO, 5000.0, 1.0, 6.0, tap_min=0.95,
                                        tap_max=1.05, tap_fixed=float(rng.uniform(0.97, 1.03))))
        first = "t"
    ids = [first]
    phases = {first: ABC}
    pros_left = prosumers
    loads, pros = [], []
    for i in range(len(buses), n_buses):
        bid = f"b{i}"
        parent = ids[int(rng.integers(0, len(ids)))]
        ph = ABC
        if partial_phases and i == n_buses - 1 and len(phases[parent]) == 3:
            ph = (ABC[int(rng.integers(0, 3))],)
        kind = BusKind.PROSUMER if pros_left > 0 else BusKind.LOAD
        buses.append(Bus(bid, ph, kind, KV_LO))
        idx = [p.order for p in ph]
        z = Z_MILE[np.ix_(idx, idx)] * rng.uniform(*miles)
        lines.append(LineBranch.from_impedance(parent, bid, ph, z, 600.0))
        p = tuple(float(x) for x in rng.uniform(*load_kw, len(ph)))
        q = tuple(float(x * rng.uniform(0.1, 0.5)) for x in p)
        loads.append(LoadSpec(bid, ph, p, q))
        if pros_left > 0:
            pros.append(ProsumerSpec(bid, ph[0], 2 * p[0], BatteryParams(40.0, 10.0, 0.95, 0.95, 20.0),
                                     1.0, "ABC"[pros_left % 3]))
            pros_left -= 1
        ids.append(bid)
        phases[bid] = ph
    three = [b for b in ids if len(phases[b]) == 3]
    added = 0
    while added < ties and len(three) >= 3:
        a, b = rng.choice(three, 2, replace=False)
        if any({ln.from_bus, ln.to_bus} == {a, b} for ln in lines):
            continue
        lines.append(LineBranch.from_impedance(a, b, ABC, Z_MILE * rng.uniform(0.2, 0.5), 600.0))
        added += 1
    return NetworkModel(tuple(buses), tuple(lines), tuple(trs), tuple(loads), tuple(pros), 1.0,
                        f"random{seed}")


def two_bus_closed_form(v1: float, z: complex, s: complex) -> float:
    """|V2| for a source |V1| feeding load ``s`` through ``z`` (per-unit):
    the larger root of x^2 + (2 Re(z conj(s)) - v1^2) x + |z|^2 |s|^2 = 0 in x = |V2|^2.  Vectorizes over ``s``."""
    b = 2 * (z * s.conjugate()).real - v1 ** 2
    c = abs(z) ** 2 * abs(s) ** 2
    return np.sqrt((-b + np.sqrt(b * b - 4 * c)) / 2)
