"""Three-phase unbalanced network model, file parsing and admittance assembly.

Quantities in the file are engineering units (kV line-to-neutral, kW, kvar,
siemens, amps).  Solvers work in per-unit on a per-phase power base of
``base_mva / 3`` and a per-bus voltage base of ``base_kv``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np
import scipy.sparse as sp


class Phase(str, Enum):
    A = "a"
    B = "b"
    C = "c"

    @property
    def order(self) -> int:
        return "abc".index(self.value)

    @property
    def angle(self) -> float:
        """Nominal phasor angle in radians (a: 0, b: -120, c: +120 degrees)."""
        return (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)[self.order]


PHASES = (Phase.A, Phase.B, Phase.C)


def parse_phases(text: str) -> tuple[Phase, ...]:
    text = text.strip().lower()
    if not text or any(ch not in "abc" for ch in text) or len(set(text)) != len(text):
        raise ValueError(f"invalid phase set {text!r}")
    return tuple(sorted((Phase(ch) for ch in text), key=lambda p: p.order))


def phase_str(phases: Iterable[Phase]) -> str:
    return "".join(p.value for p in sorted(phases, key=lambda p: p.order))


class BusKind(str, Enum):
    SLACK = "slack"
    LOAD = "load"
    PROSUMER = "prosumer"
    JUNCTION = "junction"


class NetworkError(Exception):
    """Base class for network input problems."""


class NetworkParseError(NetworkError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NetworkValidationError(NetworkError):
    def __init__(self, diagnostics: list["Diagnostic"]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Diagnostic:
    code: str
    entity: str
    message: str

    def __str__(self) -> str:
        return f"{self.entity}: {self.message}"


Matrix = tuple[tuple[float, ...], ...]


def _as_matrix(values) -> Matrix:
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    return tuple(tuple(float(v) for v in row) for row in arr)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[Phase, ...]
    kind: BusKind
    base_kv: float
    v_min_pu: float = 0.95
    v_max_pu: float = 1.05


@dataclass(frozen=True)
class LineBranch:
    from_bus: str
    to_bus: str
    phases: tuple[Phase, ...]
    g_block: Matrix
    b_block: Matrix
    i_max_amps: tuple[float, ...]

    @property
    def y_block(self) -> np.ndarray:
        """Series admittance matrix in siemens (complex, phase-ordered)."""
        return np.asarray(self.g_block) + 1j * np.asarray(self.b_block)

    @classmethod
    def from_impedance(cls, from_bus, to_bus, phases, z_ohm, i_max_amps) -> "LineBranch":
        y = np.linalg.inv(np.atleast_2d(np.asarray(z_ohm, dtype=complex)))
        y = 0.5 * (y + y.T)
        i_max = tuple(float(v) for v in np.broadcast_to(i_max_amps, (len(phases),)))
        return cls(from_bus, to_bus, tuple(phases), _as_matrix(y.real), _as_matrix(y.imag), i_max)


@dataclass(frozen=True)
class TransformerBranch:
    """Gang-operated wye-grounded transformer: ideal tap on the primary plus
    a per-phase series admittance referred to the secondary (siemens)."""

    from_bus: str
    to_bus: str
    phases: tuple[Phase, ...]
    tap_min: float
    tap_max: float
    tap_fixed: float | None
    series_g: float
    series_b: float
    s_max_kva: float

    @property
    def tap_mid(self) -> float:
        return 0.5 * (self.tap_min + self.tap_max)


@dataclass(frozen=True)
class LoadSpec:
    bus: str
    phases: tuple[Phase, ...]
    p_kw: tuple[float, ...]
    q_kvar: tuple[float, ...]

    def items(self):
        return zip(self.phases, self.p_kw, self.q_kvar)


@dataclass(frozen=True)
class BatteryParams:
    e_max_kwh: float = 13.5
    p_max_kw: float = 5.0
    eta_c: float = 0.95
    eta_d: float = 0.95
    e_set_kwh: float = 6.75


@dataclass(frozen=True)
class ProsumerSpec:
    bus: str
    phase: Phase
    pv_kw_rating: float
    battery: BatteryParams = field(default_factory=BatteryParams)
    weight: float = 1.0
    category: str = "A"

    @property
    def key(self) -> tuple[str, Phase]:
        return (self.bus, self.phase)

    @property
    def label(self) -> str:
        return f"{self.bus}.{self.phase.value}"


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    lines: tuple[LineBranch, ...] = ()
    transformers: tuple[TransformerBranch, ...] = ()
    loads: tuple[LoadSpec, ...] = ()
    prosumers: tuple[ProsumerSpec, ...] = ()
    base_mva: float = 1.0
    name: str = "network"
    slack_vpu: float = 1.0

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.SLACK)

    @property
    def s_base_kva(self) -> float:
        """Per-phase power base in kVA."""
        return self.base_mva * 1000.0 / 3.0

    def z_base(self, bus_id: str) -> float:
        kv = self.bus(bus_id).base_kv
        return kv * kv * 1e6 / (self.s_base_kva * 1e3)

    def i_base(self, bus_id: str) -> float:
        return self.s_base_kva / self.bus(bus_id).base_kv

    def node_phases(self) -> list[tuple[str, Phase]]:
        """Node-phase ordering used by every solver: bus document order, a < b < c."""
        return [(b.id, p) for b in self.buses for p in b.phases]

    def load_by_phase(self) -> dict[tuple[str, Phase], tuple[float, float]]:
        """Aggregate (p_kw, q_kvar) per node-phase."""
        out: dict[tuple[str, Phase], tuple[float, float]] = {}
        for ld in self.loads:
            for ph, p, q in ld.items():
                p0, q0 = out.get((ld.bus, ph), (0.0, 0.0))
                out[(ld.bus, ph)] = (p0 + p, q0 + q)
        return out


# --------------------------------------------------------------------------
# validation


def validate(model: NetworkModel) -> list[Diagnostic]:
    """Return one diagnostic per violated model invariant (empty when valid)."""
    diags: list[Diagnostic] = []

    def add(code, entity, message):
        diags.append(Diagnostic(code, entity, message))

    buses: dict[str, Bus] = {}
    for b in model.buses:
        if b.id in buses:
            add("duplicate-bus", f"bus {b.id}", "duplicate bus id")
        buses[b.id] = b
        if not b.phases:
            add("no-phases", f"bus {b.id}", "bus has no phases")
        if not b.v_min_pu < b.v_max_pu:
            add("voltage-band", f"bus {b.id}", "degenerate voltage band")
        if b.base_kv <= 0:
            add("base-kv", f"bus {b.id}", "base_kv must be positive")
    slacks = [b.id for b in model.buses if b.kind is BusKind.SLACK]
    if not slacks:
        add("no-slack", "network", "no slack bus")
    for extra in slacks[1:]:
        add("duplicate-slack", f"bus {extra}", "duplicate slack bus")
    if model.base_mva <= 0:
        add("base-mva", "network", "base_mva must be positive")

    def check_ref(entity, bus_id, phases) -> bool:
        if bus_id not in buses:
            add("unknown-bus", entity, f"unknown bus {bus_id!r}")
            return False
        missing = [p for p in phases if p not in buses[bus_id].phases]
        if missing:
            add("phase-mismatch", entity,
                f"phase {phase_str(missing)} not present on bus {bus_id!r}")
            return False
        return True

    for i, ln in enumerate(model.lines):
        ent = f"line {i} ({ln.from_bus}-{ln.to_bus})"
        ok = check_ref(ent, ln.from_bus, ln.phases) & check_ref(ent, ln.to_bus, ln.phases)
        n = len(ln.phases)
        g, bb = np.asarray(ln.g_block), np.asarray(ln.b_block)
        if g.shape != (n, n) or bb.shape != (n, n):
            add("block-shape", ent, f"admittance blocks must be {n}x{n}")
        elif not (np.allclose(g, g.T, rtol=0, atol=1e-12 * max(1.0, abs(g).max()))
                  and np.allclose(bb, bb.T, rtol=0, atol=1e-12 * max(1.0, abs(bb).max()))):
            add("block-symmetry", ent, "admittance blocks are not symmetric")
        if len(ln.i_max_amps) != n or any(v <= 0 for v in ln.i_max_amps):
            add("ampacity", ent, "i_max_amps must be positive on every phase")
        if ok and buses[ln.from_bus].base_kv != buses[ln.to_bus].base_kv:
            add("base-kv", ent, "line joins buses with different base_kv")
    for i, tr in enumerate(model.transformers):
        ent = f"transformer {i} ({tr.from_bus}-{tr.to_bus})"
        check_ref(ent, tr.from_bus, tr.phases)
        check_ref(ent, tr.to_bus, tr.phases)
        if not 0 < tr.tap_min <= tr.tap_max:
            add("tap-range", ent, "require 0 < tap_min <= tap_max")
        if tr.tap_fixed is not None and not tr.tap_min <= tr.tap_fixed <= tr.tap_max:
            add("tap-fixed", ent, "tap_fixed outside [tap_min, tap_max]")
        if tr.s_max_kva <= 0:
            add("rating", ent, "s_max_kva must be positive")
        if tr.series_g == 0 and tr.series_b == 0:
            add("series-admittance", ent, "zero series admittance")
    for i, ld in enumerate(model.loads):
        ent = f"load {i} ({ld.bus})"
        check_ref(ent, ld.bus, ld.phases)
        if not len(ld.phases) == len(ld.p_kw) == len(ld.q_kvar):
            add("load-shape", ent, "p_kw/q_kvar must list one value per phase")
    load_keys = set(model.load_by_phase())
    seen: set[tuple[str, Phase]] = set()
    for pr in model.prosumers:
        ent = f"prosumer {pr.label}"
        if check_ref(ent, pr.bus, (pr.phase,)):
            if buses[pr.bus].kind is BusKind.SLACK:
                add("prosumer-slack", ent, "prosumer attached to slack bus")
            if pr.key not in load_keys:
                add("prosumer-load", ent, "prosumer node-phase carries no load")
        if pr.key in seen:
            add("duplicate-prosumer", ent, "duplicate (bus, phase) prosumer")
        seen.add(pr.key)
        if pr.weight <= 0:
            add("weight", ent, "curtailment weight must be positive")
        bat = pr.battery
        if not 0 < bat.e_set_kwh <= bat.e_max_kwh:
            add("battery", ent, "require 0 < e_set_kwh <= e_max_kwh")
        if not (0 < bat.eta_c <= 1 and 0 < bat.eta_d <= 1):
            add("battery", ent, "efficiencies must lie in (0, 1]")
        if bat.p_max_kw < 0:
            add("battery", ent, "p_max_kw must be nonnegative")

    if slacks and slacks[0] in buses:
        adj: dict[str, set[str]] = {b: set() for b in buses}
        for br in (*model.lines, *model.transformers):
            if br.from_bus in adj and br.to_bus in adj:
                adj[br.from_bus].add(br.to_bus)
                adj[br.to_bus].add(br.from_bus)
        reached = {slacks[0]}
        queue = deque([slacks[0]])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in reached:
                    reached.add(nb)
                    queue.append(nb)
        for b in model.buses:
            if b.id not in reached:
                add("unreachable", f"bus {b.id}", "unreachable from slack")
    return diags


# --------------------------------------------------------------------------
# text / json formats

SECTIONS = ("system", "bus", "line", "transformer", "load", "prosumer")


def _tokens(line: str) -> list[tuple[str, int]]:
    """Whitespace tokens with 1-based column numbers, comments stripped."""
    out = []
    i = 0
    line = line.split("#", 1)[0]
    while i < len(line):
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < len(line) and not line[j].isspace():
            j += 1
        out.append((line[i:j], i + 1))
        i = j
    return out


class _Row:
    def __init__(self, tokens, lineno):
        self.tokens = tokens
        self.lineno = lineno
        self.pos = 0

    def fail(self, message, idx=None):
        idx = self.pos if idx is None else idx
        col = self.tokens[min(idx, len(self.tokens) - 1)][1] if self.tokens else 1
        raise NetworkParseError(message, self.lineno, col)

    def take(self, what: str) -> str:
        if self.pos >= len(self.tokens):
            self.fail(f"missing field {what!r}", len(self.tokens) - 1)
        self.pos += 1
        return self.tokens[self.pos - 1][0]

    def number(self, what: str) -> float:
        tok = self.take(what)
        try:
            return float(tok)
        except ValueError:
            self.fail(f"field {what!r}: expected a number, got {tok!r}", self.pos - 1)

    def numbers(self, what: str) -> tuple[float, ...]:
        tok = self.take(what)
        try:
            return tuple(float(v) for v in tok.split(","))
        except ValueError:
            self.fail(f"field {what!r}: expected comma-separated numbers, got {tok!r}", self.pos - 1)

    def phases(self, what="phases") -> tuple[Phase, ...]:
        tok = self.take(what)
        try:
            return parse_phases(tok)
        except ValueError as exc:
            self.fail(str(exc), self.pos - 1)

    def rest(self) -> list[str]:
        out = [t for t, _ in self.tokens[self.pos:]]
        self.pos = len(self.tokens)
        return out

    def done(self):
        if self.pos < len(self.tokens):
            self.fail(f"unexpected extra field {self.tokens[self.pos][0]!r}")


def _upper_to_full(vals: list[float], n: int) -> np.ndarray:
    m = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = vals[k]
            k += 1
    return m


def _full_to_upper(m) -> list[float]:
    m = np.asarray(m)
    return [m[i, j] for i in range(len(m)) for j in range(i, len(m))]


def _parse_line(row: _Row) -> LineBranch:
    f, t = row.take("from_bus"), row.take("to_bus")
    phases = row.phases()
    i_max = row.numbers("i_max_amps")
    n = len(phases)
    if len(i_max) == 1:
        i_max = i_max * n
    elif len(i_max) != n:
        row.fail("i_max_amps needs one value or one per phase", row.pos - 1)
    form = row.take("form")
    k = n * (n + 1) // 2
    vals = []
    for idx in range(2 * k):
        vals.append(row.number(f"value {idx + 1}"))
    row.done()
    first, second = _upper_to_full(vals[:k], n), _upper_to_full(vals[k:], n)
    if form == "y":
        return LineBranch(f, t, phases, _as_matrix(first), _as_matrix(second), i_max)
    if form == "z":
        try:
            return LineBranch.from_impedance(f, t, phases, first + 1j * second, i_max)
        except np.linalg.LinAlgError:
            row.fail("singular impedance matrix", 0)
    row.fail(f"unknown line form {form!r} (expected y or z)", 4)


def _parse_transformer(row: _Row) -> TransformerBranch:
    f, t = row.take("from_bus"), row.take("to_bus")
    phases = row.phases()
    tmin, tmax = row.number("tap_min"), row.number("tap_max")
    tok = row.take("tap_fixed")
    if tok == "-":
        tfix = None
    else:
        try:
            tfix = float(tok)
        except ValueError:
            row.fail(f"field 'tap_fixed': expected a number or '-', got {tok!r}", row.pos - 1)
    s_max = row.number("s_max_kva")
    form = row.take("form")
    a, b = row.number("value 1"), row.number("value 2")
    row.done()
    if form == "y":
        return TransformerBranch(f, t, phases, tmin, tmax, tfix, a, b, s_max)
    if form == "pct":
        # (r%, x%) on the transformer's own rating; converted once the
        # secondary base voltage is known, see _resolve_pct.
        return TransformerBranch(f, t, phases, tmin, tmax, tfix, math.nan, math.nan, s_max), (a, b)
    row.fail(f"unknown transformer form {form!r} (expected y or pct)", 8)


def _parse_prosumer(row: _Row) -> ProsumerSpec:
    bus = row.take("bus")
    ph = row.phases("phase")
    if len(ph) != 1:
        row.fail("prosumer phase must be a single phase", row.pos - 1)
    pv = row.number("pv_kw")
    weight = row.number("weight")
    category = row.take("category").upper()
    bat = BatteryParams(*(row.number(n) for n in
                          ("e_max_kwh", "p_max_kw", "eta_c", "eta_d", "e_set_kwh")))
    row.done()
    return ProsumerSpec(bus, ph[0], pv, bat, weight, category)


def parse_network(text: str, *, fmt: str = "text", check: bool = True) -> NetworkModel:
    """Parse network-file contents (``fmt`` is ``"text"`` or ``"json"``).

    With ``check`` the model is validated and :class:`NetworkValidationError`
    is raised on the first batch of diagnostics.
    """
    model = _parse_json(text) if fmt == "json" else _parse_text(text)
    if check:
        diags = validate(model)
        if diags:
            raise NetworkValidationError(diags)
    return model


def _parse_text(text: str) -> NetworkModel:
    section = None
    system: dict[str, str] = {}
    buses, lines, loads, prosumers = [], [], [], []
    transformers: list[tuple[TransformerBranch, tuple[float, float] | None]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokens(raw)
        if not toks:
            continue
        head, col = toks[0]
        if head.startswith("["):
            if not head.endswith("]") or len(toks) != 1:
                raise NetworkParseError(f"malformed section header {raw.strip()!r}", lineno, col)
            section = head[1:-1].strip().lower()
            if section not in SECTIONS:
                raise NetworkParseError(f"unknown section [{section}]", lineno, col)
            continue
        if section is None:
            raise NetworkParseError("data before first section header", lineno, col)
        row = _Row(toks, lineno)
        if section == "system":
            key = row.take("key")
            system[key] = row.take("value")
            row.done()
        elif section == "bus":
            bid = row.take("id")
            phases = row.phases()
            kind_tok = row.take("kind")
            try:
                kind = BusKind(kind_tok.lower())
            except ValueError:
                row.fail(f"unknown bus kind {kind_tok!r}", row.pos - 1)
            base_kv, vmin, vmax = (row.number(n) for n in ("base_kv", "v_min_pu", "v_max_pu"))
            row.done()
            buses.append(Bus(bid, phases, kind, base_kv, vmin, vmax))
        elif section == "line":
            lines.append(_parse_line(row))
        elif section == "transformer":
            tr = _parse_transformer(row)
            transformers.append(tr if isinstance(tr, tuple) else (tr, None))
        elif section == "load":
            bus = row.take("bus")
            phases = row.phases()
            p, q = row.numbers("p_kw"), row.numbers("q_kvar")
            row.done()
            if not len(p) == len(q) == len(phases):
                row.fail("p_kw/q_kvar must list one value per phase", 2)
            loads.append(LoadSpec(bus, phases, p, q))
        elif section == "prosumer":
            prosumers.append(_parse_prosumer(row))

    try:
        base_mva = float(system.get("base_mva", 1.0))
        slack_vpu = float(system.get("slack_vpu", 1.0))
    except ValueError as exc:
        raise NetworkParseError(f"[system]: {exc}", 0) from None
    bus_kv = {b.id: b.base_kv for b in buses}
    resolved = []
    for tr, pct in transformers:
        if pct is not None:
            kv = bus_kv.get(tr.to_bus)
            if kv is None:
                # left unresolved; validation reports the dangling reference
                resolved.append(TransformerBranch(tr.from_bus, tr.to_bus, tr.phases, tr.tap_min,
                                                  tr.tap_max, tr.tap_fixed, 1.0, 0.0, tr.s_max_kva))
                continue
            tr = transformer_from_pct(tr.from_bus, tr.to_bus, tr.phases, kv, tr.s_max_kva, *pct,
                                      tap_min=tr.tap_min, tap_max=tr.tap_max, tap_fixed=tr.tap_fixed)
        resolved.append(tr)
    return NetworkModel(tuple(buses), tuple(lines), tuple(resolved), tuple(loads), tuple(prosumers),
                        base_mva, system.get("name", "network"), slack_vpu)


def transformer_from_pct(from_bus, to_bus, phases, secondary_kv_ln, s_max_kva, r_pct, x_pct,
                         *, tap_min=1.0, tap_max=1.0, tap_fixed=None) -> TransformerBranch:
    """Build a transformer from percent impedance on its own three-phase rating."""
    z_base = (secondary_kv_ln * 1e3) ** 2 / (s_max_kva * 1e3 / 3.0)
    y = 1.0 / (complex(r_pct, x_pct) / 100.0 * z_base)
    return TransformerBranch(from_bus, to_bus, tuple(phases), tap_min, tap_max, tap_fixed,
                             y.real, y.imag, s_max_kva)


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_network(model: NetworkModel) -> str:
    """Inverse of :func:`parse_network` for the text format (admittance form)."""
    out = ["[system]", f"name {model.name}", f"base_mva {_fmt(model.base_mva)}",
           f"slack_vpu {_fmt(model.slack_vpu)}", "", "[bus]"]
    for b in model.buses:
        out.append(f"{b.id} {phase_str(b.phases)} {b.kind.value} {_fmt(b.base_kv)} "
                   f"{_fmt(b.v_min_pu)} {_fmt(b.v_max_pu)}")
    out += ["", "[line]"]
    for ln in model.lines:
        vals = _full_to_upper(ln.g_block) + _full_to_upper(ln.b_block)
        imax = ",".join(_fmt(v) for v in ln.i_max_amps)
        out.append(f"{ln.from_bus} {ln.to_bus} {phase_str(ln.phases)} {imax} y "
                   + " ".join(_fmt(v) for v in vals))
    out += ["", "[transformer]"]
    for tr in model.transformers:
        tfix = "-" if tr.tap_fixed is None else _fmt(tr.tap_fixed)
        out.append(f"{tr.from_bus} {tr.to_bus} {phase_str(tr.phases)} {_fmt(tr.tap_min)} "
                   f"{_fmt(tr.tap_max)} {tfix} {_fmt(tr.s_max_kva)} y "
                   f"{_fmt(tr.series_g)} {_fmt(tr.series_b)}")
    out += ["", "[load]"]
    for ld in model.loads:
        out.append(f"{ld.bus} {phase_str(ld.phases)} {','.join(_fmt(v) for v in ld.p_kw)} "
                   f"{','.join(_fmt(v) for v in ld.q_kvar)}")
    out += ["", "[prosumer]"]
    for pr in model.prosumers:
        b = pr.battery
        out.append(f"{pr.bus} {pr.phase.value} {_fmt(pr.pv_kw_rating)} {_fmt(pr.weight)} "
                   f"{pr.category} {_fmt(b.e_max_kwh)} {_fmt(b.p_max_kw)} {_fmt(b.eta_c)} "
                   f"{_fmt(b.eta_d)} {_fmt(b.e_set_kwh)}")
    return "\n".join(out) + "\n"


def network_to_dict(model: NetworkModel) -> dict:
    return {
        "system": {"name": model.name, "base_mva": model.base_mva, "slack_vpu": model.slack_vpu},
        "bus": [{"id": b.id, "phases": phase_str(b.phases), "kind": b.kind.value,
                 "base_kv": b.base_kv, "v_min_pu": b.v_min_pu, "v_max_pu": b.v_max_pu}
                for b in model.buses],
        "line": [{"from_bus": ln.from_bus, "to_bus": ln.to_bus, "phases": phase_str(ln.phases),
                  "g_block": [list(r) for r in ln.g_block], "b_block": [list(r) for r in ln.b_block],
                  "i_max_amps": list(ln.i_max_amps)} for ln in model.lines],
        "transformer": [{"from_bus": t.from_bus, "to_bus": t.to_bus, "phases": phase_str(t.phases),
                         "tap_min": t.tap_min, "tap_max": t.tap_max, "tap_fixed": t.tap_fixed,
                         "series_g": t.series_g, "series_b": t.series_b, "s_max_kva": t.s_max_kva}
                        for t in model.transformers],
        "load": [{"bus": ld.bus, "phases": phase_str(ld.phases), "p_kw": list(ld.p_kw),
                  "q_kvar": list(ld.q_kvar)} for ld in model.loads],
        "prosumer": [{"bus": p.bus, "phase": p.phase.value, "pv_kw_rating": p.pv_kw_rating,
                      "weight": p.weight, "category": p.category,
                      "battery": vars(p.battery).copy()} for p in model.prosumers],
    }


def _parse_json(text: str) -> NetworkModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(exc.msg, exc.lineno, exc.colno) from None
    try:
        sysd = doc.get("system", {})
        buses = tuple(Bus(d["id"], parse_phases(d["phases"]), BusKind(d["kind"]), float(d["base_kv"]),
                          float(d.get("v_min_pu", 0.95)), float(d.get("v_max_pu", 1.05)))
                      for d in doc.get("bus", []))
        lines = []
        for d in doc.get("line", []):
            phases = parse_phases(d["phases"])
            imax = d["i_max_amps"]
            imax = tuple(float(v) for v in np.broadcast_to(imax, (len(phases),)))
            if "z_ohm" in d:
                z = np.asarray(d["z_ohm"]["r"]) + 1j * np.asarray(d["z_ohm"]["x"])
                lines.append(LineBranch.from_impedance(d["from_bus"], d["to_bus"], phases, z, imax))
            else:
                lines.append(LineBranch(d["from_bus"], d["to_bus"], phases, _as_matrix(d["g_block"]),
                                        _as_matrix(d["b_block"]), imax))
        transformers = tuple(
            TransformerBranch(d["from_bus"], d["to_bus"], parse_phases(d["phases"]),
                              float(d["tap_min"]), float(d["tap_max"]),
                              None if d.get("tap_fixed") is None else float(d["tap_fixed"]),
                              float(d["series_g"]), float(d["series_b"]), float(d["s_max_kva"]))
            for d in doc.get("transformer", []))
        loads = tuple(LoadSpec(d["bus"], parse_phases(d["phases"]),
                               tuple(map(float, d["p_kw"])), tuple(map(float, d["q_kvar"])))
                      for d in doc.get("load", []))
        prosumers = tuple(
            ProsumerSpec(d["bus"], parse_phases(d["phase"])[0], float(d["pv_kw_rating"]),
                         BatteryParams(**d.get("battery", {})), float(d.get("weight", 1.0)),
                         d.get("category", "A").upper())
            for d in doc.get("prosumer", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkParseError(f"invalid JSON network: {exc!r}", 1) from None
    return NetworkModel(buses, tuple(lines), transformers, loads, prosumers,
                        float(sysd.get("base_mva", 1.0)), sysd.get("name", "network"),
                        float(sysd.get("slack_vpu", 1.0)))


def load_network(path, *, check: bool = True) -> NetworkModel:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_network(text, fmt="json" if path.endswith(".json") else "text", check=check)


# --------------------------------------------------------------------------
# admittance assembly


@dataclass(frozen=True)
class TransformerStamp:
    """One phase of a transformer in per-unit: ideal tap ``t`` on the primary
    node followed by series admittance ``y`` to the secondary node."""

    index: int  # transformer index in the model
    i_from: int  # node-phase index
    i_to: int
    y: complex


@dataclass(frozen=True)
class SparseRealAdmittance:
    """Per-unit nodal conductance/susceptance of all lines plus tap-dependent
    transformer stamps, over the node-phase ordering of the model."""

    nodes: tuple[tuple[str, Phase], ...]
    G: sp.csr_matrix
    B: sp.csr_matrix
    stamps: tuple[TransformerStamp, ...]

    @property
    def index(self) -> dict[tuple[str, Phase], int]:
        return {k: i for i, k in enumerate(self.nodes)}

    def complex_matrix(self, taps: dict[int, float] | None = None) -> sp.csr_matrix:
        """Full complex nodal admittance with transformer taps applied."""
        n = len(self.nodes)
        rows, cols, vals = [], [], []
        for st in self.stamps:
            t = (taps or {}).get(st.index, 1.0)
            rows += [st.i_from, st.i_from, st.i_to, st.i_to]
            cols += [st.i_from, st.i_to, st.i_from, st.i_to]
            vals += [st.y / t ** 2, -st.y / t, -st.y / t, st.y]
        ytr = sp.csr_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n))
        return (self.G + 1j * self.B + ytr).tocsr()


def line_pu_block(model: NetworkModel, line: LineBranch) -> np.ndarray:
    return line.y_block * model.z_base(line.from_bus)


def transformer_pu_y(model: NetworkModel, tr: TransformerBranch) -> complex:
    return complex(tr.series_g, tr.series_b) * model.z_base(tr.to_bus)


def assemble_admittance(model: NetworkModel) -> SparseRealAdmittance:
    nodes = tuple(model.node_phases())
    index = {k: i for i, k in enumerate(nodes)}
    n = len(nodes)
    rows, cols, vals = [], [], []
    for ln in model.lines:
        y = line_pu_block(model, ln)
        fi = [index[(ln.from_bus, p)] for p in ln.phases]
        ti = [index[(ln.to_bus, p)] for p in ln.phases]
        for a in range(len(ln.phases)):
            for b in range(len(ln.phases)):
                v = y[a, b]
                rows += [fi[a], fi[a], ti[a], ti[a]]
                cols += [fi[b], ti[b], fi[b], ti[b]]
                vals += [v, -v, -v, v]
    y = sp.coo_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    stamps = []
    for k, tr in enumerate(model.transformers):
        ypu = transformer_pu_y(model, tr)
        for p in tr.phases:
            stamps.append(TransformerStamp(k, index[(tr.from_bus, p)], index[(tr.to_bus, p)], ypu))
    return SparseRealAdmittance(nodes, sp.csr_matrix(y.real), sp.csr_matrix(y.imag), tuple(stamps))
