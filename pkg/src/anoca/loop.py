"""Receding-horizon co-simulation of prosumer schedulers and the utility
curtailment solver.

Each step every prosumer plans its battery over a rolling window and proposes
export/import setpoints for the current interval; the utility solves one
curtailment problem, returns adjusted export setpoints, and each prosumer
re-balances its executed action before the state of charge rolls forward.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dms as dms_mod
from .dms import DmsOptions, Setpoint, Strategy, build_problem, count_violations, solve_dms
from .hems import (ForecastSeries, HemsError, HemsSolution, TariffSchedule,
                   current_step_setpoints, solve_hems)
from .network import NetworkModel, Phase
from .powerflow import InjectionSet, PowerFlowError, solve_powerflow

log = logging.getLogger(__name__)

Key = tuple[str, Phase]

# PV export as a percentage of base load, per prosumer category
SCENARIOS: dict[int, dict[str, float]] = {
    1: {"A": 150.0, "B": 0.0, "C": 30.0},
    2: {"A": 30.0, "B": 150.0, "C": 0.0},
    3: {"A": 30.0, "B": 0.0, "C": 150.0},
    4: {"A": 0.0, "B": 150.0, "C": 30.0},
}


class SimulationError(Exception):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class ScenarioSpec:
    export_pct: dict[str, float]
    scenario_id: int | None = None
    noise_sigma: float = 0.0
    rng_seed: int = 0
    profiles: str = "synthetic"  # or a path to a profile CSV

    def __post_init__(self):
        if any(v < 0 for v in self.export_pct.values()):
            raise ValueError("export percentages must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.scenario_id is not None and dict(self.export_pct) != SCENARIOS.get(self.scenario_id):
            raise ValueError(f"scenario {self.scenario_id} percentages do not match the named table")

    @classmethod
    def named(cls, scenario_id: int, **kw) -> "ScenarioSpec":
        if scenario_id not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario_id}; choose one of {sorted(SCENARIOS)}")
        return cls(dict(SCENARIOS[scenario_id]), scenario_id, **kw)

    def pct(self, category: str) -> float:
        try:
            return self.export_pct[category]
        except KeyError:
            raise ValueError(f"scenario has no export percentage for category {category!r}") from None


def static_setpoints(model: NetworkModel, scenario: ScenarioSpec) -> dict[Key, Setpoint]:
    """Single-snapshot setpoints: each prosumer exports its category's
    percentage of its base load; a non-exporting prosumer imports its load."""
    loads = model.load_by_phase()
    out = {}
    for p in model.prosumers:
        lp = loads.get(p.key, (0.0, 0.0))[0]
        pct = scenario.pct(p.category)
        out[p.key] = Setpoint(pct / 100.0 * lp, lp if pct == 0 else 0.0)
    return out


# ---------------------------------------------------------------------------
# profiles and forecasts


def _gauss(h, center, width):
    d = (h - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


@dataclass(frozen=True)
class DailyProfile:
    """Per-unit load and PV shapes sampled on hours of the day (periodic)."""

    hours: np.ndarray
    load_pu: np.ndarray
    pv_pu: np.ndarray

    @classmethod
    def synthetic(cls) -> "DailyProfile":
        """Two-peak load equal to 1 at noon (peaking near 1.14 in the
        evening) and a half-sine PV shape peaking at noon."""
        h = np.arange(0.0, 24.0, 0.25)
        load = 0.85 + 0.08 * _gauss(h, 8.0, 1.5) + 0.13 * _gauss(h, 19.0, 2.0)
        pv = np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)
        return cls(h, load / load[h == 12.0][0], pv)

    @classmethod
    def from_csv(cls, path) -> "DailyProfile":
        """CSV with columns hour, load_pu, pv_pu over one day."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"hour", "load_pu", "pv_pu"} <= set(rows[0]):
            raise ValueError(f"{path}: profile CSV needs columns hour, load_pu, pv_pu")
        arr = np.array([[float(r["hour"]), float(r["load_pu"]), float(r["pv_pu"])] for r in rows])
        arr = arr[np.argsort(arr[:, 0])]
        if (arr[:, 1:] < 0).any():
            raise ValueError(f"{path}: profile values must be non-negative")
        return cls(arr[:, 0] % 24.0, arr[:, 1], arr[:, 2])

    def sample(self, hours: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(hours) % 24.0
        return (np.interp(h, self.hours, self.load_pu, period=24.0),
                np.interp(h, self.hours, self.pv_pu, period=24.0))


def generate_forecasts(base: np.ndarray, sigma: float, rng: np.random.Generator | int) -> np.ndarray:
    """``base * (1 + eps)`` with i.i.d. ``eps ~ N(0, sigma^2)``, clamped at zero."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    base = np.asarray(base, dtype=float)
    if sigma == 0:
        return base.copy()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return np.maximum(base * (1.0 + rng.normal(0.0, sigma, base.shape)), 0.0)


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class Tariff:
    import_offpeak: float = 0.15
    import_peak: float = 0.30
    peak_start_hour: float = 16.0
    peak_end_hour: float = 21.0
    export: float = 0.05

    def schedule(self, hours: np.ndarray) -> TariffSchedule:
        h = np.asarray(hours) % 24.0
        peak = (h >= self.peak_start_hour) & (h < self.peak_end_hour)
        return TariffSchedule(np.where(peak, self.import_peak, self.import_offpeak),
                              np.full(len(h), self.export))


@dataclass
class SimulationConfig:
    network: NetworkModel
    dt_minutes: float = 5.0
    horizon_hours: float = 4.0
    span: int = 1
    start_hour: float = 12.0
    strategy: Strategy = Strategy.L1
    terminal_soc: str = "window_end"  # or "absolute_end"
    tariff: Tariff = field(default_factory=Tariff)
    profile: DailyProfile = field(default_factory=DailyProfile.synthetic)
    threads: int | None = None
    dms: DmsOptions = field(default_factory=DmsOptions)

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy) if isinstance(self.strategy, str) else self.strategy
        if self.dt_minutes <= 0 or self.horizon_hours <= 0:
            raise ValueError("interval length and horizon must be positive")
        ratio = self.horizon_hours * 60.0 / self.dt_minutes
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("interval length must divide the horizon")
        if self.span < 1:
            raise ValueError("span must be at least one step")
        if self.terminal_soc not in ("window_end", "absolute_end"):
            raise ValueError("terminal_soc must be window_end or absolute_end")

    @property
    def dt_hours(self) -> float:
        return self.dt_minutes / 60.0

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_hours * 60.0 / self.dt_minutes))

    def hems_threads(self) -> int:
        if self.threads is not None:
            return max(1, self.threads)
        env = os.environ.get("ANOCA_THREADS")
        return max(1, int(env)) if env else min(8, os.cpu_count() or 1)


@dataclass
class ProsumerStep:
    bus: str
    phase: str
    load_kw: float
    pv_kw: float
    oes_kw: float
    ois_kw: float
    p_cu_kw: float
    aes_kw: float
    charge_kw: float
    discharge_kw: float
    import_kw: float
    spill_kw: float
    soc_kwh: float  # after the executed action


@dataclass
class StepRecord:
    t: int
    hour: float
    prosumers: list[ProsumerStep]
    violations_before: int
    violations_after: int
    net_curtailed_kw: float
    max_curtailed_kw: float
    buses_adjusted: int
    dms_iterations: int
    kkt_residual: float
    taps: tuple[float, ...]
    hems_solve_time_s: float = 0.0
    dms_solve_time_s: float = 0.0

    @property
    def total_export_kw(self) -> float:
        return float(sum(p.oes_kw for p in self.prosumers))

    def to_dict(self, timings: bool = False) -> dict:
        d = {"t": self.t, "hour": self.hour,
             "prosumers": [vars(p).copy() for p in self.prosumers],
             "violations_before": self.violations_before,
             "violations_after": self.violations_after,
             "net_curtailed_kw": self.net_curtailed_kw,
             "max_curtailed_kw": self.max_curtailed_kw,
             "buses_adjusted": self.buses_adjusted,
             "dms_iterations": self.dms_iterations,
             "kkt_residual": self.kkt_residual,
             "taps": list(self.taps)}
        if timings:
            d["hems_solve_time_s"] = self.hems_solve_time_s
            d["dms_solve_time_s"] = self.dms_solve_time_s
        return d


# ---------------------------------------------------------------------------
# simulation


@dataclass
class _Executed:
    charge: float
    discharge: float
    spill: float
    soc: float


def rebalance(plan: HemsSolution, batt, p_cu: float, pv_kw: float, soc: float, dt: float) -> _Executed:
    """Absorb a curtailed export: less discharge, then more charging within
    the power and energy limits, and finally PV spill."""
    pc, pd, spill = float(plan.p_charge[0]), float(plan.p_discharge[0]), float(plan.spill[0])
    left = p_cu
    cut = min(left, pd)
    pd -= cut
    left -= cut
    if left > 0 and pd == 0.0:
        room = (batt.e_max_kwh - soc) / (batt.eta_c * dt) - pc
        extra = max(0.0, min(left, batt.p_max_kw - pc, room))
        pc += extra
        left -= extra
    if left > 0:
        extra = min(left, pv_kw - spill)
        spill += extra
        left -= extra
    if left > 1e-9:
        raise ValueError(f"curtailment of {p_cu} kW cannot be absorbed")
    soc_next = soc + batt.eta_c * pc * dt - pd * dt / batt.eta_d
    return _Executed(pc, pd, spill, min(max(soc_next, 0.0), batt.e_max_kwh))


def pv_peak_kw(base_load_kw: float, pct: float, profile: DailyProfile) -> float:
    """PV rating whose surplus over the load at the PV peak is ``pct`` percent
    of base load.  A prosumer that exports nothing has no PV, matching the
    single-snapshot setpoints."""
    if pct == 0:
        return 0.0
    peak_hour = float(profile.hours[np.argmax(profile.pv_pu)])
    load_at_peak = float(profile.sample(np.array([peak_hour]))[0][0])
    return (load_at_peak + pct / 100.0) * base_load_kw / float(np.max(profile.pv_pu))


def run_simulation(cfg: SimulationConfig, scenario: ScenarioSpec, *,
                   on_step=None) -> list[StepRecord]:
    """Run ``cfg.span`` receding-horizon steps; raises SimulationError with the
    failing step index on any solver failure."""
    model = cfg.network
    pros = list(model.prosumers)
    base_loads = model.load_by_phase()
    rng = np.random.default_rng(scenario.rng_seed)
    dt, H = cfg.dt_hours, cfg.horizon_steps
    soc = {p.key: p.battery.e_set_kwh for p in pros}
    pv_scale = {p.key: pv_peak_kw(base_loads.get(p.key, (0.0, 0.0))[0], scenario.pct(p.category),
                                  cfg.profile) for p in pros}
    records = []
    with ThreadPoolExecutor(max_workers=cfg.hems_threads()) as pool:
        for t in range(cfg.span):
            hour0 = cfg.start_hour + t * dt
            if cfg.terminal_soc == "window_end":
                length, terminal = H, True
            else:
                length = min(H, cfg.span - t)
                terminal = t + H >= cfg.span
            hours = hour0 + dt * np.arange(length)
            load_pu, pv_pu = cfg.profile.sample(hours)
            tariff = cfg.tariff.schedule(hours)
            forecasts = []
            for p in pros:
                lp = base_loads.get(p.key, (0.0, 0.0))[0]
                load = lp * load_pu
                pv = pv_scale[p.key] * pv_pu
                # interval 0 is measured; later intervals carry forecast error
                load_fc = np.concatenate([load[:1], generate_forecasts(load[1:], scenario.noise_sigma, rng)])
                pv_fc = np.concatenate([pv[:1], generate_forecasts(pv[1:], scenario.noise_sigma, rng)])
                forecasts.append(ForecastSeries(load_fc, pv_fc, dt))
            try:
                rec = _step(cfg, model, pros, base_loads, forecasts, tariff, soc, terminal,
                            t, hour0, load_pu[0], pool)
            except (HemsError, dms_mod.DmsError, PowerFlowError, ValueError) as exc:
                raise SimulationError(t, exc) from exc
            records.append(rec)
            if on_step is not None:
                on_step(rec)
    return records


def _step(cfg, model, pros, base_loads, forecasts, tariff, soc, terminal, t, hour0, load_now,
          pool) -> StepRecord:
    dt = cfg.dt_hours

    def plan(i):
        p = pros[i]
        t0 = time.perf_counter()
        sol = solve_hems(p.battery, tariff, forecasts[i], e_initial=soc[p.key], terminal=terminal)
        return sol, time.perf_counter() - t0

    results = list(pool.map(plan, range(len(pros))))
    plans = [r[0] for r in results]
    hems_time = float(np.mean([r[1] for r in results])) if results else 0.0
    setpoints = {}
    for p, sol in zip(pros, plans):
        oes, ois = current_step_setpoints(sol)
        setpoints[p.key] = Setpoint(oes, ois)
    loads = InjectionSet({k: (pl * load_now, ql * load_now) for k, (pl, ql) in base_loads.items()})
    prob = build_problem(model, setpoints, loads, cfg.strategy)
    pre = dms_mod.uncurtailed_injections(prob)
    try:
        before = count_violations(model, solve_powerflow(model, pre, taps=dms_mod.initial_taps(prob)))
    except PowerFlowError:
        before = -1  # uncurtailed state has no power-flow solution
    sol = solve_dms(prob, cfg.dms)
    after = count_violations(model, sol.voltages, sol.flows)
    steps = []
    for p, plan_, fc in zip(pros, plans, forecasts):
        k = p.key
        s = setpoints[k]
        p_cu = sol.p_cu_kw[k]
        ex = rebalance(plan_, p.battery, p_cu, float(fc.p_pv_kw[0]), soc[k], dt)
        soc[k] = ex.soc
        steps.append(ProsumerStep(p.bus, p.phase.value, float(fc.p_load_kw[0]), float(fc.p_pv_kw[0]),
                                  s.oes_kw, s.ois_kw, p_cu, sol.aes_kw[k], ex.charge, ex.discharge,
                                  s.ois_kw, ex.spill, ex.soc))
    log.info("step %d: %d violations before, %d after, %.3f kW curtailed", t, before, after,
             sol.net_curtailed_kw)
    return StepRecord(t, round(hour0, 9), steps, before, after, sol.net_curtailed_kw,
                      sol.max_curtailed_kw, sol.adjusted_count, sol.iterations, sol.kkt_residual,
                      tuple(sol.taps), hems_time, sol.solve_time)


def conservation_error(step: ProsumerStep) -> float:
    """pv + discharge + import - (load + charge + aes + spill)."""
    return (step.pv_kw + step.discharge_kw + step.import_kw
            - (step.load_kw + step.charge_kw + step.aes_kw + step.spill_kw))


# ---------------------------------------------------------------------------
# outputs

SUMMARY_COLUMNS = ("t", "hour", "total_power_kw", "net_curtailed_kw", "max_curtailed_kw",
                   "buses_adjusted", "violations_before", "violations_after",
                   "avg_hems_solve_time_s", "dms_solve_time_s", "dms_iterations")


def records_jsonl(records: list[StepRecord]) -> str:
    """One JSON object per step; timings are left out so fixed-seed runs are
    byte-identical."""
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def summary_csv(records: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in records:
        w.writerow([r.t, f"{r.hour:.4f}", f"{r.total_export_kw:.6f}", f"{r.net_curtailed_kw:.6f}",
                    f"{r.max_curtailed_kw:.6f}", r.buses_adjusted, r.violations_before,
                    r.violations_after, f"{r.hems_solve_time_s:.6f}", f"{r.dms_solve_time_s:.6f}",
                    r.dms_iterations])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# configuration files


def _read_mapping(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    return tomllib.loads(text)


def resolve_network_path(name: str | os.PathLike, base_dir: Path | None = None) -> Path:
    """A path as given, relative to ``base_dir``, or a packaged fixture name."""
    p = Path(name)
    candidates = [p]
    if base_dir is not None and not p.is_absolute():
        candidates.append(base_dir / p)
    data = Path(__file__).resolve().parent / "data"
    candidates += [data / p.name, data / f"{p.name}.net"]
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"network {name!s} not found")


def scenario_from_mapping(sc: dict) -> ScenarioSpec:
    sigma = float(sc.get("noise_sigma", 0.0))
    seed = int(sc.get("seed", 0))
    profiles = str(sc.get("profiles", "synthetic"))
    if "export_pct" in sc:
        sid = sc.get("id")
        return ScenarioSpec({str(k): float(v) for k, v in sc["export_pct"].items()},
                            None if sid is None else int(sid), sigma, seed, profiles)
    if "id" not in sc:
        raise ValueError("scenario needs an id or an export_pct table")
    return ScenarioSpec.named(int(sc["id"]), noise_sigma=sigma, rng_seed=seed, profiles=profiles)


@dataclass
class LoadedConfig:
    config: SimulationConfig
    scenario: ScenarioSpec
    network_path: Path
    raw: dict


def load_simulation_config(path, *, network=None, scenario_id: int | None = None,
                           strategy: str | None = None, seed: int | None = None) -> LoadedConfig:
    """Read a TOML or JSON simulation config; keyword arguments override it."""
    from .network import load_network

    path = Path(path)
    raw = _read_mapping(path)
    base = path.resolve().parent
    sim = dict(raw.get("simulation", {}))
    sc = dict(raw.get("scenario", {}))
    if network is not None:
        sim["network"] = str(network)
    if strategy is not None:
        sim["strategy"] = strategy
    if scenario_id is not None:
        sc.pop("export_pct", None)
        sc["id"] = scenario_id
    if seed is not None:
        sc["seed"] = seed
    if "network" not in sim:
        raise ValueError(f"{path}: [simulation] needs a network")
    net_path = resolve_network_path(sim["network"], base)
    scenario = scenario_from_mapping(sc)
    if scenario.profiles == "synthetic":
        profile = DailyProfile.synthetic()
    else:
        prof = Path(scenario.profiles)
        profile = DailyProfile.from_csv(prof if prof.is_absolute() else base / prof)
    known = {"dt_minutes", "horizon_hours", "span", "start_hour", "strategy", "terminal_soc",
             "threads"}
    extra = set(sim) - known - {"network"}
    if extra:
        raise ValueError(f"{path}: unknown simulation keys {sorted(extra)}")
    cfg = SimulationConfig(load_network(net_path), profile=profile,
                           tariff=Tariff(**raw.get("tariff", {})),
                           **{k: v for k, v in sim.items() if k in known})
    sim["network"] = str(net_path)
    return LoadedConfig(cfg, scenario, net_path, {"simulation": sim, "scenario": sc,
                                                  "tariff": raw.get("tariff", {})})
