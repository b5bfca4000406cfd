"""Prosumer home energy management: receding-horizon battery scheduling.

Each prosumer minimizes its energy bill over a look-ahead window subject to
power balance, battery state-of-charge dynamics and a binary that forbids
simultaneous charging and discharging.  The mixed-integer program is solved
to proven optimality by best-bound branch-and-bound on LP relaxations.
"""
from __future__ import annotations

import csv
import heapq
import io
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .network import BatteryParams

ABS_TOL = 1e-9  # incumbent/bound agreement that counts as zero gap
_ACTIVE = 1e-9  # power below this is treated as zero when testing for conflicts

# per-interval variable block
PC, PD, PI, PE, SPILL, Z, SOC = range(7)
NV = 7


class HemsError(Exception):
    pass


class Infeasible(HemsError):
    def __init__(self, message: str, interval: int):
        super().__init__(message)
        self.interval = interval


@dataclass(frozen=True)
class TariffSchedule:
    c_import: np.ndarray
    c_export: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c_import", np.asarray(self.c_import, dtype=float))
        object.__setattr__(self, "c_export", np.asarray(self.c_export, dtype=float))
        if self.c_import.shape != self.c_export.shape:
            raise ValueError("import and export price series differ in length")
        bad = np.flatnonzero(self.c_import <= self.c_export)
        if len(bad):
            raise ValueError(f"import price must exceed export price (interval {bad[0]})")

    @classmethod
    def flat(cls, horizon: int, c_import: float, c_export: float) -> "TariffSchedule":
        return cls(np.full(horizon, c_import), np.full(horizon, c_export))

    def window(self, start: int, length: int) -> "TariffSchedule":
        return TariffSchedule(self.c_import[start:start + length], self.c_export[start:start + length])


@dataclass(frozen=True)
class ForecastSeries:
    p_load_kw: np.ndarray
    p_pv_kw: np.ndarray
    dt_hours: float

    def __post_init__(self):
        object.__setattr__(self, "p_load_kw", np.asarray(self.p_load_kw, dtype=float))
        object.__setattr__(self, "p_pv_kw", np.asarray(self.p_pv_kw, dtype=float))
        if self.p_load_kw.shape != self.p_pv_kw.shape or self.p_load_kw.ndim != 1:
            raise ValueError("load and PV forecasts must be 1-D series of equal length")
        if self.horizon < 1:
            raise ValueError("forecast horizon must be at least one interval")
        if (self.p_load_kw < 0).any() or (self.p_pv_kw < 0).any():
            raise ValueError("forecasts must be non-negative")
        if self.dt_hours <= 0:
            raise ValueError("interval length must be positive")

    @property
    def horizon(self) -> int:
        return len(self.p_load_kw)


@dataclass
class HemsSolution:
    p_charge: np.ndarray
    p_discharge: np.ndarray
    p_import: np.ndarray
    p_export: np.ndarray
    spill: np.ndarray
    soc_kwh: np.ndarray  # horizon + 1 entries, soc_kwh[0] is the window start
    z: np.ndarray
    objective: float
    gap: float
    nodes: int = 0
    dt_hours: float = 1.0

    @property
    def horizon(self) -> int:
        return len(self.p_charge)


def current_step_setpoints(sol: HemsSolution) -> tuple[float, float]:
    """(OES, OIS) of the first interval; the rest of the plan is discarded."""
    return float(sol.p_export[0]), float(sol.p_import[0])


def check_battery(batt: BatteryParams) -> None:
    if not 0 < batt.e_set_kwh <= batt.e_max_kwh:
        raise ValueError("battery boundary SOC must lie in (0, e_max]")
    if batt.p_max_kw < 0:
        raise ValueError("battery power rating must be non-negative")
    if not (0 < batt.eta_c <= 1 and 0 < batt.eta_d <= 1 and batt.eta_c * batt.eta_d <= 1):
        raise ValueError("battery efficiencies must lie in (0, 1]")


def reachability_conflict(batt: BatteryParams, horizon: int, dt: float, e_initial: float,
                          e_terminal: float | None) -> int | None:
    """First interval whose forward-reachable SOC range (from ``e_initial``)
    misses the range from which ``e_terminal`` can still be reached, or None."""
    up = batt.eta_c * batt.p_max_kw * dt
    down = batt.p_max_kw * dt / batt.eta_d
    lo = np.empty(horizon + 1)
    hi = np.empty(horizon + 1)
    lo[0] = hi[0] = e_initial
    for k in range(horizon):
        lo[k + 1] = max(0.0, lo[k] - down)
        hi[k + 1] = min(batt.e_max_kwh, hi[k] + up)
    if e_terminal is None:
        blo, bhi = np.zeros(horizon + 1), np.full(horizon + 1, batt.e_max_kwh)
    else:
        blo = np.empty(horizon + 1)
        bhi = np.empty(horizon + 1)
        blo[-1] = bhi[-1] = e_terminal
        for k in range(horizon - 1, -1, -1):
            blo[k] = max(0.0, blo[k + 1] - up)
            bhi[k] = min(batt.e_max_kwh, bhi[k + 1] + down)
    tol = 1e-9 * max(1.0, batt.e_max_kwh)
    for k in range(horizon + 1):
        if max(lo[k], blo[k]) > min(hi[k], bhi[k]) + tol:
            return k
    return None


class _LpModel:
    """LP relaxation data shared by all branch-and-bound nodes."""

    def __init__(self, batt, tariff, fc, e0, e_terminal):
        H, dt = fc.horizon, fc.dt_hours
        self.H = H
        n = NV * H
        c = np.zeros(n)
        c[PI::NV] = tariff.c_import * dt
        c[PE::NV] = -tariff.c_export * dt
        self.c = c
        rows, cols, vals = [], [], []
        b_eq = np.zeros(2 * H)
        for k in range(H):
            o = NV * k
            # load + charge + export = import + pv - spill + discharge
            for j, v in ((PC, 1.0), (PE, 1.0), (PI, -1.0), (SPILL, 1.0), (PD, -1.0)):
                rows.append(k), cols.append(o + j), vals.append(v)
            b_eq[k] = fc.p_pv_kw[k] - fc.p_load_kw[k]
            # soc[k+1] - soc[k] - eta_c dt pc + dt / eta_d pd = 0
            r = H + k
            rows += [r, r, r]
            cols += [o + SOC, o + PC, o + PD]
            vals += [1.0, -batt.eta_c * dt, dt / batt.eta_d]
            if k == 0:
                b_eq[r] = e0
            else:
                rows.append(r), cols.append(o - NV + SOC), vals.append(-1.0)
        self.A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(2 * H, n))
        self.b_eq = b_eq
        rows, cols, vals = [], [], []
        for k in range(H):
            o = NV * k
            pmax = batt.p_max_kw
            rows += [2 * k, 2 * k, 2 * k + 1, 2 * k + 1]
            cols += [o + PC, o + Z, o + PD, o + Z]
            vals += [1.0, -pmax, 1.0, pmax]
        self.A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(2 * H, n))
        self.b_ub = np.tile([0.0, batt.p_max_kw], H)
        lb = np.zeros(n)
        ub = np.full(n, np.inf)
        ub[PC::NV] = batt.p_max_kw
        ub[PD::NV] = batt.p_max_kw
        ub[SPILL::NV] = fc.p_pv_kw
        ub[Z::NV] = 1.0
        ub[SOC::NV] = batt.e_max_kwh
        if e_terminal is not None:
            lb[NV * (H - 1) + SOC] = ub[NV * (H - 1) + SOC] = e_terminal
        self.lb, self.ub = lb, ub

    def solve(self, fixed: dict[int, int]):
        lb, ub = self.lb.copy(), self.ub.copy()
        for k, val in fixed.items():
            lb[NV * k + Z] = ub[NV * k + Z] = val
        res = linprog(self.c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=np.column_stack([lb, ub]), method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise HemsError(f"LP relaxation failed: {res.message}")
        return res.x, float(res.fun)


def _conflict(x: np.ndarray, H: int) -> int | None:
    """First interval with both charging and discharging in the relaxation."""
    for k in range(H):
        if x[NV * k + PC] > _ACTIVE and x[NV * k + PD] > _ACTIVE:
            return k
    return None


def solve_hems(batt: BatteryParams, tariff: TariffSchedule, fc: ForecastSeries, *,
               e_initial: float | None = None, terminal: bool = True,
               max_nodes: int = 100_000) -> HemsSolution:
    """Minimize import cost minus export revenue over the forecast window.

    The window starts at ``e_initial`` (default: the battery's boundary SOC)
    and, when ``terminal`` is set, must end at the boundary SOC.
    """
    check_battery(batt)
    H = fc.horizon
    if len(tariff.c_import) != H:
        raise ValueError(f"tariff covers {len(tariff.c_import)} intervals, forecast {H}")
    e0 = batt.e_set_kwh if e_initial is None else float(e_initial)
    if not -1e-9 <= e0 <= batt.e_max_kwh + 1e-9:
        raise Infeasible(f"initial SOC {e0} outside [0, {batt.e_max_kwh}]", 0)
    e0 = min(max(e0, 0.0), batt.e_max_kwh)
    e_end = batt.e_set_kwh if terminal else None
    k_bad = reachability_conflict(batt, H, fc.dt_hours, e0, e_end)
    if k_bad is not None:
        raise Infeasible(f"boundary SOC {e_end} kWh unreachable from {e0} kWh "
                         f"(conflict at interval {k_bad})", k_bad)
    lp = _LpModel(batt, tariff, fc, e0, e_end)
    root = lp.solve({})
    if root is None:
        raise Infeasible("LP relaxation infeasible", 0)
    best_x, best_f = None, np.inf
    counter = itertools.count()
    heap = [(root[1], next(counter), {}, root[0])]
    nodes = 0
    bound = root[1]
    while heap:
        bound, _, fixed, x = heapq.heappop(heap)
        if bound >= best_f - ABS_TOL:
            # best-bound order: every remaining node is at least as bad
            heap.clear()
            bound = best_f
            break
        nodes += 1
        if nodes > max_nodes:
            raise HemsError(f"branch-and-bound exceeded {max_nodes} nodes")
        k = _conflict(x, H)
        if k is None:
            # no interval mixes charge and discharge: rounding z is exact
            best_x, best_f = x, bound
            continue
        for val in (0, 1):
            child = dict(fixed)
            child[k] = val
            out = lp.solve(child)
            if out is not None and out[1] < best_f - ABS_TOL:
                heapq.heappush(heap, (out[1], next(counter), child, out[0]))
    if best_x is None:
        raise Infeasible("no integer-feasible schedule", 0)
    sol = _clean(best_x, batt, tariff, fc, e0)
    gap = max(0.0, best_f - min(bound, best_f))
    sol.gap = 0.0 if gap <= ABS_TOL else gap / max(1.0, abs(best_f))
    sol.nodes = nodes
    return sol


def _clean(x: np.ndarray, batt, tariff, fc, e0) -> HemsSolution:
    """Round solver noise so balance and SOC recursion hold to machine precision."""
    H, dt = fc.horizon, fc.dt_hours
    blk = x.reshape(H, NV)
    pc = np.clip(blk[:, PC], 0.0, batt.p_max_kw)
    pd = np.clip(blk[:, PD], 0.0, batt.p_max_kw)
    pc[pc < _ACTIVE] = 0.0
    pd[pd < _ACTIVE] = 0.0
    z = (pc > 0).astype(int)
    pd[z == 1] = 0.0
    spill = np.clip(blk[:, SPILL], 0.0, fc.p_pv_kw)
    spill[spill < _ACTIVE] = 0.0
    net = fc.p_pv_kw - spill + pd - fc.p_load_kw - pc
    # spilling while importing is never needed; hand it back first
    give = np.minimum(spill, np.maximum(-net, 0.0))
    spill = spill - give
    net = net + give
    pe = np.maximum(net, 0.0)
    pi = np.maximum(-net, 0.0)
    soc = np.empty(H + 1)
    soc[0] = e0
    for k in range(H):
        soc[k + 1] = soc[k] + batt.eta_c * pc[k] * dt - pd[k] * dt / batt.eta_d
    soc = np.clip(soc, 0.0, batt.e_max_kwh)
    obj = float(np.sum(tariff.c_import * pi - tariff.c_export * pe) * dt)
    return HemsSolution(pc, pd, pi, pe, spill, soc, z, obj, 0.0, dt_hours=dt)


def check_solution(sol: HemsSolution, batt: BatteryParams, fc: ForecastSeries,
                   tol: float = 1e-9) -> list[str]:
    """List of violated schedule invariants (empty when the schedule is valid)."""
    issues = []
    bal = (fc.p_load_kw + sol.p_charge + sol.p_export
           - sol.p_import - fc.p_pv_kw + sol.spill - sol.p_discharge)
    if np.abs(bal).max() > tol:
        issues.append(f"power balance off by {np.abs(bal).max():.2e}")
    soc = sol.soc_kwh
    rec = soc[:-1] + batt.eta_c * sol.p_charge * fc.dt_hours - sol.p_discharge * fc.dt_hours / batt.eta_d
    if np.abs(rec - soc[1:]).max() > tol:
        issues.append("SOC recursion violated")
    if (soc < -tol).any() or (soc > batt.e_max_kwh + tol).any():
        issues.append("SOC outside battery limits")
    if ((sol.p_charge > tol) & (sol.p_discharge > tol)).any():
        issues.append("simultaneous charge and discharge")
    if ((sol.p_import > tol) & (sol.p_export > tol)).any():
        issues.append("simultaneous import and export")
    if (sol.p_charge > sol.z * batt.p_max_kw + tol).any() or \
            (sol.p_discharge > (1 - sol.z) * batt.p_max_kw + tol).any():
        issues.append("binary charge/discharge limits violated")
    return issues


# ---------------------------------------------------------------------------
# CSV interfaces

FORECAST_COLUMNS = ("tau", "p_load_kw", "p_pv_kw", "c_import", "c_export")
SCHEDULE_COLUMNS = ("tau", "p_charge", "p_discharge", "p_import", "p_export", "spill",
                    "soc_kwh", "z")


def read_forecast_csv(text: str, dt_hours: float) -> tuple[ForecastSeries, TariffSchedule]:
    rows = list(csv.DictReader(io.StringIO(text)))
    missing = [c for c in FORECAST_COLUMNS if rows and c not in rows[0]]
    if not rows or missing:
        raise ValueError(f"forecast CSV needs columns {', '.join(FORECAST_COLUMNS)}")
    rows.sort(key=lambda r: int(r["tau"]))
    col = {c: np.array([float(r[c]) for r in rows]) for c in FORECAST_COLUMNS[1:]}
    return (ForecastSeries(col["p_load_kw"], col["p_pv_kw"], dt_hours),
            TariffSchedule(col["c_import"], col["c_export"]))


def schedule_csv(sol: HemsSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEDULE_COLUMNS)
    for k in range(sol.horizon):
        w.writerow([k, *(f"{v:.9g}" for v in (sol.p_charge[k], sol.p_discharge[k], sol.p_import[k],
                                               sol.p_export[k], sol.spill[k], sol.soc_kwh[k + 1])),
                    int(sol.z[k])])
    return buf.getvalue()
