"""Utility-side network-aware curtailment (the DMS stage).

Given each prosumer's proposed export/import setpoints (OES/OIS) the DMS
solves a three-phase AC optimization over node voltages, continuous
transformer taps and per-prosumer curtailments so that voltage, ampacity and
transformer-rating limits hold, minimizing a norm of the weighted
curtailment.  Prosumer consumption entering KCL is ``OIS - OES + P_cu``.

Variable layout (all per-unit): ``[a (nf), b (nf), taps (nt), cu (nc),
cu_minus (nc, split L1 only), pbar (L-infinity only)]``.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import ipm
from .kcl import KclEquations, per_unit_injections
from .network import NetworkModel, Phase, line_pu_block, transformer_pu_y
from .powerflow import (BranchFlows, InjectionSet, PowerFlowError, SolverOptions, VoltageSolution,
                        compute_branch_flows, kcl_residual, solve_powerflow)

ADJUSTED_KW = 1e-4  # curtailment above this counts as an adjusted setpoint


class Strategy(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        try:
            return cls(text.lower().replace("∞", "inf"))
        except ValueError:
            raise ValueError(f"unknown strategy {text!r} (expected l1, l2 or linf)") from None


class DmsError(Exception):
    pass


class UnknownProsumer(DmsError):
    pass


class NonConvergence(DmsError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class LocallyInfeasible(DmsError):
    def __init__(self, message, constraint: str, violation: float):
        super().__init__(message)
        self.constraint = constraint
        self.violation = violation


Key = tuple[str, Phase]


@dataclass(frozen=True)
class Setpoint:
    oes_kw: float
    ois_kw: float = 0.0


@dataclass
class DmsOptions:
    fixed_taps: bool = False
    split_l1: bool = False
    init_fraction: float = 0.99  # warm start curtailment as a fraction of OES
    ipm: ipm.IpmOptions | None = None  # None picks per-strategy defaults

    def solver_options(self, strategy: Strategy) -> ipm.IpmOptions:
        if self.ipm is not None:
            return self.ipm
        if strategy is Strategy.LINF:
            # curtailments below the maximum are not unique under L-infinity;
            # return the central point of the optimal face instead of an
            # arbitrary vertex, converged to a tighter complementarity
            return ipm.IpmOptions(polish=False, comp_tol=1e-9)
        return ipm.IpmOptions()


@dataclass
class Layout:
    nf: int
    tap_index: tuple[int, ...]  # transformer indices with a tap variable
    cu_keys: tuple[Key, ...]  # prosumers with a curtailment variable (OES > 0)
    split: bool
    has_pbar: bool

    @property
    def t0(self) -> int:
        return 2 * self.nf

    @property
    def c0(self) -> int:
        return self.t0 + len(self.tap_index)

    @property
    def m0(self) -> int:
        return self.c0 + len(self.cu_keys)

    @property
    def pbar(self) -> int:
        return self.m0 + (len(self.cu_keys) if self.split else 0)

    @property
    def n(self) -> int:
        return self.pbar + (1 if self.has_pbar else 0)


@dataclass
class DmsProblem:
    model: NetworkModel
    setpoints: dict[Key, Setpoint]
    loads: InjectionSet
    strategy: Strategy
    weights: dict[Key, float]
    layout: Layout
    fixed_taps: tuple[float | None, ...]  # per transformer; None means variable

    @property
    def n_vars(self) -> int:
        return self.layout.n


def build_problem(model: NetworkModel, setpoints: dict, loads: InjectionSet | None = None,
                  strategy: Strategy | str = Strategy.L1, weights: dict | None = None, *,
                  fixed_taps: bool = False, split_l1: bool = False) -> DmsProblem:
    """Assemble the curtailment problem.

    ``setpoints`` maps (bus, phase) -> :class:`Setpoint` (or an (oes, ois)
    pair) for every exporting prosumer; prosumers without an entry propose
    zero exchange.  ``loads`` gives consumption at the other node-phases and
    the reactive demand at prosumer node-phases; defaults to the model loads.
    """
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    pros = {p.key: p for p in model.prosumers}
    sp_norm: dict[Key, Setpoint] = {}
    for key, val in setpoints.items():
        if key not in pros:
            raise UnknownProsumer(f"setpoint for {key[0]}.{key[1].value} without a prosumer")
        s = val if isinstance(val, Setpoint) else Setpoint(*val)
        if s.oes_kw < 0 or s.ois_kw < 0:
            raise ValueError(f"negative setpoint at {key[0]}.{key[1].value}")
        sp_norm[key] = s
    for key in pros:
        sp_norm.setdefault(key, Setpoint(0.0, 0.0))
    w = {k: p.weight for k, p in pros.items()}
    for key, val in (weights or {}).items():
        if key not in pros:
            raise UnknownProsumer(f"weight for {key[0]}.{key[1].value} without a prosumer")
        if val <= 0:
            raise ValueError("curtailment weights must be positive")
        w[key] = float(val)
    loads = loads if loads is not None else InjectionSet.from_loads(model)
    loads.check(model)
    taps: list[float | None] = []
    for tr in model.transformers:
        if tr.tap_fixed is not None:
            taps.append(tr.tap_fixed)
        elif fixed_taps or tr.tap_min == tr.tap_max:
            taps.append(tr.tap_mid)
        else:
            taps.append(None)
    nf = sum(len(b.phases) for b in model.buses if b.id != model.slack.id)
    cu_keys = tuple(p.key for p in model.prosumers if sp_norm[p.key].oes_kw > 0)
    layout = Layout(nf, tuple(k for k, t in enumerate(taps) if t is None), cu_keys,
                    split_l1 and strategy is Strategy.L1, strategy is Strategy.LINF)
    return DmsProblem(model, sp_norm, loads, strategy, w, layout, tuple(taps))


# ---------------------------------------------------------------------------
# NLP callbacks


def _rating_local(ap, bp, as_, bs, t, y2):
    """Value, gradient and Hessian of |V_p|^2 |y|^2 |V_p/t^2 - V_s/t|^2 over
    the local variables (ap, bp, as, bs, t)."""
    ur = ap / t ** 2 - as_ / t
    ui = bp / t ** 2 - bs / t
    gur = np.array([1 / t ** 2, 0.0, -1 / t, 0.0, -2 * ap / t ** 3 + as_ / t ** 2])
    gui = np.array([0.0, 1 / t ** 2, 0.0, -1 / t, -2 * bp / t ** 3 + bs / t ** 2])
    hur = np.zeros((5, 5))
    hur[0, 4] = hur[4, 0] = -2 / t ** 3
    hur[2, 4] = hur[4, 2] = 1 / t ** 2
    hur[4, 4] = 6 * ap / t ** 4 - 2 * as_ / t ** 3
    hui = np.zeros((5, 5))
    hui[1, 4] = hui[4, 1] = -2 / t ** 3
    hui[3, 4] = hui[4, 3] = 1 / t ** 2
    hui[4, 4] = 6 * bp / t ** 4 - 2 * bs / t ** 3
    U = ur * ur + ui * ui
    gU = 2 * ur * gur + 2 * ui * gui
    hU = 2 * (np.outer(gur, gur) + np.outer(gui, gui) + ur * hur + ui * hui)
    A = ap * ap + bp * bp
    gA = np.array([2 * ap, 2 * bp, 0.0, 0.0, 0.0])
    hA = np.diag([2.0, 2.0, 0.0, 0.0, 0.0])
    val = y2 * A * U
    grad = y2 * (U * gA + A * gU)
    hess = y2 * (U * hA + A * hU + np.outer(gA, gU) + np.outer(gU, gA))
    return val, grad, hess


class _Callbacks:
    """Evaluates objective and constraints of a :class:`DmsProblem`."""

    def __init__(self, prob: DmsProblem):
        self.prob = prob
        model = prob.model
        lay = prob.layout
        self.eq = eq = KclEquations(model)
        self.nodes = eq.nodes
        self.index = {k: i for i, k in enumerate(eq.nodes)}
        self.n = lay.n
        nf = eq.nf
        base = model.s_base_kva
        # base consumption: loads everywhere, prosumer P replaced by OIS - OES
        P, Q = per_unit_injections(model, eq.nodes, prob.loads.values)
        for key, s in prob.setpoints.items():
            P[self.index[key]] = (s.ois_kw - s.oes_kw) / base
        self.P0, self.Q = P, Q
        self.oes_pu = np.array([prob.setpoints[k].oes_kw / base for k in lay.cu_keys])
        self.w = np.array([prob.weights[k] for k in lay.cu_keys])
        self.tap_cols = {k: i for i, k in enumerate(lay.tap_index)}
        # free-node P as a linear map of the variables: P_free = P0_free + T_P x
        rows, cols, vals = [], [], []
        for i, key in enumerate(lay.cu_keys):
            r = eq.pos[self.index[key]]
            rows.append(r), cols.append(lay.c0 + i), vals.append(1.0)
            if lay.split:
                rows.append(r), cols.append(lay.m0 + i), vals.append(-1.0)
        self.T_P = sp.csr_matrix((vals, (rows, cols)), shape=(nf, self.n))
        # embedding of the KCL Hessian space [a, b, taps, P_free] into x
        ext = 2 * nf + len(lay.tap_index)
        top = sp.hstack([sp.identity(ext, format="csr"),
                         sp.csr_matrix((ext, self.n - ext))], format="csr")
        self.T_ext = sp.vstack([top, self.T_P], format="csr")
        self.p_offset = ext
        self._build_lines()
        self._build_inequality_structure()

    # ----------------------------------------------------------- line currents
    def _build_lines(self):
        model, eq = self.prob.model, self.eq
        rows, cols, vals, imax = [], [], [], []
        self.line_names = []
        r = 0
        for li, ln in enumerate(model.lines):
            y = line_pu_block(model, ln)
            fi = [self.index[(ln.from_bus, p)] for p in ln.phases]
            ti = [self.index[(ln.to_bus, p)] for p in ln.phases]
            ib = model.i_base(ln.from_bus)
            for a, ph in enumerate(ln.phases):
                for b in range(len(ln.phases)):
                    rows += [r, r]
                    cols += [fi[b], ti[b]]
                    vals += [y[a, b], -y[a, b]]
                imax.append(ln.i_max_amps[a] / ib)
                self.line_names.append(f"ampacity[line {li} {ln.from_bus}-{ln.to_bus}.{ph.value}]")
                r += 1
        C = sp.csr_matrix((np.asarray(vals, dtype=complex), (rows, cols)),
                          shape=(r, len(self.nodes)))
        Cf = C[:, eq.free]
        self.c_const = C[:, eq.slack_idx] @ eq.v_slack if r else np.zeros(0, complex)
        pad = sp.csr_matrix((r, self.n - 2 * eq.nf))
        self.Kr = sp.hstack([Cf.real, -Cf.imag, pad], format="csr")
        self.Ki = sp.hstack([Cf.imag, Cf.real, pad], format="csr")
        self.imax2 = np.asarray(imax) ** 2

    def _build_inequality_structure(self):
        prob, lay, eq = self.prob, self.prob.layout, self.eq
        model = prob.model
        names, bounds = [], {}
        free_nodes = [self.nodes[i] for i in eq.free]
        vmin = np.array([model.bus(b).v_min_pu for b, _ in free_nodes])
        vmax = np.array([model.bus(b).v_max_pu for b, _ in free_nodes])
        self.vmin2, self.vmax2 = vmin ** 2, vmax ** 2
        names += [f"vmin[{b}.{p.value}]" for b, p in free_nodes]
        names += [f"vmax[{b}.{p.value}]" for b, p in free_nodes]
        names += self.line_names
        # transformer ratings, one row per phase
        self.ratings = []
        for k, tr in enumerate(model.transformers):
            y = transformer_pu_y(model, tr)
            smax = tr.s_max_kva / 3.0 / model.s_base_kva
            for p in tr.phases:
                f, s = self.index[(tr.from_bus, p)], self.index[(tr.to_bus, p)]
                self.ratings.append((k, f, s, abs(y) ** 2, smax ** 2))
                names.append(f"rating[xfmr {k} {tr.from_bus}-{tr.to_bus}.{p.value}]")
        # linear rows: A x <= ub
        lin_rows, lin_cols, lin_vals, ub = [], [], [], []
        r = 0

        def add(coefs, rhs, name, bound=None):
            nonlocal r
            for c, v in coefs:
                lin_rows.append(r), lin_cols.append(c), lin_vals.append(v)
            ub.append(rhs)
            names.append(name)
            if bound is not None:
                bounds[r] = bound
            r += 1

        for i, k in enumerate(lay.tap_index):
            tr = model.transformers[k]
            col = lay.t0 + i
            add([(col, 1.0)], tr.tap_max, f"tap_max[xfmr {k}]", (col, tr.tap_max))
            add([(col, -1.0)], -tr.tap_min, f"tap_min[xfmr {k}]", (col, tr.tap_min))
        for i, key in enumerate(lay.cu_keys):
            lbl = f"{key[0]}.{key[1].value}"
            c = lay.c0 + i
            if lay.split:
                m = lay.m0 + i
                add([(c, -1.0)], 0.0, f"cu_plus_min[{lbl}]", (c, 0.0))
                add([(m, -1.0)], 0.0, f"cu_minus_min[{lbl}]", (m, 0.0))
                add([(c, -1.0), (m, 1.0)], 0.0, f"cu_min[{lbl}]")
                add([(c, 1.0), (m, -1.0)], self.oes_pu[i], f"cu_max[{lbl}]")
            else:
                add([(c, -1.0)], 0.0, f"cu_min[{lbl}]", (c, 0.0))
                add([(c, 1.0)], self.oes_pu[i], f"cu_max[{lbl}]", (c, self.oes_pu[i]))
            if lay.has_pbar:
                add([(c, self.w[i]), (lay.pbar, -1.0)], 0.0, f"cu_bound[{lbl}]")
        if lay.has_pbar:
            add([(lay.pbar, -1.0)], 0.0, "pbar_min", (lay.pbar, 0.0))
        self.A_lin = sp.csr_matrix((lin_vals, (lin_rows, lin_cols)), shape=(r, self.n))
        self.ub_lin = np.asarray(ub, dtype=float)
        n_nonlin = 2 * eq.nf + len(self.line_names) + len(self.ratings)
        self.bound_rows = {n_nonlin + row: b for row, b in bounds.items()}
        self.ineq_names = names
        self.eq_names = ([f"kcl_re[{b}.{p.value}]" for b, p in free_nodes]
                         + [f"kcl_im[{b}.{p.value}]" for b, p in free_nodes])

    # ------------------------------------------------------------ unpacking
    def split(self, x):
        lay, nf = self.prob.layout, self.eq.nf
        v = self.eq.full_voltage(x[:nf], x[nf:2 * nf])
        taps = np.array([t if t is not None else x[lay.t0 + self.tap_cols[k]]
                         for k, t in enumerate(self.prob.fixed_taps)], dtype=float)
        P = self.P0.copy()
        P[self.eq.free] += self.T_P @ x
        return v, taps, P

    def pack(self, v, taps, cu, minus=None, pbar=None):
        lay, eq = self.prob.layout, self.eq
        x = np.zeros(self.n)
        x[:eq.nf] = v[eq.free].real
        x[eq.nf:2 * eq.nf] = v[eq.free].imag
        for k, i in self.tap_cols.items():
            x[lay.t0 + i] = taps[k]
        x[lay.c0:lay.m0] = cu
        if lay.split:
            x[lay.m0:lay.pbar] = 0.0 if minus is None else minus
        if lay.has_pbar:
            x[lay.pbar] = pbar
        return x

    # ------------------------------------------------------------ objective
    def f(self, x):
        lay = self.prob.layout
        cu = x[lay.c0:lay.m0]
        if self.prob.strategy is Strategy.L1:
            total = self.w @ cu
            if lay.split:
                total += self.w @ x[lay.m0:lay.pbar]
            return float(total)
        if self.prob.strategy is Strategy.L2:
            return float(self.w @ (cu * cu))
        return float(x[lay.pbar])

    def grad(self, x):
        lay = self.prob.layout
        gr = np.zeros(self.n)
        if self.prob.strategy is Strategy.L1:
            gr[lay.c0:lay.m0] = self.w
            if lay.split:
                gr[lay.m0:lay.pbar] = self.w
        elif self.prob.strategy is Strategy.L2:
            gr[lay.c0:lay.m0] = 2.0 * self.w * x[lay.c0:lay.m0]
        else:
            gr[lay.pbar] = 1.0
        return gr

    # ------------------------------------------------------------ equalities
    def g(self, x):
        v, taps, P = self.split(x)
        return self.eq.residual(v, P, self.Q, taps)

    def jac_g(self, x):
        v, taps, P = self.split(x)
        eq, nf = self.eq, self.eq.nf
        Jv = eq.jacobian_v(v, P, self.Q, taps)
        Jt = eq.jacobian_t(v, taps, self.tap_cols)
        Jp = eq.jacobian_p(v) @ self.T_P
        rest = sp.csr_matrix((2 * nf, self.n - 2 * nf - Jt.shape[1]))
        return (sp.hstack([Jv, Jt, rest], format="csr") + Jp).tocsr()

    # ---------------------------------------------------------- inequalities
    def _line_currents(self, x):
        ir = self.Kr @ x + self.c_const.real
        ii = self.Ki @ x + self.c_const.imag
        return ir, ii

    def _rating_terms(self, x):
        v, taps, _ = self.split(x)
        eq, lay = self.eq, self.prob.layout
        out = []
        for k, f, s, y2, smax2 in self.ratings:
            val, grad, hess = _rating_local(v[f].real, v[f].imag, v[s].real, v[s].imag, taps[k], y2)
            cols = [eq.pos[f] if not eq.is_slack[f] else -1,
                    eq.nf + eq.pos[f] if not eq.is_slack[f] else -1,
                    eq.pos[s] if not eq.is_slack[s] else -1,
                    eq.nf + eq.pos[s] if not eq.is_slack[s] else -1,
                    lay.t0 + self.tap_cols[k] if k in self.tap_cols else -1]
            out.append((val / smax2, grad / smax2, hess / smax2, np.asarray(cols)))
        return out

    def h(self, x):
        nf = self.eq.nf
        a, b = x[:nf], x[nf:2 * nf]
        vm2 = a * a + b * b
        ir, ii = self._line_currents(x)
        line = (ir * ir + ii * ii - self.imax2) / self.imax2
        rating = np.array([val - 1.0 for val, *_ in self._rating_terms(x)])
        lin = self.A_lin @ x - self.ub_lin
        return np.concatenate([self.vmin2 - vm2, vm2 - self.vmax2, line, rating, lin])

    def jac_h(self, x):
        nf, n = self.eq.nf, self.n
        a, b = x[:nf], x[nf:2 * nf]
        idx = np.arange(nf)
        Jv_hi = sp.csr_matrix((np.concatenate([2 * a, 2 * b]),
                               (np.concatenate([idx, idx]), np.concatenate([idx, idx + nf]))),
                              shape=(nf, n))
        ir, ii = self._line_currents(x)
        Jl = (sp.diags(2 * ir / self.imax2) @ self.Kr + sp.diags(2 * ii / self.imax2) @ self.Ki)
        rows, cols, vals = [], [], []
        for r, (_, grad, _, c) in enumerate(self._rating_terms(x)):
            keep = c >= 0
            rows += [r] * int(keep.sum())
            cols += list(c[keep])
            vals += list(grad[keep])
        Jr = sp.csr_matrix((vals, (rows, cols)), shape=(len(self.ratings), n))
        return sp.vstack([-Jv_hi, Jv_hi, Jl, Jr, self.A_lin], format="csr")

    # --------------------------------------------------------------- hessian
    def hess(self, x, lam, mu):
        eq, nf, n, lay = self.eq, self.eq.nf, self.n, self.prob.layout
        v, taps, P = self.split(x)
        r, c, val = eq.hessian(v, P, self.Q, taps, lam, self.tap_cols, n,
                               p_offset=self.p_offset, t_offset=lay.t0)
        ext = self.p_offset + nf
        H = sp.csr_matrix((val, (r, c)), shape=(ext, ext))
        H = (self.T_ext.T @ H @ self.T_ext).tocsr()
        mu_lo, mu_hi = mu[:nf], mu[nf:2 * nf]
        d = 2.0 * (mu_hi - mu_lo)
        H = H + sp.diags(np.concatenate([d, d, np.zeros(n - 2 * nf)]))
        nl = len(self.imax2)
        if nl:
            wl = 2.0 * mu[2 * nf:2 * nf + nl] / self.imax2
            H = H + self.Kr.T @ sp.diags(wl) @ self.Kr + self.Ki.T @ sp.diags(wl) @ self.Ki
        mu_r = mu[2 * nf + nl:2 * nf + nl + len(self.ratings)]
        rows, cols, vals = [], [], []
        for m_r, (_, _, hl, cl) in zip(mu_r, self._rating_terms(x)):
            keep = np.flatnonzero(cl >= 0)
            for i in keep:
                for j in keep:
                    rows.append(cl[i]), cols.append(cl[j]), vals.append(m_r * hl[i, j])
        if rows:
            H = H + sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        if self.prob.strategy is Strategy.L2:
            dd = np.zeros(n)
            dd[lay.c0:lay.m0] = 2.0 * self.w
            H = H + sp.diags(dd)
        return H.tocsr()

    def nlp(self) -> ipm.Nlp:
        return ipm.Nlp(self.n, self.f, self.grad, self.g, self.jac_g, self.h, self.jac_h, self.hess,
                       self.eq_names, self.ineq_names, self.bound_rows)


# ---------------------------------------------------------------------------
# solution


@dataclass
class DmsSolution:
    strategy: Strategy
    oes_kw: dict[Key, float]
    p_cu_kw: dict[Key, float]
    aes_kw: dict[Key, float]
    voltages: VoltageSolution
    taps: tuple[float, ...]
    flows: BranchFlows
    objective: float
    kkt_residual: float
    feasibility: float
    complementarity: float
    iterations: int
    polished: bool
    solve_time: float
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    pbar_kw: float | None = None

    @property
    def net_curtailed_kw(self) -> float:
        return float(sum(self.p_cu_kw.values()))

    @property
    def max_curtailed_kw(self) -> float:
        return float(max(self.p_cu_kw.values(), default=0.0))

    @property
    def adjusted_count(self) -> int:
        return sum(1 for v in self.p_cu_kw.values() if v > ADJUSTED_KW)


def uncurtailed_injections(prob: DmsProblem) -> InjectionSet:
    """Consumption per node-phase with every OES honoured (no curtailment)."""
    cb_vals = dict(prob.loads.values)
    for key, s in prob.setpoints.items():
        q = prob.loads.values.get(key, (0.0, 0.0))[1]
        cb_vals[key] = (s.ois_kw - s.oes_kw, q)
    return InjectionSet(cb_vals)


def initial_taps(prob: DmsProblem) -> tuple[float, ...]:
    return tuple(t if t is not None else prob.model.transformers[k].tap_mid
                 for k, t in enumerate(prob.fixed_taps))


def _warm_start(prob: DmsProblem, cb: _Callbacks, opts: DmsOptions) -> np.ndarray:
    lay = prob.layout
    taps = initial_taps(prob)
    frac = opts.init_fraction
    cu = frac * cb.oes_pu
    vals = dict(uncurtailed_injections(prob).values)
    base = prob.model.s_base_kva
    for i, key in enumerate(lay.cu_keys):
        p, q = vals[key]
        vals[key] = (p + cu[i] * base, q)
    try:
        v = solve_powerflow(prob.model, InjectionSet(vals), taps=taps, eq=cb.eq).v
    except PowerFlowError:
        v = cb.eq.flat_start()
    pbar = 1.01 * float(np.max(cb.w * cu)) + 1e-6 if len(cu) else 1e-3
    return cb.pack(v, taps, cu, np.zeros(len(cu)) if lay.split else None, pbar)


def solve_dms(prob: DmsProblem, opts: DmsOptions | None = None) -> DmsSolution:
    """Solve the curtailment NLP with the primal-dual interior-point method."""
    opts = opts or DmsOptions()
    t_start = time.perf_counter()
    cb = _Callbacks(prob)
    x0 = _warm_start(prob, cb, opts)
    try:
        res = ipm.solve(cb.nlp(), x0, opts.solver_options(prob.strategy))
    except ipm.LocallyInfeasible as exc:
        raise LocallyInfeasible(str(exc), exc.constraint, exc.violation) from None
    except ipm.NonConvergence as exc:
        raise NonConvergence(str(exc), exc.result) from None
    return _make_solution(prob, cb, res, time.perf_counter() - t_start)


def _make_solution(prob, cb: _Callbacks, res: ipm.IpmResult, elapsed: float) -> DmsSolution:
    lay, model = prob.layout, prob.model
    base = model.s_base_kva
    x = res.x.copy()
    if lay.has_pbar:
        # the epigraph bound only needs to cover the largest weighted curtailment
        x[lay.pbar] = max(float(np.max(cb.w * x[lay.c0:lay.m0], initial=0.0)), 0.0)
    v, taps, P = cb.split(x)
    cu = x[lay.c0:lay.m0] - (x[lay.m0:lay.pbar] if lay.split else 0.0)
    p_cu = {k: 0.0 for k in prob.setpoints}
    for i, key in enumerate(lay.cu_keys):
        # clip rounding-level excursions; the bounds hold to solver tolerance
        p_cu[key] = float(min(max(cu[i], 0.0), cb.oes_pu[i]) * base)
    oes = {k: s.oes_kw for k, s in prob.setpoints.items()}
    aes = {k: oes[k] - p_cu[k] for k in oes}
    vs = VoltageSolution(cb.nodes, v, res.iterations,
                         float(np.abs(cb.eq.residual(v, P, cb.Q, taps)).max(initial=0.0)),
                         tuple(float(t) for t in taps), P, cb.Q.copy())
    return DmsSolution(prob.strategy, oes, p_cu, aes, vs, vs.taps, compute_branch_flows(model, vs),
                       cb.f(x), res.stationarity, res.feasibility, res.complementarity,
                       res.iterations, res.polished, elapsed, x, res.lam, res.mu,
                       float(x[lay.pbar] * base) if lay.has_pbar else None)


def adjusted_setpoints(sol: DmsSolution) -> dict[Key, float]:
    """AES = OES - P_cu for every prosumer; equals OES when nothing is curtailed."""
    return {k: sol.oes_kw[k] - sol.p_cu_kw[k] for k in sol.oes_kw}


# ---------------------------------------------------------------------------
# independent certificate


def independent_constraints(prob: DmsProblem, x: np.ndarray):
    """Objective, equality and inequality values at ``x`` recomputed branch by
    branch in complex arithmetic, in the solver's row order and scaling."""
    model, lay = prob.model, prob.layout
    base = model.s_base_kva
    nodes = model.node_phases()
    index = {k: i for i, k in enumerate(nodes)}
    slack = model.slack.id
    free = [i for i, (b, _) in enumerate(nodes) if b != slack]
    nf = len(free)
    v = np.array([model.slack_vpu * np.exp(1j * ph.angle) for _, ph in nodes])
    v[free] = x[:nf] + 1j * x[nf:2 * nf]
    taps = list(initial_taps(prob))
    for i, k in enumerate(lay.tap_index):
        taps[k] = x[lay.t0 + i]
    cu = x[lay.c0:lay.m0]
    minus = x[lay.m0:lay.pbar] if lay.split else np.zeros(len(cu))
    cu_of = {key: (cu[i], minus[i]) for i, key in enumerate(lay.cu_keys)}
    P = np.zeros(len(nodes))
    Q = np.zeros(len(nodes))
    for key, (p, q) in prob.loads.values.items():
        P[index[key]] += p / base
        Q[index[key]] += q / base
    for key, s in prob.setpoints.items():
        plus, neg = cu_of.get(key, (0.0, 0.0))
        P[index[key]] = (s.ois_kw - s.oes_kw) / base + plus - neg
    sol = VoltageSolution(tuple(nodes), v, 0, 0.0, tuple(taps), P, Q)
    r = kcl_residual(model, sol)
    g = np.concatenate([r.real, r.imag])
    vm2 = np.abs(v[free]) ** 2
    vmin2 = np.array([model.bus(nodes[i][0]).v_min_pu ** 2 for i in free])
    vmax2 = np.array([model.bus(nodes[i][0]).v_max_pu ** 2 for i in free])
    flows = compute_branch_flows(model, sol)
    line = []
    for lf, ln in zip(flows.lines, model.lines):
        line += list((lf.current_amps ** 2 - np.asarray(ln.i_max_amps) ** 2)
                     / np.asarray(ln.i_max_amps) ** 2)
    rating = []
    for tf, tr in zip(flows.transformers, model.transformers):
        smax = tr.s_max_kva / 3.0
        rating += list((tf.p_kw ** 2 + tf.q_kvar ** 2 - smax ** 2) / smax ** 2)
    lin = []
    for i, k in enumerate(lay.tap_index):
        tr = model.transformers[k]
        lin += [taps[k] - tr.tap_max, tr.tap_min - taps[k]]
    w = np.array([prob.weights[k] for k in lay.cu_keys])
    for i, key in enumerate(lay.cu_keys):
        oes = prob.setpoints[key].oes_kw / base
        if lay.split:
            lin += [-cu[i], -minus[i], -(cu[i] - minus[i]), cu[i] - minus[i] - oes]
        else:
            lin += [-cu[i], cu[i] - oes]
        if lay.has_pbar:
            lin.append(w[i] * cu[i] - x[lay.pbar])
    if lay.has_pbar:
        lin.append(-x[lay.pbar])
    h = np.concatenate([vmin2 - vm2, vm2 - vmax2, np.asarray(line), np.asarray(rating),
                        np.asarray(lin)])
    if prob.strategy is Strategy.L1:
        f = float(w @ cu + (w @ minus if lay.split else 0.0))
    elif prob.strategy is Strategy.L2:
        f = float(w @ (cu * cu))
    else:
        f = float(x[lay.pbar])
    return f, g, h


@dataclass
class Certificate:
    max_violation: float
    worst_constraint: str
    stationarity: float
    complementarity: float

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max_violation <= tol and self.stationarity <= tol and self.complementarity <= tol


def _column_groups(pattern: sp.csc_matrix) -> list[list[int]]:
    """Greedy colouring: columns in one group share no nonzero row."""
    groups: list[list[int]] = []
    used: list[set] = []
    for j in range(pattern.shape[1]):
        rows = set(pattern.indices[pattern.indptr[j]:pattern.indptr[j + 1]])
        for grp, seen in zip(groups, used):
            if not rows & seen:
                grp.append(j)
                seen |= rows
                break
        else:
            groups.append([j])
            used.append(set(rows))
    return groups


def certify(prob: DmsProblem, sol: DmsSolution, step: float = 1e-6, s_max: float = 100.0) -> Certificate:
    """Re-evaluate every constraint independently and measure KKT stationarity
    from a central-difference Jacobian of those values.  Columns are grouped
    using the solver's sparsity pattern (only the pattern, never its values);
    a missing pattern entry would show up as a stationarity error."""
    cb = _Callbacks(prob)
    x, lam, mu = sol.x, sol.lam, sol.mu
    f, g, h = independent_constraints(prob, x)
    names = cb.eq_names + cb.ineq_names
    viol = np.concatenate([np.abs(g), np.maximum(h, 0.0)])
    worst = int(np.argmax(viol)) if len(viol) else 0

    def values(xx):
        ff, gg, hh = independent_constraints(prob, xx)
        return np.concatenate([[ff], gg, hh])

    obj_row = np.zeros((1, len(x)))
    obj_row[0, prob.layout.c0:] = 1.0  # the objective only touches curtailment columns
    pattern = sp.vstack([sp.csr_matrix(obj_row), cb.jac_g(x), cb.jac_h(x)]).tocsc()
    pattern.data[:] = 1.0
    weights = np.concatenate([[1.0], lam, mu])
    grad = np.zeros(len(x))
    for grp in _column_groups(pattern):
        e = np.zeros(len(x))
        e[grp] = step
        d = (values(x + e) - values(x - e)) / (2 * step)
        for j in grp:
            rows = pattern.indices[pattern.indptr[j]:pattern.indptr[j + 1]]
            grad[j] = weights[rows] @ d[rows]
    m, p = len(g), len(h)
    s_d = max(s_max, (np.abs(lam).sum() + np.abs(mu).sum()) / max(m + p, 1)) / s_max
    s_c = max(s_max, np.abs(mu).sum() / max(p, 1)) / s_max
    comp = float(np.abs(np.maximum(-h, 0.0) * mu).max(initial=0.0) / s_c)
    return Certificate(float(viol.max(initial=0.0)), names[worst] if len(names) else "",
                       float(np.abs(grad).max(initial=0.0) / s_d), comp)


# ---------------------------------------------------------------------------
# reporting


def count_violations(model: NetworkModel, sol: VoltageSolution, flows: BranchFlows | None = None,
                     tol: float = 1e-6) -> int:
    """Number of violated voltage, ampacity and transformer-rating bounds."""
    flows = flows or compute_branch_flows(model, sol)
    n = 0
    for (bus, _), x in zip(sol.nodes, sol.v):
        b = model.bus(bus)
        m = abs(x)
        n += int(m < b.v_min_pu - tol) + int(m > b.v_max_pu + tol)
    for lf in flows.lines:
        n += int(np.sum(lf.loading > 1 + tol))
    for tf in flows.transformers:
        n += int(np.sum(tf.loading > 1 + tol))
    return n


def summary_line(sol: DmsSolution) -> str:
    if sol.adjusted_count == 0:
        return "no curtailment needed"
    return (f"Net. Curtailed Power (kW): {sol.net_curtailed_kw:.4f}; "
            f"Maximum Curtailed power (kW): {sol.max_curtailed_kw:.4f}; "
            f"# Load Buses Adjusted: {sol.adjusted_count}")


def solution_to_dict(prob: DmsProblem, sol: DmsSolution) -> dict:
    model = prob.model
    pros = []
    for p in model.prosumers:
        k = p.key
        pros.append({"bus": p.bus, "phase": p.phase.value, "oes_kw": sol.oes_kw[k],
                     "p_cu_kw": sol.p_cu_kw[k], "aes_kw": sol.aes_kw[k]})
    volts = [{"bus": b, "phase": ph.value, "v_real": x.real, "v_imag": x.imag, "v_mag_pu": abs(x)}
             for (b, ph), x in zip(sol.voltages.nodes, sol.voltages.v)]
    branches = []
    for lf, ln in zip(sol.flows.lines, model.lines):
        branches.append({"type": "line", "from_bus": ln.from_bus, "to_bus": ln.to_bus,
                         "loading": [float(v) for v in lf.loading]})
    for tf, tr in zip(sol.flows.transformers, model.transformers):
        branches.append({"type": "transformer", "from_bus": tr.from_bus, "to_bus": tr.to_bus,
                         "tap": tf.tap, "loading": [float(v) for v in tf.loading]})
    return {
        "strategy": sol.strategy.value,
        "prosumers": pros,
        "voltages": volts,
        "branches": branches,
        "taps": list(sol.taps),
        "summary": {"net_curtailed_kw": sol.net_curtailed_kw,
                    "max_curtailed_kw": sol.max_curtailed_kw,
                    "buses_adjusted": sol.adjusted_count},
        "diagnostics": {"objective": sol.objective, "iterations": sol.iterations,
                        "kkt_residual": sol.kkt_residual, "feasibility": sol.feasibility,
                        "complementarity": sol.complementarity, "polished": sol.polished,
                        "solve_time_s": sol.solve_time},
    }


def solution_to_json(prob: DmsProblem, sol: DmsSolution) -> str:
    return json.dumps(solution_to_dict(prob, sol), indent=2)
