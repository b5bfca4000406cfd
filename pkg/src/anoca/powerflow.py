"""Three-phase Newton power flow in rectangular coordinates."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kcl import KclEquations, per_unit_injections
from .network import NetworkModel, Phase, line_pu_block, transformer_pu_y

V_FLOOR = 0.3


class PowerFlowError(Exception):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, message: str, best: "VoltageSolution | None" = None):
        super().__init__(message)
        self.best = best


class SingularJacobian(PowerFlowError):
    def __init__(self, node: tuple[str, Phase]):
        super().__init__(f"singular Jacobian at node {node[0]}.{node[1].value}")
        self.node = node


class VoltageCollapse(NonConvergence):
    pass


@dataclass(frozen=True)
class InjectionSet:
    """Net consumption per node-phase in kW / kvar (load positive)."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_loads(cls, model: NetworkModel, scale: float = 1.0) -> "InjectionSet":
        return cls({k: (p * scale, q * scale) for k, (p, q) in model.load_by_phase().items()})

    def check(self, model: NetworkModel) -> None:
        present = set(model.node_phases())
        for key in self.values:
            if key not in present:
                raise KeyError(f"injection at {key[0]}.{key[1].value} not present in the model")


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 8


@dataclass
class VoltageSolution:
    nodes: tuple[tuple[str, Phase], ...]
    v: np.ndarray  # complex per-unit, all node-phases including slack
    iterations: int
    max_residual: float
    taps: tuple[float, ...] = ()
    P: np.ndarray | None = None  # per-unit consumption the solution was computed with
    Q: np.ndarray | None = None

    @property
    def v_real(self) -> np.ndarray:
        return self.v.real

    @property
    def v_imag(self) -> np.ndarray:
        return self.v.imag

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    def voltage(self, bus: str, phase: Phase) -> complex:
        return complex(self.v[self.nodes.index((bus, phase))])

    def as_dict(self) -> dict[tuple[str, Phase], complex]:
        return {k: complex(x) for k, x in zip(self.nodes, self.v)}


def default_taps(model: NetworkModel) -> tuple[float, ...]:
    """Fixed taps where given, the midpoint of the tap range otherwise."""
    return tuple(tr.tap_mid if tr.tap_fixed is None else tr.tap_fixed for tr in model.transformers)


def _pivot_node(J: sp.spmatrix, eq: KclEquations) -> tuple[str, Phase]:
    _, _, piv = scipy.linalg.qr(J.toarray(), pivoting=True)
    col = int(piv[-1]) % eq.nf
    return eq.nodes[eq.free[col]]


def _floor(v: np.ndarray, floor: float) -> np.ndarray:
    mag = np.abs(v)
    low = mag < floor
    if low.any():
        v = v.copy()
        v[low] = np.where(mag[low] > 0, v[low] / np.maximum(mag[low], 1e-300) * floor, floor)
    return v


def solve_powerflow(model: NetworkModel, inj: InjectionSet | None = None,
                    opts: SolverOptions | None = None, *, taps=None,
                    v0: np.ndarray | None = None, eq: KclEquations | None = None) -> VoltageSolution:
    """Damped Newton solve of the nodal current balance from a flat start.

    ``iterations`` counts residual evaluations of accepted iterates, so a
    flat start that already satisfies KCL reports one iteration.
    """
    opts = opts or SolverOptions()
    if opts.tol <= 0:
        raise ValueError("tol must be positive")
    inj = inj if inj is not None else InjectionSet.from_loads(model)
    inj.check(model)
    eq = eq or KclEquations(model)
    P, Q = per_unit_injections(model, eq.nodes, inj.values)
    taps = tuple(default_taps(model) if taps is None else taps)
    v = eq.flat_start() if v0 is None else np.array(v0, dtype=complex)
    v[eq.slack_idx] = eq.v_slack

    def res(vv):
        return eq.residual(vv, P, Q, taps)

    F = res(v)
    norm = float(np.abs(F).max()) if F.size else 0.0
    it = 1
    while norm > opts.tol:
        if it > opts.max_iter:
            best = VoltageSolution(eq.nodes, v, it - 1, norm, taps, P, Q)
            raise NonConvergence(f"no convergence after {opts.max_iter} iterations; "
                                 f"best max residual {norm:.3e}", best)
        J = eq.jacobian_v(v, P, Q, taps)
        try:
            lu = spla.splu(J.tocsc())
            dx = lu.solve(-F)
            dx += lu.solve(-F - J @ dx)  # one step of iterative refinement
        except RuntimeError:
            raise SingularJacobian(_pivot_node(J, eq)) from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian(_pivot_node(J, eq))
        step = dx[:eq.nf] + 1j * dx[eq.nf:]
        l2 = np.linalg.norm(F)
        best_v, best_F, best_l2 = None, None, math.inf
        alpha = 1.0
        for _ in range(opts.max_halvings + 1):
            trial = v.copy()
            trial[eq.free] += alpha * step
            trial = _floor(trial, V_FLOOR)
            Ft = res(trial)
            lt = np.linalg.norm(Ft)
            if lt < best_l2:
                best_v, best_F, best_l2 = trial, Ft, lt
            if lt < l2:
                break
            alpha *= 0.5
        v, F = best_v, best_F
        norm = float(np.abs(F).max())
        it += 1
    if np.any(np.abs(v[eq.free]) <= V_FLOOR * (1 + 1e-9)):
        raise VoltageCollapse("solution sits on the 0.3 pu voltage floor",
                              VoltageSolution(eq.nodes, v, it, norm, taps, P, Q))
    return VoltageSolution(eq.nodes, v, it, norm, taps, P, Q)


# ---------------------------------------------------------------------------
# independent checks and derived quantities


def kcl_residual(model: NetworkModel, sol: VoltageSolution) -> np.ndarray:
    """Complex KCL mismatch per non-slack node-phase, summed branch by branch."""
    index = {k: i for i, k in enumerate(sol.nodes)}
    r = np.zeros(len(sol.nodes), dtype=complex)
    v = sol.v
    for ln in model.lines:
        y = line_pu_block(model, ln)
        fi = [index[(ln.from_bus, p)] for p in ln.phases]
        ti = [index[(ln.to_bus, p)] for p in ln.phases]
        i_ft = y @ (v[fi] - v[ti])
        r[fi] += i_ft
        r[ti] -= i_ft
    for k, tr in enumerate(model.transformers):
        y = transformer_pu_y(model, tr)
        t = sol.taps[k]
        for p in tr.phases:
            f, s = index[(tr.from_bus, p)], index[(tr.to_bus, p)]
            r[f] += y * (v[f] / t ** 2 - v[s] / t)
            r[s] += y * (v[s] - v[f] / t)
    for i in range(len(v)):
        if sol.P[i] != 0 or sol.Q[i] != 0:
            r[i] += np.conj(complex(sol.P[i], sol.Q[i]) / v[i])
    slack = model.slack.id
    return np.array([r[i] for i, (bus, _) in enumerate(sol.nodes) if bus != slack])


def max_kcl_residual(model: NetworkModel, sol: VoltageSolution) -> float:
    r = kcl_residual(model, sol)
    return float(max(np.abs(r.real).max(initial=0.0), np.abs(r.imag).max(initial=0.0)))


@dataclass
class LineFlow:
    index: int
    phases: tuple[Phase, ...]
    current_pu: np.ndarray  # complex, from-terminal, per phase
    current_amps: np.ndarray
    loading: np.ndarray  # |I| / ampacity


@dataclass
class TransformerFlow:
    index: int
    phases: tuple[Phase, ...]
    tap: float
    current_pu: np.ndarray
    p_kw: np.ndarray  # from-terminal, per phase
    q_kvar: np.ndarray
    loading: np.ndarray  # |S| / (s_max / 3)


@dataclass
class BranchFlows:
    lines: list[LineFlow]
    transformers: list[TransformerFlow]


def compute_branch_flows(model: NetworkModel, sol: VoltageSolution) -> BranchFlows:
    index = {k: i for i, k in enumerate(sol.nodes)}
    v = sol.v
    lines = []
    for k, ln in enumerate(model.lines):
        y = line_pu_block(model, ln)
        fi = [index[(ln.from_bus, p)] for p in ln.phases]
        ti = [index[(ln.to_bus, p)] for p in ln.phases]
        i_pu = y @ (v[fi] - v[ti])
        amps = np.abs(i_pu) * model.i_base(ln.from_bus)
        lines.append(LineFlow(k, ln.phases, i_pu, amps, amps / np.asarray(ln.i_max_amps)))
    trs = []
    for k, tr in enumerate(model.transformers):
        y = transformer_pu_y(model, tr)
        t = sol.taps[k]
        fi = np.array([index[(tr.from_bus, p)] for p in tr.phases])
        si = np.array([index[(tr.to_bus, p)] for p in tr.phases])
        i_pu = y * (v[fi] / t ** 2 - v[si] / t)
        s = v[fi] * np.conj(i_pu) * model.s_base_kva
        trs.append(TransformerFlow(k, tr.phases, t, i_pu, s.real, s.imag,
                                   np.abs(s) / (tr.s_max_kva / 3.0)))
    return BranchFlows(lines, trs)


def gauss_seidel(model: NetworkModel, inj: InjectionSet | None = None, *, taps=None,
                 tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Bus-block Gauss-Seidel on the current-injection fixed point.

    Each sweep solves ``Y_nn V_n = -sum_m Y_nm V_m - conj(S_n / V_n)`` for the
    phases of one bus at a time.  Returns complex per-unit voltages in node
    order; slow but simple, intended as an oracle on small networks.
    """
    from .network import assemble_admittance

    inj = inj if inj is not None else InjectionSet.from_loads(model)
    adm = assemble_admittance(model)
    taps = dict(enumerate(default_taps(model) if taps is None else taps))
    Y = adm.complex_matrix(taps).toarray()
    nodes = adm.nodes
    S = np.zeros(len(nodes), dtype=complex)
    index = {k: i for i, k in enumerate(nodes)}
    for key, (p, q) in inj.values.items():
        S[index[key]] += complex(p, q) / model.s_base_kva
    v = np.array([model.slack_vpu * np.exp(1j * ph.angle) for _, ph in nodes])
    groups = [np.array([index[(b.id, p)] for p in b.phases]) for b in model.buses
              if b.id != model.slack.id]
    for _ in range(max_iter):
        delta = 0.0
        for g in groups:
            rhs = -(Y[g] @ v - Y[np.ix_(g, g)] @ v[g]) - np.conj(S[g] / v[g])
            new = np.linalg.solve(Y[np.ix_(g, g)], rhs)
            delta = max(delta, float(np.abs(new - v[g]).max()))
            v[g] = new
        if delta < tol:
            return v
    raise NonConvergence("Gauss-Seidel did not converge")


def voltages_csv(model: NetworkModel, sol: VoltageSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "phase", "v_real", "v_imag", "v_mag_pu", "v_mag_volts"])
    for (bus, ph), x in zip(sol.nodes, sol.v):
        volts = abs(x) * model.bus(bus).base_kv * 1e3
        w.writerow([bus, ph.value, f"{x.real:.10f}", f"{x.imag:.10f}", f"{abs(x):.10f}", f"{volts:.4f}"])
    return buf.getvalue()
