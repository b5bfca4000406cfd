"""Current-injection KCL equations in rectangular coordinates.

For every non-slack node-phase ``i`` the complex mismatch is

    r_i = sum_j Y_ij V_j + conj(S_i / V_i)

with ``S_i = P_i + j Q_i`` the consumed power (load positive).  The real
equations are ``Re r_i = 0`` and ``Im r_i = 0``.  Transformer stamps depend on
the tap ratio ``t``: primary current ``y (V_p / t^2 - V_s / t)``, secondary
current ``y (V_s - V_p / t)``.

Derivatives use the identity d/da (c V) = c and d/db (c V) = j c for V = a + jb.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .network import NetworkModel, SparseRealAdmittance, assemble_admittance


class KclEquations:
    """Residual, Jacobian and Lagrangian Hessian of the nodal current balance.

    Variable vector seen by callers: ``[a (nf), b (nf)]`` for the non-slack
    node-phases, optionally followed by tap variables and per-node active
    power ``P`` (nf), each handled by dedicated methods.
    """

    def __init__(self, model: NetworkModel, adm: SparseRealAdmittance | None = None):
        self.model = model
        self.adm = adm or assemble_admittance(model)
        self.nodes = self.adm.nodes
        n = len(self.nodes)
        slack_id = model.slack.id
        self.is_slack = np.array([bus == slack_id for bus, _ in self.nodes])
        self.free = np.flatnonzero(~self.is_slack)
        self.slack_idx = np.flatnonzero(self.is_slack)
        self.nf = len(self.free)
        self.pos = -np.ones(n, dtype=int)  # node index -> free position
        self.pos[self.free] = np.arange(self.nf)
        self.v_slack = np.array([model.slack_vpu * np.exp(1j * ph.angle)
                                 for _, ph in (self.nodes[i] for i in self.slack_idx)])
        self.Y = (self.adm.G + 1j * self.adm.B).tocsr()
        self.Yff = self.Y[self.free][:, self.free].tocsr()
        st = self.adm.stamps
        self.s_from = np.array([s.i_from for s in st], dtype=int)
        self.s_to = np.array([s.i_to for s in st], dtype=int)
        self.s_y = np.array([s.y for s in st], dtype=complex)
        self.s_k = np.array([s.index for s in st], dtype=int)
        self.n_tr = len(model.transformers)

    # ------------------------------------------------------------------ state
    def flat_start(self) -> np.ndarray:
        """Nominal phasors (slack magnitude, phase angles 0/-120/+120) at every node."""
        return np.array([self.model.slack_vpu * np.exp(1j * ph.angle) for _, ph in self.nodes])

    def full_voltage(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        v = np.empty(len(self.nodes), dtype=complex)
        v[self.slack_idx] = self.v_slack
        v[self.free] = a + 1j * b
        return v

    def tap_vector(self, taps) -> np.ndarray:
        """Per-stamp tap ratios from a per-transformer sequence."""
        taps = np.asarray(taps, dtype=float)
        return taps[self.s_k] if len(self.s_k) else np.zeros(0)

    # -------------------------------------------------------------- residuals
    def mismatch(self, v: np.ndarray, P: np.ndarray, Q: np.ndarray, taps) -> np.ndarray:
        """Complex mismatch over all nodes; ``P, Q`` are full-length per-unit arrays."""
        r = self.Y @ v
        if len(self.s_y):
            t = self.tap_vector(taps)
            vf, vt = v[self.s_from], v[self.s_to]
            np.add.at(r, self.s_from, self.s_y * (vf / t ** 2 - vt / t))
            np.add.at(r, self.s_to, self.s_y * (vt - vf / t))
        loaded = (P != 0) | (Q != 0)
        r[loaded] += (P[loaded] - 1j * Q[loaded]) / np.conj(v[loaded])
        return r

    def residual(self, v, P, Q, taps) -> np.ndarray:
        r = self.mismatch(v, P, Q, taps)[self.free]
        return np.concatenate([r.real, r.imag])

    # --------------------------------------------------------------- jacobians
    def _linear_ff(self, taps) -> sp.csr_matrix:
        """Complex coefficient matrix of the linear part restricted to free nodes."""
        if not len(self.s_y):
            return self.Yff
        t = self.tap_vector(taps)
        rows = np.concatenate([self.s_from, self.s_from, self.s_to, self.s_to])
        cols = np.concatenate([self.s_from, self.s_to, self.s_from, self.s_to])
        vals = np.concatenate([self.s_y / t ** 2, -self.s_y / t, -self.s_y / t, self.s_y])
        keep = ~self.is_slack[rows] & ~self.is_slack[cols]
        n = self.nf
        ytr = sp.csr_matrix((vals[keep], (self.pos[rows[keep]], self.pos[cols[keep]])), shape=(n, n))
        return (self.Yff + ytr).tocsr()

    def load_partials(self, v, P, Q):
        """d(conj(S/V))/da, /db and /dP at the free nodes (complex arrays)."""
        vf = v[self.free]
        sbar = P[self.free] - 1j * Q[self.free]
        wbar = np.conj(vf)
        return -sbar / wbar ** 2, 1j * sbar / wbar ** 2, 1.0 / wbar

    def jacobian_v(self, v, P, Q, taps) -> sp.csr_matrix:
        """Sparse 2nf x 2nf Jacobian of the residual w.r.t. (a, b)."""
        A = self._linear_ff(taps)
        da, db, _ = self.load_partials(v, P, Q)
        A_a = A + sp.diags(da)
        A_b = 1j * A + sp.diags(db)
        return sp.bmat([[A_a.real, A_b.real], [A_a.imag, A_b.imag]], format="csc")

    def jacobian_p(self, v) -> sp.csr_matrix:
        """2nf x nf Jacobian w.r.t. per-node active power (diagonal blocks)."""
        dP = 1.0 / np.conj(v[self.free])
        return sp.vstack([sp.diags(dP.real), sp.diags(dP.imag)], format="csr")

    def jacobian_t(self, v, taps, tap_cols: dict[int, int]) -> sp.csr_matrix:
        """2nf x len(tap_cols) Jacobian w.r.t. the variable taps.

        ``tap_cols`` maps transformer index -> column.
        """
        rows, cols, vals = [], [], []
        t = self.tap_vector(taps)
        for s in range(len(self.s_y)):
            k = self.s_k[s]
            if k not in tap_cols:
                continue
            y, f, to, ts = self.s_y[s], self.s_from[s], self.s_to[s], t[s]
            d_from = y * (-2.0 * v[f] / ts ** 3 + v[to] / ts ** 2)
            d_to = y * v[f] / ts ** 2
            for node, d in ((f, d_from), (to, d_to)):
                if self.is_slack[node]:
                    continue
                p = self.pos[node]
                rows += [p, p + self.nf]
                cols += [tap_cols[k]] * 2
                vals += [d.real, d.imag]
        return sp.csr_matrix((vals, (rows, cols)), shape=(2 * self.nf, max(len(tap_cols), 0)))

    # ----------------------------------------------------------------- hessian
    def hessian(self, v, P, Q, taps, lam: np.ndarray, tap_cols: dict[int, int],
                ncols: int, p_offset: int | None = None, t_offset: int = 0):
        """Hessian of ``lam . residual`` as a COO triple list.

        Columns: a at [0, nf), b at [nf, 2nf), taps at ``t_offset + tap_cols[k]``
        and per-node P at ``p_offset + free_pos`` (when ``p_offset`` is given).
        """
        nf = self.nf
        Lam = lam[:nf] + 1j * lam[nf:]  # Re(conj(Lam) * r) == lam . [Re r, Im r]
        cl = np.conj(Lam)
        vf = v[self.free]
        wbar = np.conj(vf)
        sbar = P[self.free] - 1j * Q[self.free]
        idx = np.arange(nf)
        haa = np.real(cl * 2.0 * sbar / wbar ** 3)
        hab = np.real(cl * -2j * sbar / wbar ** 3)
        hbb = np.real(cl * -2.0 * sbar / wbar ** 3)
        rows = [idx, idx, idx + nf, idx + nf]
        cols = [idx, idx + nf, idx, idx + nf]
        vals = [haa, hab, hab, hbb]
        if p_offset is not None:
            hap = np.real(cl * -1.0 / wbar ** 2)
            hbp = np.real(cl * 1j / wbar ** 2)
            pcol = p_offset + idx
            rows += [idx, pcol, idx + nf, pcol]
            cols += [pcol, idx, pcol, idx + nf]
            vals += [hap, hap, hbp, hbp]
        r_l, c_l, v_l = [], [], []
        t = self.tap_vector(taps)
        for s in range(len(self.s_y)):
            k = self.s_k[s]
            if k not in tap_cols:
                continue
            tc = t_offset + tap_cols[k]
            y, f, to, ts = self.s_y[s], self.s_from[s], self.s_to[s], t[s]
            lf = cl[self.pos[f]] if not self.is_slack[f] else 0.0
            lt = cl[self.pos[to]] if not self.is_slack[to] else 0.0
            htt = np.real(lf * y * (6.0 * v[f] / ts ** 4 - 2.0 * v[to] / ts ** 3)
                          + lt * y * (-2.0 * v[f] / ts ** 3))
            r_l.append(tc), c_l.append(tc), v_l.append(htt)
            # d/dt of the coefficient multiplying V_from and V_to in each row
            coef = {f: lf * y * (-2.0 / ts ** 3) + lt * y * (1.0 / ts ** 2),
                    to: lf * y * (1.0 / ts ** 2)}
            for node, c in coef.items():
                if self.is_slack[node]:
                    continue
                p = self.pos[node]
                for col, val in ((p, np.real(c)), (p + nf, np.real(1j * c))):
                    r_l += [tc, col]
                    c_l += [col, tc]
                    v_l += [val, val]
        rows.append(np.asarray(r_l, dtype=int))
        cols.append(np.asarray(c_l, dtype=int))
        vals.append(np.asarray(v_l, dtype=float))
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def per_unit_injections(model: NetworkModel, nodes, injections: dict) -> tuple[np.ndarray, np.ndarray]:
    """Full-length per-unit (P, Q) arrays from ``{(bus, phase): (p_kw, q_kvar)}``."""
    index = {k: i for i, k in enumerate(nodes)}
    P = np.zeros(len(nodes))
    Q = np.zeros(len(nodes))
    base = model.s_base_kva
    for key, (p, q) in injections.items():
        if key not in index:
            raise KeyError(f"injection at unknown node-phase {key[0]}.{key[1].value}")
        P[index[key]] += p / base
        Q[index[key]] += q / base
    return P, Q
