"""Primal-dual interior-point method for smooth nonlinear programs.

    min f(x)  s.t.  g(x) = 0,  h(x) <= 0

Inequalities get slacks ``z > 0`` (``h + z = 0``) and duals ``mu > 0``; the
barrier parameter is reduced monotonically and the Newton step on the
perturbed KKT system is damped by a fraction-to-boundary rule.  On step
failure a Levenberg-Marquardt feasibility restoration minimizes
``||g||^2 + ||max(h, 0)||^2`` before the barrier iteration resumes.

An optional active-set polish solves the KKT equations with the identified
active inequalities held as equalities, which removes the barrier's O(mu)
perturbation from variables that sit at a bound.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class IpmError(Exception):
    def __init__(self, message: str, result: "IpmResult | None" = None):
        super().__init__(message)
        self.result = result


class NonConvergence(IpmError):
    pass


class LocallyInfeasible(IpmError):
    def __init__(self, message: str, constraint: str, violation: float,
                 result: "IpmResult | None" = None):
        super().__init__(message, result)
        self.constraint = constraint
        self.violation = violation


@dataclass
class Nlp:
    """Callbacks of a smooth NLP.  Jacobians are sparse ``(rows, n)`` matrices;
    ``hess(x, lam, mu)`` returns the Hessian of ``f + lam.g + mu.h``."""

    n: int
    f: Callable
    grad: Callable
    g: Callable
    jac_g: Callable
    h: Callable
    jac_h: Callable
    hess: Callable
    eq_names: Sequence[str] = ()
    ineq_names: Sequence[str] = ()
    # inequality rows of the form x[j] == value when active: {row: (j, value)}
    bound_rows: dict = field(default_factory=dict)


@dataclass
class IpmOptions:
    mu0: float = 0.1
    sigma: float = 0.2
    tau: float = 0.995
    z0: float = 1.0  # initial slack floor
    feas_tol: float = 1e-8
    stat_tol: float = 1e-6
    comp_tol: float = 1e-6
    max_iter: int = 300
    max_restorations: int = 3
    polish: bool = True
    s_max: float = 100.0


@dataclass
class IpmResult:
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    z: np.ndarray
    f: float
    iterations: int
    converged: bool
    feasibility: float
    stationarity: float
    complementarity: float
    polished: bool = False
    restorations: int = 0
    message: str = ""


def kkt_measures(nlp: Nlp, x, lam, mu, z=None, s_max: float = 100.0):
    """Constraint violation, scaled stationarity and scaled complementarity.

    Scaling follows the usual convention ``s = max(s_max, mean |dual|) / s_max``
    so that large multipliers do not inflate the residuals.
    """
    g, h = nlp.g(x), nlp.h(x)
    feas = max(np.abs(g).max(initial=0.0), np.maximum(h, 0.0).max(initial=0.0))
    lx = nlp.grad(x) + nlp.jac_g(x).T @ lam + nlp.jac_h(x).T @ mu
    m, p = len(g), len(h)
    s_d = max(s_max, (np.abs(lam).sum() + np.abs(mu).sum()) / max(m + p, 1)) / s_max
    s_c = max(s_max, np.abs(mu).sum() / max(p, 1)) / s_max
    slack = -h if z is None else z
    comp = np.abs(np.maximum(slack, 0.0) * mu).max(initial=0.0) / s_c
    return float(feas), float(np.abs(lx).max(initial=0.0) / s_d), float(comp)


def _solve_kkt(M, Jg, rhs, n, m):
    """Solve the saddle-point system, regularizing on failure.

    Returns the solution or None.  Adds ``delta * I`` to the Hessian block
    when the direction shows negative curvature.
    """
    delta = 0.0
    delta_c = 0.0
    for attempt in range(8):
        Mr = M + delta * sp.identity(n, format="csr") if delta else M
        K = sp.bmat([[Mr, Jg.T], [Jg, -delta_c * sp.identity(m) if m else None]], format="csc") \
            if m else Mr.tocsc()
        try:
            lu = spla.splu(K)
            sol = lu.solve(rhs)
            sol += lu.solve(rhs - K @ sol)
        except RuntimeError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            dx = sol[:n]
            curv = dx @ (Mr @ dx)
            if curv >= -1e-12 * max(1.0, dx @ dx):
                return sol
        delta = 1e-8 if delta == 0 else delta * 100.0
        delta_c = 1e-10
    return None


def _restore(nlp: Nlp, x, tol, max_iter=60):
    """Levenberg-Marquardt on 0.5 (||g||^2 + ||max(h,0)||^2)."""
    lm = 1e-3
    for _ in range(max_iter):
        g, h = nlp.g(x), nlp.h(x)
        act = h > 0
        r = np.concatenate([g, h[act]])
        if np.abs(r).max(initial=0.0) <= tol:
            return x, True
        J = sp.vstack([nlp.jac_g(x), nlp.jac_h(x)[act]]).tocsr()
        JtJ = (J.T @ J).tocsc()
        grad = J.T @ r
        phi = 0.5 * r @ r
        improved = False
        for _ in range(12):
            A = JtJ + lm * sp.diags(np.maximum(JtJ.diagonal(), 1e-8))
            try:
                dx = spla.spsolve(A.tocsc(), -grad)
            except RuntimeError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                xt = x + dx
                gt, ht = nlp.g(xt), nlp.h(xt)
                rt = np.concatenate([gt, np.maximum(ht, 0.0)])
                if 0.5 * rt @ rt < phi:
                    x = xt
                    lm = max(lm / 10.0, 1e-12)
                    improved = True
                    break
            lm *= 10.0
        if not improved:
            break
    g, h = nlp.g(x), nlp.h(x)
    viol = max(np.abs(g).max(initial=0.0), np.maximum(h, 0.0).max(initial=0.0))
    return x, viol <= tol


def _most_violated(nlp: Nlp, x) -> tuple[str, float]:
    g, h = nlp.g(x), nlp.h(x)
    gi = int(np.argmax(np.abs(g))) if len(g) else -1
    hi = int(np.argmax(h)) if len(h) else -1
    gv = abs(g[gi]) if gi >= 0 else -np.inf
    hv = h[hi] if hi >= 0 else -np.inf
    if gv >= hv:
        name = nlp.eq_names[gi] if len(nlp.eq_names) > gi >= 0 else f"eq[{gi}]"
        return name, float(gv)
    name = nlp.ineq_names[hi] if len(nlp.ineq_names) > hi else f"ineq[{hi}]"
    return name, float(hv)


def solve(nlp: Nlp, x0: np.ndarray, opts: IpmOptions | None = None) -> IpmResult:
    opts = opts or IpmOptions()
    n = nlp.n
    x = np.array(x0, dtype=float)
    gamma = opts.mu0

    def init_duals(x, gamma):
        h = nlp.h(x)
        z = np.maximum(-h, opts.z0)
        mu = gamma / z
        return z, mu, np.zeros(len(nlp.g(x)))

    z, mu, lam = init_duals(x, gamma)
    m, p = len(lam), len(z)
    restorations = 0
    it = 0
    feas = stat = comp = np.inf
    message = ""
    converged = False
    tighten = 1.0
    first = polished = None
    while it < opts.max_iter:
        g, h = nlp.g(x), nlp.h(x)
        Jg, Jh = nlp.jac_g(x), nlp.jac_h(x)
        df = nlp.grad(x)
        lx = df + Jg.T @ lam + Jh.T @ mu
        feas, stat, comp = kkt_measures(nlp, x, lam, mu, z, opts.s_max)
        feas = max(feas, np.abs(h + z).max(initial=0.0))
        if feas <= opts.feas_tol and stat <= opts.stat_tol and comp <= opts.comp_tol * tighten:
            converged = True
            first = IpmResult(x.copy(), lam.copy(), mu.copy(), z.copy(), float(nlp.f(x)), it,
                              True, feas, stat, comp, restorations=restorations)
            if not opts.polish:
                break
            polished = polish(nlp, first, opts)
            if polished is not None or tighten < 1e-3:
                break
            # a sharper barrier separates active from inactive rows more clearly
            tighten *= 1e-4
            gamma = min(gamma, 1e-3 * (z @ mu) / max(p, 1))
        log.debug("ipm %3d f=%.6e feas=%.2e stat=%.2e comp=%.2e gamma=%.2e",
                  it, nlp.f(x), feas, stat, comp, gamma)
        it += 1
        H = nlp.hess(x, lam, mu)
        zinv = 1.0 / z
        M = (H + Jh.T @ sp.diags(mu * zinv) @ Jh).tocsr()
        N = lx + Jh.T @ (zinv * (gamma + mu * h))
        sol = _solve_kkt(M, Jg, -np.concatenate([N, g]), n, m)
        alpha_p = 0.0
        if sol is not None:
            dx, dlam = sol[:n], sol[n:]
            dz = -h - z - Jh @ dx
            dmu = -mu + zinv * (gamma - mu * dz)
            neg = dz < 0
            alpha_p = min(1.0, opts.tau * np.min(-z[neg] / dz[neg])) if neg.any() else 1.0
            neg = dmu < 0
            alpha_d = min(1.0, opts.tau * np.min(-mu[neg] / dmu[neg])) if neg.any() else 1.0
        if sol is None or alpha_p < 1e-12 or not np.isfinite(alpha_p):
            if restorations >= opts.max_restorations:
                message = "step failure after feasibility restoration"
                break
            restorations += 1
            log.debug("ipm: restoration %d at iteration %d", restorations, it)
            x, ok = _restore(nlp, x, opts.feas_tol)
            if not ok:
                name, viol = _most_violated(nlp, x)
                res = IpmResult(x, lam, mu, z, float(nlp.f(x)), it, False, viol, stat, comp,
                                restorations=restorations, message="restoration failed")
                raise LocallyInfeasible(
                    f"feasibility restoration failed; most violated constraint {name} "
                    f"(violation {viol:.3e})", name, viol, res)
            z, mu, lam = init_duals(x, gamma)
            continue
        x = x + alpha_p * dx
        z = np.maximum(z + alpha_p * dz, 1e-300)
        lam = lam + alpha_d * dlam
        mu = np.maximum(mu + alpha_d * dmu, 1e-300)
        gamma = min(gamma, opts.sigma * (z @ mu) / max(p, 1))
    if polished is not None:
        polished.iterations = it
        return polished
    if converged:
        return first
    result = IpmResult(x, lam, mu, z, float(nlp.f(x)), it, converged, feas, stat, comp,
                       restorations=restorations, message=message)
    if not converged:
        name, viol = _most_violated(nlp, x)
        if viol > 1e-4 and restorations >= opts.max_restorations:
            raise LocallyInfeasible(f"no feasible point found; most violated constraint {name}",
                                    name, viol, result)
        raise NonConvergence(message or f"no convergence in {opts.max_iter} iterations "
                             f"(feas {feas:.2e}, stat {stat:.2e}, comp {comp:.2e})", result)
    return result


def _active_candidates(z, mu):
    """Candidate active sets from the slack/dual ratios, most plausible first.

    The first candidate splits the sorted ratios at their widest gap (in
    log scale) below 1; fixed thresholds follow as fallbacks.
    """
    ratio = z / np.maximum(mu, 1e-300)
    out = []
    below = np.sort(ratio[ratio < 1.0])
    if len(below):
        logs = np.log10(np.maximum(below, 1e-300))
        gaps = np.diff(np.append(logs, 0.0))
        cut = below[int(np.argmax(gaps))]
        out.append(np.flatnonzero(ratio <= cut))
    for thr in (1e-4, 1e-3, 1e-2):
        cand = np.flatnonzero(ratio < thr)
        if not any(len(cand) == len(c) and np.array_equal(cand, c) for c in out):
            out.append(cand)
    return out


def polish(nlp: Nlp, res: IpmResult, opts: IpmOptions) -> IpmResult | None:
    """Newton on the KKT equations with the identified active set held as
    equalities.  Tries the candidates of :func:`_active_candidates` in turn;
    returns None when none yields a valid KKT point."""
    for active in _active_candidates(res.z, res.mu):
        out = _polish_from(nlp, res, opts, active)
        if out is not None:
            return out
    return None


def _polish_from(nlp: Nlp, res: IpmResult, opts: IpmOptions, active: np.ndarray,
                 max_rounds: int = 6) -> IpmResult | None:
    n = nlp.n
    for _ in range(max_rounds):
        x, lam = res.x.copy(), res.lam.copy()
        mu_a = res.mu[active].copy()
        m, q = len(lam), len(active)
        norm0 = None
        for _ in range(25):
            g = nlp.g(x)
            ha = nlp.h(x)[active]
            Jg, Jh = nlp.jac_g(x), nlp.jac_h(x)
            Ja = Jh[active]
            mu_full = np.zeros(len(res.mu))
            mu_full[active] = mu_a
            lx = nlp.grad(x) + Jg.T @ lam + Ja.T @ mu_a
            r = np.concatenate([lx, g, ha])
            norm = np.abs(r).max(initial=0.0)
            if not np.isfinite(norm):
                return None
            norm0 = norm if norm0 is None else norm0
            if norm <= 1e-12 or norm > 1e3 * max(norm0, 1e-8):
                break
            H = nlp.hess(x, lam, mu_full)
            J = sp.vstack([Jg, Ja]).tocsr() if q else Jg
            K = sp.bmat([[H, J.T], [J, None]], format="csc")
            with np.errstate(all="ignore"):
                try:
                    lu = spla.splu(K)
                    d = lu.solve(-r)
                    d += lu.solve(-r - K @ d)
                except RuntimeError:
                    log.debug("polish: singular active-set system (%d active rows)", q)
                    return None
            if not np.all(np.isfinite(d)):
                log.debug("polish: non-finite Newton step (%d active rows)", q)
                return None
            x += d[:n]
            lam += d[n:n + m]
            mu_a += d[n + m:]
        if norm > 1e-9:
            log.debug("polish: Newton stalled at %.2e with %d active rows", norm, q)
            return None
        h = nlp.h(x)
        bad_mu = mu_a < -1e-10
        inactive = np.setdiff1d(np.arange(len(h)), active)
        violated = inactive[h[inactive] > 1e-10]
        if not bad_mu.any() and not len(violated):
            mu = np.zeros(len(res.mu))
            mu[active] = np.maximum(mu_a, 0.0)
            for row in active:
                if row in nlp.bound_rows:
                    j, value = nlp.bound_rows[row]
                    x[j] = value
            z = np.maximum(-h, 0.0)
            z[active] = 0.0
            feas, stat, comp = kkt_measures(nlp, x, lam, mu, None, opts.s_max)
            if feas > max(opts.feas_tol, res.feasibility) * 10 or stat > opts.stat_tol:
                log.debug("polish: rejected (feas %.2e, stat %.2e)", feas, stat)
                return None
            return IpmResult(x, lam, mu, z, float(nlp.f(x)), res.iterations, True, feas, stat,
                             comp, polished=True, restorations=res.restorations,
                             message=res.message)
        log.debug("polish: %d negative duals, %d violated rows", bad_mu.sum(), len(violated))
        keep = active[~bad_mu]
        active = np.union1d(keep, violated)
    return None
