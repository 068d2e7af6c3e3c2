"""Empirical-likelihood optimization kernel.

Weights maximizing ``sum_i log p_i`` under ``sum p_i = 1`` and moment
constraints ``sum_i p_i G_i = 0`` are computed through the convex dual in the
Lagrange multiplier: minimize ``-sum_i log*(1 + lam' G_i)`` where ``log*`` is
the quadratic continuation of ``log`` below the threshold ``1/m`` (Owen's
device), which globalizes Newton's method without changing the solution on
feasible problems.  On top of the dual solver sit the profile maximization
over the parameter entering the constraints, the biased-sampling likelihood
with the overall inclusion probability ``V``, and its penalized variant that
absorbs an external summary statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .data import ExternalSummary
from .errors import DataError, InfeasibleError, SolverError

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_BIG = 1e18


@dataclass
class ELSolution:
    """Empirical weights with their dual multipliers and diagnostics."""

    p: np.ndarray
    lam: np.ndarray
    log_el: float
    converged: bool
    constraint_residual: float
    iterations: int = 0

    def summary(self) -> str:
        return (f"log_el={self.log_el:.6f} lam={np.array2string(self.lam, precision=6)} "
                f"residual={self.constraint_residual:.3e} iterations={self.iterations} "
                f"converged={self.converged}")


@dataclass
class BiasedELSolution:
    """Second-step weights under the biased-sampling likelihood."""

    p: np.ndarray
    v: float
    lam: np.ndarray
    log_el: float
    converged: bool
    objective: float = float("nan")
    tau: np.ndarray | None = None


def _logstar(u: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(u)
    low = u < eps
    out[~low] = np.log(u[~low])
    ul = u[low]
    out[low] = math.log(eps) - 1.5 + 2.0 * ul / eps - ul * ul / (2.0 * eps * eps)
    return out


def _dlogstar(u: np.ndarray, eps: float) -> np.ndarray:
    return np.where(u < eps, 2.0 / eps - u / (eps * eps), 1.0 / np.maximum(u, 1e-300))


def _d2logstar(u: np.ndarray, eps: float) -> np.ndarray:
    return np.where(u < eps, -1.0 / (eps * eps), -1.0 / np.maximum(u, 1e-300) ** 2)


def solve_el_dual(G: np.ndarray, lam0: np.ndarray | None = None,
                  max_iter: int = 100, trace: list | None = None) -> ELSolution:
    """Maximize sum log p subject to sum p = 1 and p' G = 0.

    ``G`` has one row per support point.  All-zero columns are vacuous and
    accepted; every other column must change sign across rows (a necessary
    feasibility condition checked before Newton).
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.size == 0:
        G = G.reshape(G.shape[0] if G.ndim == 2 else 0, 0)
    m, d = G.shape
    if m == 0:
        raise DataError("empty constraint matrix")

    col_max = np.abs(G).max(axis=0) if d else np.zeros(0)
    keep = col_max > 0.0
    if np.any(keep):
        Gk = G[:, keep]
        if np.any(Gk.min(axis=0) >= 0.0) or np.any(Gk.max(axis=0) <= 0.0):
            raise InfeasibleError("constraints infeasible: a column does not straddle zero")
        if Gk.shape[1] >= m:
            raise InfeasibleError("constraints infeasible: as many constraints as points")
    else:
        Gk = G[:, :0]

    dk = Gk.shape[1]
    eps = 1.0 / m
    lam = np.zeros(dk)
    if lam0 is not None and np.all(np.isfinite(lam0)) and lam0.shape == (d,):
        lam = np.asarray(lam0, dtype=float)[keep].copy()
        if np.min(1.0 + Gk @ lam) <= 0.0 and dk:
            lam = np.zeros(dk)  # warm start outside the domain: restart at 0

    gtol = max(1e-10 * max(1.0, col_max.max() if d else 1.0),
               4e-15 * (np.abs(Gk).sum(axis=0).max() if dk else 0.0))
    iterations = 0
    if dk:
        u = 1.0 + Gk @ lam
        obj = -_logstar(u, eps).sum()
        if trace is not None:
            trace.append(obj)
        for iterations in range(1, max_iter + 1):
            grad = -Gk.T @ _dlogstar(u, eps)
            if np.abs(grad).max() < gtol:
                iterations -= 1
                break
            hess = Gk.T @ (Gk * (-_d2logstar(u, eps))[:, None])
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            t = 1.0
            accepted = False
            for _ in range(50):
                cand = lam + t * step
                u_cand = 1.0 + Gk @ cand
                obj_cand = -_logstar(u_cand, eps).sum()
                if obj_cand <= obj:
                    lam, u, obj = cand, u_cand, obj_cand
                    accepted = True
                    break
                t *= 0.5
            if trace is not None:
                trace.append(obj)
            if not accepted:
                break
        else:
            raise SolverError(
                f"EL dual did not converge in {max_iter} iterations; "
                f"gradient {np.abs(grad).max():.3e}")
        grad = -Gk.T @ _dlogstar(u, eps)
        if np.abs(grad).max() >= max(gtol, 1e6 * gtol) and np.abs(grad).max() >= 1e-6:
            raise SolverError(f"EL dual stalled; gradient {np.abs(grad).max():.3e}")
        if np.min(u) < eps * (1.0 - 1e-9):
            raise InfeasibleError("constraints infeasible: weight pushed beyond 1")
    else:
        u = np.ones(m)

    p = 1.0 / (m * u)
    residual = float(np.abs(p @ G).max()) if d else 0.0
    sum_err = abs(p.sum() - 1.0)
    converged = residual < 1e-8 and sum_err < 1e-10 * m
    if not converged:
        raise SolverError(
            f"EL dual inaccurate: constraint residual {residual:.3e}, "
            f"sum error {sum_err:.3e}")
    lam_full = np.zeros(d)
    lam_full[keep] = lam
    return ELSolution(p=p, lam=lam_full, log_el=float(np.log(p).sum()),
                      converged=True, constraint_residual=residual,
                      iterations=iterations)


def _golden_max(f, lo: float, hi: float, xtol: float):
    """Golden-section maximization on [lo, hi]; f may return -inf."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d_ = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d_)
    while b - a > xtol:
        if fc >= fd:
            b, d_, fd = d_, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d_, fd
            d_ = a + _INVPHI * (b - a)
            fd = f(d_)
    return (c, fc) if fc >= fd else (d_, fd)


def _parabolic_polish(f, x, fx, h):
    """One parabolic-interpolation step through (x-h, x, x+h); keeps the best."""
    xl, xr = x - h, x + h
    fl, fr = f(xl), f(xr)
    best_x, best_f = x, fx
    for xx, ff in ((xl, fl), (xr, fr)):
        if ff > best_f:
            best_x, best_f = xx, ff
    if np.isfinite(fl) and np.isfinite(fr):
        denom = fl - 2.0 * fx + fr
        if denom < 0:
            cand = x + 0.5 * h * (fl - fr) / denom
            if xl < cand < xr:
                fc = f(cand)
                if fc > best_f:
                    best_x, best_f = cand, fc
    return best_x, best_f


def _maximize_scalar_free(f, t0: float, xtol_rel: float = 1e-9,
                          max_expand: int = 60):
    """Maximize a unimodal-ish scalar function starting from t0.

    Brackets the maximum by geometric expansion around t0, refines by golden
    section plus one parabolic step.  An exactly flat profile returns t0 (tie
    broken at the initializer).  Returns (t_best, f_best).
    """
    f0 = f(t0)
    if not np.isfinite(f0):
        # scan outward for a feasible starting point
        h = 0.1 * max(1.0, abs(t0))
        found = False
        for k in range(25):
            for cand in (t0 + h * 3.0 ** k, t0 - h * 3.0 ** k):
                fc = f(cand)
                if np.isfinite(fc):
                    t0, f0 = cand, fc
                    found = True
                    break
            if found:
                break
        if not found:
            raise SolverError("no feasible point found for the profile search")

    flat_tol = 1e-11 * max(1.0, abs(f0))
    h = 0.05 * max(1.0, abs(t0))
    for _ in range(14):
        fl, fr = f(t0 - h), f(t0 + h)
        if fl > f0 + flat_tol or fr > f0 + flat_tol:
            break  # ascent direction found
        if fl < f0 - flat_tol and fr < f0 - flat_tol:
            # t0 already brackets the maximum
            x, fx = _golden_max(f, t0 - h, t0 + h, xtol_rel * max(1.0, abs(t0)))
            if fx < f0:
                return t0, f0
            x, fx = _parabolic_polish(f, x, fx, xtol_rel * max(1.0, abs(x)))
            return x, fx
        h *= 4.0
    else:
        return t0, f0  # flat profile: keep the initializer

    if fr >= fl:
        direction, a, fa, b, fb = 1.0, t0, f0, t0 + h, fr
    else:
        direction, a, fa, b, fb = -1.0, t0, f0, t0 - h, fl
    step = h
    for _ in range(max_expand):
        step *= 2.0
        c = b + direction * step
        fc = f(c)
        if fc < fb:
            break
        a, fa, b, fb = b, fb, c, fc
    else:
        return b, fb  # profile still rising at the expansion limit
    lo, hi = (a, c) if direction > 0 else (c, a)
    x, fx = _golden_max(f, lo, hi, xtol_rel * max(1.0, abs(b)))
    if fb > fx:
        x, fx = b, fb
    x, fx = _parabolic_polish(f, x, fx, xtol_rel * max(1.0, abs(x)))
    return x, fx


class _ProfileObjective:
    """Caches inner dual solves and tracks feasibility statistics."""

    def __init__(self, constraint_builder, bounds=None):
        self.builder = constraint_builder
        self.bounds = bounds
        self.warm: np.ndarray | None = None
        self.total = 0
        self.failed = 0
        self.best: tuple[float, np.ndarray, ELSolution] | None = None

    def __call__(self, theta) -> float:
        theta_arr = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.bounds is not None:
            lo, hi = self.bounds
            if np.any(theta_arr < lo) or np.any(theta_arr > hi):
                return -np.inf
        self.total += 1
        try:
            sol = solve_el_dual(self.builder(theta_arr), lam0=self.warm)
        except (InfeasibleError, SolverError):
            self.failed += 1
            return -np.inf
        self.warm = sol.lam
        if self.best is None or sol.log_el > self.best[0]:
            self.best = (sol.log_el, theta_arr.copy(), sol)
        return sol.log_el


def profile_el(constraint_builder, theta_init, bounds=None,
               xtol_rel: float = 1e-9):
    """Maximize the inner EL value over the parameter in the constraints.

    Scalar parameters use bracketing plus golden section with a parabolic
    refinement; vector parameters use Nelder-Mead restarted from three
    deterministic perturbations of the initializer.  Returns
    ``(theta_hat, ELSolution at theta_hat)``.
    """
    theta_init = np.atleast_1d(np.asarray(theta_init, dtype=float))
    obj = _ProfileObjective(constraint_builder, bounds)

    if theta_init.size == 1:
        t_hat, f_hat = _maximize_scalar_free(lambda t: obj(np.array([t])),
                                             float(theta_init[0]), xtol_rel)
        if not np.isfinite(f_hat):
            raise SolverError("profile search found no feasible theta")
        theta_hat = np.array([t_hat])
    else:
        def neg(tvec):
            val = obj(tvec)
            return -val if np.isfinite(val) else _BIG

        rng = np.random.default_rng(12345)  # fixed: restarts must be reproducible
        starts = [theta_init]
        scale = 0.1 * np.maximum(1.0, np.abs(theta_init))
        starts += [theta_init + scale * rng.standard_normal(theta_init.size)
                   for _ in range(3)]
        best_x, best_val = None, _BIG
        for x0 in starts:
            res = scipy.optimize.minimize(
                neg, x0, method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400 * theta_init.size})
            if res.fun < best_val:
                best_x, best_val = np.atleast_1d(res.x), res.fun
        if best_x is None or best_val >= _BIG:
            raise SolverError("profile search found no feasible theta")
        theta_hat = best_x

    if obj.total and obj.failed / obj.total > 0.5:
        raise SolverError(
            f"profile search unstable: {obj.failed}/{obj.total} infeasible probes")
    final_val = obj(theta_hat)
    if not np.isfinite(final_val):
        theta_hat = obj.best[1]
    best_val, best_theta, best_sol = obj.best
    # prefer the maximizer reported by the outer search unless a cached probe beat it
    if np.isfinite(final_val) and final_val >= best_val - 1e-12 * max(1.0, abs(best_val)):
        sol = solve_el_dual(constraint_builder(theta_hat), lam0=obj.warm)
        return theta_hat, sol
    return best_theta, best_sol


def _biased_objective_factory(w: np.ndarray, N: int, extra=None, penalty=None):
    n = w.shape[0]
    inv_w = 1.0 / w
    state = {"warm": None}

    def objective(v: float, tau: np.ndarray | None = None):
        if not (0.0 < v < 1.0):
            return -np.inf, None
        cols = [inv_w - v]
        if extra is not None:
            rows = np.atleast_2d(np.asarray(extra(tau), dtype=float))
            if rows.shape[0] != n:
                rows = rows.T
            cols.extend(rows.T)
        G = np.column_stack(cols)
        try:
            sol = solve_el_dual(G, lam0=state["warm"])
        except (InfeasibleError, SolverError):
            return -np.inf, None
        state["warm"] = sol.lam
        val = sol.log_el + (N - n) * math.log1p(-v)
        if penalty is not None:
            val -= penalty(tau)
        return val, sol

    return objective


def _coordinate_polish(fun, x: np.ndarray, spans: np.ndarray, rounds: int = 2):
    """Golden-section sweep along each coordinate; tightens Nelder-Mead output."""
    x = x.copy()
    fx = fun(x)
    for _ in range(rounds):
        for j in range(x.size):
            span = spans[j]

            def along(t, j=j):
                xx = x.copy()
                xx[j] = t
                return fun(xx)

            tj, fj = _golden_max(along, x[j] - span, x[j] + span, 1e-11 * max(1.0, abs(x[j])))
            if fj > fx:
                x[j], fx = tj, fj
        spans = spans * 0.1
    return x, fx


def solve_biased_el(w, N: int, extra=None, tau_init=None) -> BiasedELSolution:
    """Maximize sum log p + (N-n) log(1-V) s.t. sum p = 1, sum p (1/w - V) = 0.

    With ``extra`` supplied, rows ``extra(tau)`` join the constraints and tau
    joins the outer search; the solution then carries ``tau``.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if n < 2:
        raise DataError("need at least two sampled units")
    if np.any(w < 1.0):
        raise DataError("sampling weights must be at least 1")
    if N < n:
        raise DataError("population size smaller than sample size")

    inv_w = 1.0 / w
    lo, hi = float(inv_w.min()), float(inv_w.max())
    objective = _biased_objective_factory(w, N, extra=extra)

    if extra is None:
        if hi - lo < 1e-14:
            v_hat = lo
            if N > n and v_hat >= 1.0 - 1e-12:
                raise InfeasibleError("all weights equal 1 with N > n: V forced to 1")
            val, sol = objective(v_hat)
            if sol is None:
                raise SolverError("biased EL infeasible at the forced V")
        else:
            pad = 1e-9 * (hi - lo)
            v_hat, _ = _golden_max(lambda v: objective(v)[0],
                                   lo + pad, min(hi - pad, 1.0 - 1e-14),
                                   1e-11 * (hi - lo))
            v_hat, _ = _parabolic_polish(lambda v: objective(v)[0], v_hat,
                                         objective(v_hat)[0], 1e-9 * (hi - lo))
            val, sol = objective(v_hat)
            if sol is None:
                raise SolverError("biased EL did not converge")
        return BiasedELSolution(p=sol.p, v=float(v_hat), lam=sol.lam,
                                log_el=sol.log_el, converged=True, objective=val)

    if tau_init is None:
        raise DataError("tau_init required when extra constraints are supplied")
    tau_init = np.atleast_1d(np.asarray(tau_init, dtype=float))
    return _solve_joint(w, N, objective, tau_init, lo, hi)


def solve_penalized_el(w, N: int, dstar, ext: ExternalSummary) -> BiasedELSolution:
    """Biased EL with external-summary constraint rows and quadratic penalty.

    Maximizes ``sum log p + (N-n) log(1-V) - (n1/2) (tau~ - tau)' Sigma1^-1
    (tau~ - tau)`` subject to the Setting-2 constraints plus
    ``sum p dstar(tau) = 0``.
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if n < 2:
        raise DataError("need at least two sampled units")
    if np.any(w < 1.0):
        raise DataError("sampling weights must be at least 1")
    sig_inv = np.linalg.inv(ext.sigma1_tilde)

    def penalty(tau):
        diff = ext.tau_tilde - tau
        return 0.5 * ext.n1 * float(diff @ sig_inv @ diff)

    inv_w = 1.0 / w
    lo, hi = float(inv_w.min()), float(inv_w.max())
    objective = _biased_objective_factory(w, N, extra=dstar, penalty=penalty)
    return _solve_joint(w, N, objective, ext.tau_tilde.copy(), lo, hi)


def _solve_joint(w, N, objective, tau_init: np.ndarray, lo: float, hi: float
                 ) -> BiasedELSolution:
    """Nelder-Mead over (V, tau) with deterministic restarts and a polish pass."""
    n = w.shape[0]
    if hi - lo < 1e-14:
        if N > n and lo >= 1.0 - 1e-12:
            raise InfeasibleError("all weights equal 1 with N > n: V forced to 1")
        v_fixed = lo

        def fun_tau(tau):
            return objective(v_fixed, np.atleast_1d(tau))[0]

        def neg_tau(tau):
            val = fun_tau(np.atleast_1d(tau))
            return -val if np.isfinite(val) else _BIG

        res = scipy.optimize.minimize(neg_tau, tau_init, method="Nelder-Mead",
                                      options={"xatol": 1e-10, "fatol": 1e-12})
        tau_hat, _ = _coordinate_polish(fun_tau, np.atleast_1d(res.x),
                                        np.maximum(1e-4, 1e-3 * np.abs(np.atleast_1d(res.x))))
        val, sol = objective(v_fixed, tau_hat)
        if sol is None:
            raise SolverError("biased EL infeasible at the forced V")
        return BiasedELSolution(p=sol.p, v=float(v_fixed), lam=sol.lam,
                                log_el=sol.log_el, converged=True,
                                objective=val, tau=tau_hat)

    v0 = min(max(n / N, lo + 1e-3 * (hi - lo)), hi - 1e-3 * (hi - lo))

    def fun(xvec):
        return objective(float(xvec[0]), xvec[1:])[0]

    def neg(xvec):
        val = fun(xvec)
        return -val if np.isfinite(val) else _BIG

    x0 = np.concatenate([[v0], tau_init])
    rng = np.random.default_rng(97531)  # fixed: restarts must be reproducible
    starts = [x0]
    for _ in range(3):
        pert = x0.copy()
        pert[0] = lo + (hi - lo) * (0.2 + 0.6 * rng.random())
        pert[1:] = tau_init + 0.1 * np.maximum(1.0, np.abs(tau_init)) * rng.standard_normal(tau_init.size)
        starts.append(pert)
    best_x, best_val = None, _BIG
    for start in starts:
        res = scipy.optimize.minimize(neg, start, method="Nelder-Mead",
                                      options={"xatol": 1e-10, "fatol": 1e-12,
                                               "maxiter": 600 * (1 + tau_init.size)})
        if res.fun < best_val:
            best_x, best_val = res.x.copy(), res.fun
    if best_x is None or best_val >= _BIG:
        raise SolverError("biased EL joint search found no feasible (V, tau)")
    spans = np.concatenate([[0.05 * (hi - lo)],
                            np.maximum(1e-4, 1e-2 * np.maximum(1.0, np.abs(best_x[1:])))])
    best_x, _ = _coordinate_polish(fun, best_x, spans)
    val, sol = objective(float(best_x[0]), best_x[1:])
    if sol is None:
        raise SolverError("biased EL joint search did not converge")
    return BiasedELSolution(p=sol.p, v=float(best_x[0]), lam=sol.lam,
                            log_el=sol.log_el, converged=True,
                            objective=val, tau=best_x[1:].copy())
