"""Target parameters expressed through estimating functions.

A parameter is identified as the root of the population moment condition
``E{U(theta; X, Y)} = 0``.  Both built-in estimands have the conditional-mean
form ``U = A(x) * (y - mu(x; theta))``, which lets downstream code build the
outcome-regression and augmentation terms from a fitted conditional mean of
``y`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DataError, SolverError


@dataclass(frozen=True)
class Estimand:
    """Estimating function, its theta-Jacobian, and optional mean structure.

    ``u(theta, X, y)`` returns an (n, q) matrix of per-unit estimating-function
    values; ``du(theta, X, y)`` the (n, q, q) per-unit Jacobians.  ``mu``,
    ``mu_grad`` and ``a_fn`` are present only for conditional-mean estimands
    (``U = A(x) * (y - mu(x, theta))``) and are required by estimators that
    compose outcome-regression or augmentation models.
    """

    kind: str
    q: int
    u: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    du: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    mu: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    mu_grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    a_fn: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def has_mean_form(self) -> bool:
        return self.mu is not None

    def require_mean_form(self) -> None:
        if not self.has_mean_form:
            raise DataError(
                f"estimand {self.kind!r} lacks the conditional-mean form needed here")


def u_value(e: Estimand, theta, x, y) -> np.ndarray:
    """Evaluate U(theta; x, y) for a single unit."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (e.q,):
        raise DataError(f"theta must have length {e.q}, got {theta.shape}")
    X = np.atleast_2d(np.asarray(x, dtype=float)) if x is not None else np.zeros((1, 1))
    return e.u(theta, X, np.atleast_1d(float(y)))[0]


def mean_estimand() -> Estimand:
    """theta = E(Y), U(theta; y) = y - theta."""

    def u(theta, X, y):
        return (y - theta[0])[:, None]

    def du(theta, X, y):
        return np.full((y.shape[0], 1, 1), -1.0)

    return Estimand(
        kind="mean", q=1, u=u, du=du,
        mu=lambda theta, X: np.full(X.shape[0], theta[0]),
        mu_grad=lambda theta, X: np.ones((X.shape[0], 1)),
        a_fn=lambda X: np.ones((X.shape[0], 1)),
    )


def linear_regression_estimand(dx: int = 1, a_fn=None) -> Estimand:
    """theta = coefficients of E(Y|x) = theta0 + theta1 x1 + ...

    ``A(x)`` defaults to the mu-gradient basis (1, x); pass ``a_fn`` for a
    custom instrument with the same dimension.
    """
    q = dx + 1

    def phi(X):
        return np.column_stack([np.ones(X.shape[0]), X[:, :dx]])

    a = a_fn or phi

    def u(theta, X, y):
        return a(X) * (y - phi(X) @ theta)[:, None]

    def du(theta, X, y):
        return -a(X)[:, :, None] * phi(X)[:, None, :]

    return Estimand(
        kind="linear-regression", q=q, u=u, du=du,
        mu=lambda theta, X: phi(X) @ theta,
        mu_grad=lambda theta, X: phi(X),
        a_fn=a,
    )


def custom_estimand(q: int, u, du, kind: str = "custom",
                    mu=None, mu_grad=None, a_fn=None) -> Estimand:
    """Library-only escape hatch for user-defined estimating functions."""
    return Estimand(kind=kind, q=q, u=u, du=du, mu=mu, mu_grad=mu_grad, a_fn=a_fn)


def estimand_by_name(name: str, dx: int = 1) -> Estimand:
    if name == "mean":
        return mean_estimand()
    if name in ("linear-regression", "linear_regression"):
        return linear_regression_estimand(dx)
    raise DataError(f"unknown estimand {name!r}")


def _fd_jacobian(fn, theta, h: float = 1e-6) -> np.ndarray:
    q = theta.size
    cols = []
    for j in range(q):
        step = np.zeros(q)
        step[j] = h * max(1.0, abs(theta[j]))
        cols.append((fn(theta + step) - fn(theta - step)) / (2 * step[j]))
    return np.column_stack(cols)


def solve_weighted_estimating_equation(
    e: Estimand,
    weights: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    offset=None,
    offset_jac=None,
    theta0=None,
    max_iter: int = 200,
    return_info: bool = False,
):
    """Solve sum_i weights_i * U(theta; x_i, y_i) + offset(theta) = 0.

    One exact Newton step lands on the root when the system is linear in theta
    (both built-in estimands); otherwise damped Newton with step halving.  The
    residual tolerance scales with the total weight so the root is invariant
    to a positive rescaling of all weights.
    """
    weights = np.asarray(weights, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    theta = np.zeros(e.q) if theta0 is None else np.array(theta0, dtype=float).reshape(e.q)
    scale = max(1.0, float(np.abs(weights).sum()))
    tol = 1e-10 * scale

    def residual(t):
        f = e.u(t, X, y).T @ weights
        if offset is not None:
            f = f + np.asarray(offset(t), dtype=float).reshape(e.q)
        return f

    def jacobian(t):
        j = np.einsum("i,ijk->jk", weights, e.du(t, X, y))
        if offset is not None:
            if offset_jac is not None:
                j = j + np.asarray(offset_jac(t), dtype=float).reshape(e.q, e.q)
            else:
                j = j + _fd_jacobian(lambda s: np.asarray(offset(s), float).reshape(e.q), t)
        return j

    f = residual(theta)
    if not np.all(np.isfinite(f)):
        raise SolverError("estimating equation not finite at the initial point")
    iterations = 0
    while np.linalg.norm(f) >= tol:
        if iterations >= max_iter:
            raise SolverError(
                f"no convergence in {max_iter} iterations; residual norm {np.linalg.norm(f):.3e}")
        jac = jacobian(theta)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise SolverError("non-identifiable: singular Jacobian") from exc
        if not np.all(np.isfinite(step)):
            raise SolverError("non-identifiable: singular Jacobian")
        norm0 = np.linalg.norm(f)
        t_step = 1.0
        for _ in range(30):
            cand = theta + t_step * step
            f_cand = residual(cand)
            if np.all(np.isfinite(f_cand)) and np.linalg.norm(f_cand) < norm0:
                theta, f = cand, f_cand
                break
            t_step *= 0.5
        else:
            raise SolverError(
                f"no descent direction; residual norm {norm0:.3e} after {iterations} iterations")
        iterations += 1
    if return_info:
        return theta, {"iterations": iterations, "residual_norm": float(np.linalg.norm(f))}
    return theta
