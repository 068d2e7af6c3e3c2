"""Fitting of the three nuisance model families.

* response model: logistic regression of R on a basis, fitted by maximum
  likelihood over the sampled units (iteratively reweighted least squares);
* outcome regression: least squares of Y on a basis over respondents;
* C-function (augmentation) model: least squares of Y on an x-only basis over
  respondents with weights w*(w-1), or the corresponding weighted mean for the
  constant form used when x is unavailable outside the sample.

Fitted models are immutable; they carry their bound basis so predictions on
new rows reuse the training spline knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .basis import BasisSpec, BoundBasis, check_full_rank, frame_from_dataset, _as_frame, _parse_term, _term_vars
from .data import SurveyDataset
from .errors import FitError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ResponseModel:
    """Logistic response-probability model pi(x, z, w)."""

    basis: BoundBasis
    alpha: np.ndarray

    def predict(self, data) -> np.ndarray:
        eta = self.basis.design(_as_frame(data)) @ self.alpha
        return np.clip(expit(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)

    def information(self, data) -> np.ndarray:
        """Observed Fisher information X' diag(p(1-p)) X at the fitted alpha."""
        design = self.basis.design(_as_frame(data))
        p = self.predict(data)
        return design.T @ (design * (p * (1.0 - p))[:, None])


@dataclass(frozen=True)
class OutcomeModel:
    """Conditional-mean model m(x, z, w) for the outcome."""

    basis: BoundBasis
    beta: np.ndarray

    def predict(self, data) -> np.ndarray:
        return self.basis.design(_as_frame(data)) @ self.beta


@dataclass(frozen=True)
class CModel:
    """Augmentation-function model kappa(x) = E{(W-1)Y | x} / E(W-1 | x)."""

    form: str  # "function_of_x" or "constant"
    gamma: np.ndarray
    basis: BoundBasis | None = None

    def predict(self, data) -> np.ndarray:
        frame = _as_frame(data)
        rows = np.asarray(frame["w"]).shape[0]
        if self.form == "constant":
            return np.full(rows, self.gamma[0])
        return self.basis.design(frame) @ self.gamma


def _sampled_frame(data: SurveyDataset) -> dict:
    return frame_from_dataset(data, slice(0, data.n))


def _respondent_frame(data: SurveyDataset) -> dict:
    return frame_from_dataset(data, slice(0, data.m))


def _log_likelihood(r: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(r @ np.log(p) + (1.0 - r) @ np.log1p(-p))


def fit_response_mle(data: SurveyDataset, basis: BasisSpec,
                     max_iter: int = 100, gtol: float = 1e-8,
                     trace: list | None = None) -> ResponseModel:
    """Maximum-likelihood logistic fit of R on the basis over sampled units."""
    n = data.n
    frame = _sampled_frame(data)
    r = data.r[:n].astype(float)
    bound = basis.bind(frame)
    design = bound.design(frame)
    check_full_rank(design, bound.columns)
    if n < design.shape[1]:
        raise FitError(f"{n} sampled units for {design.shape[1]} coefficients")
    if r.min() == r.max():
        raise FitError("separation detected: single response class among sampled units")

    alpha = np.zeros(design.shape[1])
    loglik = _log_likelihood(r, expit(design @ alpha))
    if trace is not None:
        trace.append(loglik)
    ridged = False
    for _ in range(max_iter):
        p = np.clip(expit(design @ alpha), PROB_FLOOR, 1.0 - PROB_FLOOR)
        grad = design.T @ (r - p)
        if np.abs(grad).max() < gtol:
            return ResponseModel(basis=bound, alpha=alpha)
        hess = design.T @ (design * (p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            if ridged:
                raise FitError("singular information matrix") from None
            ridged = True  # one ridge retry for near-degenerate resamples
            step = np.linalg.solve(hess + 1e-8 * np.eye(hess.shape[0]), grad)
        t = 1.0
        for _ in range(30):
            cand = alpha + t * step
            cand_ll = _log_likelihood(r, expit(design @ cand))
            if cand_ll >= loglik:
                alpha, loglik = cand, cand_ll
                break
            t *= 0.5
        else:
            raise FitError("response MLE stalled: no ascent step found")
        if trace is not None:
            trace.append(loglik)
        if np.abs(alpha).max() > 1e3:
            raise FitError("separation detected: coefficients diverging")
    raise FitError(f"response MLE did not converge in {max_iter} iterations")


def _weighted_lstsq(design: np.ndarray, y: np.ndarray, weights: np.ndarray | None,
                    columns) -> np.ndarray:
    check_full_rank(design, columns)
    if weights is None:
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return coef
    sw = np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return coef


def fit_outcome_ls(data: SurveyDataset, basis: BasisSpec) -> OutcomeModel:
    """Least-squares fit of Y on the basis over respondents."""
    m = data.m
    if m == 0:
        raise FitError("no respondents to fit the outcome model")
    frame = _respondent_frame(data)
    bound = basis.bind(frame)
    design = bound.design(frame)
    if m < design.shape[1]:
        raise FitError(f"{m} respondents for {design.shape[1]} coefficients")
    beta = _weighted_lstsq(design, data.y[:m], None, bound.columns)
    return OutcomeModel(basis=bound, beta=beta)


def fit_c_model(data: SurveyDataset, basis: BasisSpec | None,
                form: str = "function_of_x") -> CModel:
    """w(w-1)-weighted fit of Y over respondents; constant form is the weighted mean."""
    m = data.m
    if m == 0:
        raise FitError("no respondents to fit the C model")
    w = data.w[:m]
    y = data.y[:m]
    v = w * (w - 1.0)
    if not np.any(v > 0):
        raise FitError("all w(w-1) weights are zero; C model unidentified")
    if form == "constant":
        return CModel(form="constant", gamma=np.array([float(v @ y / v.sum())]))
    if form != "function_of_x":
        raise FitError(f"unknown C-model form {form!r}")
    for t in basis.terms:
        for var in _term_vars(_parse_term(t)):
            if not var.startswith("x"):
                raise FitError(f"C-model basis may only use x variables, got {var!r}")
    frame = _respondent_frame(data)
    bound = basis.bind(frame)
    design = bound.design(frame)
    if m < design.shape[1]:
        raise FitError(f"{m} respondents for {design.shape[1]} coefficients")
    gamma = _weighted_lstsq(design, y, v, bound.columns)
    return CModel(form="function_of_x", gamma=gamma, basis=bound)
