"""Design-matrix construction for working models.

Term grammar (strings):

* ``"1"``            intercept
* ``"<var>"``        raw variable
* ``"<v1>*<v2>"``    product of two variables
* ``"s3(<var>)"``    natural cubic spline with 3 degrees of freedom: interior
                     knots at the 1/3 and 2/3 sample quantiles, boundary knots
                     at the sample range, linear beyond the boundary knots

Variables are ``x``, ``z``, ``w``, ``logwm1`` (= log(w-1)), with indexed forms
``x0``, ``x1``, ..., ``z0``, ... for vector covariates.  Spline knots are
frozen when a spec is bound to its fitting data, so predictions on new rows
reuse the training knots.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .data import SurveyDataset, UnitRecord
from .errors import DataError, FitError

_VAR_RE = re.compile(r"^(x|z)(\d*)$|^w$|^logwm1$")
_SPLINE_RE = re.compile(r"^s3\((\w+)\)$")


def frame_from_dataset(data: SurveyDataset, rows: slice | np.ndarray | None = None) -> dict:
    rows = slice(None) if rows is None else rows
    return {"x": data.x[rows], "z": data.z[rows], "w": data.w[rows]}


def frame_from_records(records: Sequence[UnitRecord]) -> dict:
    x = np.vstack([np.atleast_1d(np.asarray(u.x, float)) for u in records])
    z_rows = [np.atleast_1d(np.asarray(u.z, float)) if u.z is not None else None
              for u in records]
    dz = max((len(zi) for zi in z_rows if zi is not None), default=1)
    z = np.full((len(records), dz), np.nan)
    for i, zi in enumerate(z_rows):
        if zi is not None:
            z[i] = zi
    return {"x": x, "z": z, "w": np.array([u.w for u in records], dtype=float)}


def _as_frame(obj) -> dict:
    if isinstance(obj, dict):
        return obj
    if isinstance(obj, SurveyDataset):
        return frame_from_dataset(obj)
    return frame_from_records(obj)


def resolve_var(frame: dict, var: str) -> np.ndarray:
    """Return the named variable as a 1-d column, validating availability."""
    if var == "w":
        col = np.asarray(frame["w"], dtype=float)
    elif var == "logwm1":
        w = np.asarray(frame["w"], dtype=float)
        bad = np.where(~(w > 1.0))[0]
        if bad.size:
            raise FitError(f"log(w-1) undefined at row {bad[0]} (w = {w[bad[0]]!r})")
        col = np.log(w - 1.0)
    else:
        match = _VAR_RE.match(var)
        if not match or match.group(1) is None:
            raise DataError(f"unknown variable {var!r}")
        base, idx = match.group(1), match.group(2)
        mat = np.asarray(frame[base], dtype=float)
        if idx == "":
            if mat.shape[1] != 1:
                raise DataError(f"{base} has {mat.shape[1]} components; use {base}0..")
            col = mat[:, 0]
        else:
            j = int(idx)
            if j >= mat.shape[1]:
                raise DataError(f"variable {var!r} out of range")
            col = mat[:, j]
    bad = np.where(~np.isfinite(col))[0]
    if bad.size:
        raise DataError(f"variable {var!r} missing or non-finite at row {bad[0]}")
    return col


def _parse_term(term: str) -> tuple:
    term = term.strip()
    if term == "1":
        return ("intercept",)
    sp = _SPLINE_RE.match(term)
    if sp:
        return ("spline3", sp.group(1))
    if "*" in term:
        left, _, right = term.partition("*")
        return ("interaction", left.strip(), right.strip())
    return ("raw", term)


def _term_vars(parsed: tuple) -> tuple[str, ...]:
    return tuple(v for v in parsed[1:])


def _natural_cubic(v: np.ndarray, knots: tuple[float, ...]) -> np.ndarray:
    """3-column natural cubic spline basis for 4 knots (linear tails)."""
    k = np.asarray(knots, dtype=float)

    def d(j):
        num = np.maximum(v - k[j], 0.0) ** 3 - np.maximum(v - k[3], 0.0) ** 3
        return num / (k[3] - k[j])

    d2 = d(2)
    return np.column_stack([v, d(0) - d2, d(1) - d2])


@dataclass(frozen=True)
class BasisSpec:
    """Unbound term list for a working-model design matrix."""

    terms: tuple[str, ...]

    def __init__(self, terms: Iterable[str]):
        object.__setattr__(self, "terms", tuple(terms))
        for t in self.terms:
            _parse_term(t)

    @property
    def variables(self) -> tuple[str, ...]:
        seen: list[str] = []
        for t in self.terms:
            for v in _term_vars(_parse_term(t)):
                if v not in seen:
                    seen.append(v)
        return tuple(seen)

    def bind(self, fitting_data) -> "BoundBasis":
        """Freeze spline knots against the fitting rows."""
        frame = _as_frame(fitting_data)
        knots = []
        for t in self.terms:
            parsed = _parse_term(t)
            if parsed[0] != "spline3":
                knots.append(None)
                continue
            col = resolve_var(frame, parsed[1])
            ks = (float(col.min()),
                  float(np.quantile(col, 1 / 3)),
                  float(np.quantile(col, 2 / 3)),
                  float(col.max()))
            if not (ks[0] < ks[1] < ks[2] < ks[3]):
                raise FitError(f"degenerate spline knots for term {t!r}: {ks}")
            knots.append(ks)
        return BoundBasis(terms=self.terms, knots=tuple(knots))


@dataclass(frozen=True)
class BoundBasis:
    """BasisSpec with frozen spline knots; produces design matrices."""

    terms: tuple[str, ...]
    knots: tuple[tuple[float, ...] | None, ...]

    @property
    def columns(self) -> tuple[str, ...]:
        names: list[str] = []
        for t in self.terms:
            if _parse_term(t)[0] == "spline3":
                names.extend(f"{t}[{j}]" for j in (1, 2, 3))
            else:
                names.append(t)
        return tuple(names)

    def design(self, data) -> np.ndarray:
        frame = _as_frame(data)
        rows = np.asarray(frame["w"]).shape[0]
        cols: list[np.ndarray] = []
        for t, ks in zip(self.terms, self.knots):
            parsed = _parse_term(t)
            if parsed[0] == "intercept":
                cols.append(np.ones(rows))
            elif parsed[0] == "raw":
                cols.append(resolve_var(frame, parsed[1]))
            elif parsed[0] == "interaction":
                cols.append(resolve_var(frame, parsed[1]) * resolve_var(frame, parsed[2]))
            else:
                cols.append(_natural_cubic(resolve_var(frame, parsed[1]), ks))
        return np.column_stack(cols)


def check_full_rank(design: np.ndarray, columns: Sequence[str]) -> None:
    """Reject rank-deficient designs, naming the collinear columns."""
    nrows, ncols = design.shape
    if nrows < ncols:
        raise FitError(f"design has {ncols} columns but only {nrows} rows")
    _, rdiag, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rdiag))
    tol = (diag.max() if diag.size else 0.0) * max(design.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    if rank < ncols:
        bad = sorted(piv[rank:].tolist())
        names = ", ".join(columns[j] for j in bad)
        raise FitError(f"design matrix rank deficient; collinear columns: {names}")


def build_design(basis: BasisSpec | BoundBasis, data, check_rank: bool = True) -> np.ndarray:
    """One row per record, columns in term order; checks full column rank."""
    bound = basis.bind(data) if isinstance(basis, BasisSpec) else basis
    design = bound.design(data)
    if check_rank:
        check_full_rank(design, bound.columns)
    return design
