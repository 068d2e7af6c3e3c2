"""Domain types and file ingestion for two-phase survey data.

A dataset holds one row per materialized unit with covariates ``x``, auxiliary
covariates ``z``, sampling weight ``w`` (inverse inclusion probability),
outcome ``y``, sampling indicator ``delta`` and response indicator ``r``.
Missing entries are stored as NaN.  Rows are kept in canonical order:
respondents first (delta=1, r=1), then sampled nonrespondents (delta=1, r=0),
then unsampled units (delta=0); original order is preserved within each block.
Estimation code relies on that ordering to align weight vectors of different
lengths (respondents / sampled / all units) without index bookkeeping.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

MISSING_TOKENS = ("", "NA")


class Setting(enum.IntEnum):
    """Data-availability regimes for the unsampled part of the population."""

    FULL_COVARIATES = 1  # x observed for every population unit
    SAMPLED_ONLY = 2     # only sampled rows materialized, N known as a count
    EXTERNAL = 3         # as SAMPLED_ONLY, plus external summary statistics

    @classmethod
    def coerce(cls, value) -> "Setting":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            value = value.strip().lower().removeprefix("setting").strip()
        try:
            return cls(int(value))
        except (TypeError, ValueError) as exc:
            raise DataError(f"unknown setting {value!r}") from exc


@dataclass(frozen=True)
class UnitRecord:
    """One population or sampled unit."""

    x: np.ndarray | None
    z: np.ndarray | None
    w: float
    y: float | None
    delta: int
    r: int


@dataclass(frozen=True)
class ExternalSummary:
    """Summary statistic from an external data source.

    ``tau_tilde`` estimates a parameter of the fully observed covariates,
    ``sigma1_tilde`` its asymptotic variance, ``n1`` the external sample size
    (``n1 = 0`` encodes an absent/uninformative source).
    """

    tau_tilde: np.ndarray
    sigma1_tilde: np.ndarray
    n1: int

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau_tilde, dtype=float))
        sig = np.atleast_2d(np.asarray(self.sigma1_tilde, dtype=float))
        object.__setattr__(self, "tau_tilde", tau)
        object.__setattr__(self, "sigma1_tilde", sig)
        if sig.shape != (tau.size, tau.size):
            raise DataError("sigma1_tilde dimensions do not match tau_tilde")
        if not np.allclose(sig, sig.T):
            raise DataError("sigma1_tilde must be symmetric")
        if np.any(np.linalg.eigvalsh(sig) <= 0):
            raise DataError("sigma1_tilde must be positive definite")
        if self.n1 < 0:
            raise DataError("n1 must be nonnegative")


def _as_matrix(a, rows: int, name: str) -> np.ndarray:
    if a is None:
        return np.full((rows, 1), np.nan)
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != rows:
        raise DataError(f"{name} must have one row per unit")
    return a


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Immutable columnar survey dataset in canonical unit order."""

    x: np.ndarray       # (rows, dx), NaN rows where x unobserved
    z: np.ndarray       # (rows, dz)
    w: np.ndarray       # (rows,)
    y: np.ndarray       # (rows,)
    delta: np.ndarray   # (rows,) in {0, 1}
    r: np.ndarray       # (rows,) in {0, 1}
    N: int
    setting: Setting
    order: np.ndarray = field(repr=False, default=None)  # original row index

    @property
    def rows(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        """Number of sampled units."""
        return int(self.delta.sum())

    @property
    def m(self) -> int:
        """Number of respondents (delta=1, r=1)."""
        return int((self.delta * self.r).sum())

    @property
    def records(self) -> tuple[UnitRecord, ...]:
        out = []
        for i in range(self.rows):
            xi = self.x[i]
            zi = self.z[i]
            out.append(UnitRecord(
                x=None if np.isnan(xi).all() else xi.copy(),
                z=None if np.isnan(zi).all() else zi.copy(),
                w=float(self.w[i]),
                y=None if np.isnan(self.y[i]) else float(self.y[i]),
                delta=int(self.delta[i]),
                r=int(self.r[i]),
            ))
        return tuple(out)

    @classmethod
    def from_arrays(cls, x, z, w, y, delta, r, N: int, setting,
                    canonicalize: bool = True) -> "SurveyDataset":
        setting = Setting.coerce(setting)
        w = np.asarray(w, dtype=float)
        rows = w.shape[0]
        x = _as_matrix(x, rows, "x")
        z = _as_matrix(z, rows, "z")
        y = np.full(rows, np.nan) if y is None else np.asarray(y, dtype=float)
        delta = np.asarray(delta, dtype=np.int8)
        r = np.asarray(r, dtype=np.int8)
        for name, col in (("y", y), ("delta", delta), ("r", r)):
            if col.shape != (rows,):
                raise DataError(f"{name} must have one entry per unit")
        order = np.arange(rows)
        if canonicalize:
            # block key 0: respondent, 1: sampled nonrespondent, 2: unsampled
            key = np.where(delta == 0, 2, np.where(r == 1, 0, 1))
            order = np.argsort(key, kind="stable")
            x, z, w, y = x[order], z[order], w[order], y[order]
            delta, r = delta[order], r[order]
        arrays = {}
        for name, col in (("x", x), ("z", z), ("w", w), ("y", y),
                          ("delta", delta), ("r", r), ("order", order)):
            col = np.ascontiguousarray(col)
            col.setflags(write=False)
            arrays[name] = col
        return cls(N=int(N), setting=setting, **arrays)

    @classmethod
    def from_records(cls, records: Sequence[UnitRecord], N: int, setting,
                     canonicalize: bool = True) -> "SurveyDataset":
        rows = len(records)
        dx = max((len(np.atleast_1d(u.x)) for u in records if u.x is not None), default=1)
        dz = max((len(np.atleast_1d(u.z)) for u in records if u.z is not None), default=1)
        x = np.full((rows, dx), np.nan)
        z = np.full((rows, dz), np.nan)
        w = np.full(rows, np.nan)
        y = np.full(rows, np.nan)
        delta = np.zeros(rows, dtype=np.int8)
        rr = np.zeros(rows, dtype=np.int8)
        for i, u in enumerate(records):
            if u.x is not None:
                xi = np.atleast_1d(np.asarray(u.x, dtype=float))
                if xi.size != dx:
                    raise DataError(f"inconsistent x dimension at row {i}")
                x[i] = xi
            if u.z is not None:
                zi = np.atleast_1d(np.asarray(u.z, dtype=float))
                if zi.size != dz:
                    raise DataError(f"inconsistent z dimension at row {i}")
                z[i] = zi
            w[i] = u.w
            if u.y is not None:
                y[i] = u.y
            delta[i] = u.delta
            rr[i] = u.r
        return cls.from_arrays(x, z, w, y, delta, rr, N=N, setting=setting,
                               canonicalize=canonicalize)

    def take(self, idx: np.ndarray) -> "SurveyDataset":
        """Dataset of the selected rows, re-canonicalized; N and setting kept."""
        return SurveyDataset.from_arrays(
            self.x[idx], self.z[idx], self.w[idx], self.y[idx],
            self.delta[idx], self.r[idx], N=self.N, setting=self.setting)

    def project_sampled(self, setting=Setting.SAMPLED_ONLY) -> "SurveyDataset":
        """Drop unsampled rows, keeping N as a count (Setting 2/3 view)."""
        keep = self.delta == 1
        return SurveyDataset.from_arrays(
            self.x[keep], self.z[keep], self.w[keep], self.y[keep],
            self.delta[keep], self.r[keep], N=self.N, setting=setting)

    def equals(self, other: "SurveyDataset") -> bool:
        if (self.N, self.setting, self.rows) != (other.N, other.setting, other.rows):
            return False
        for a, b in ((self.x, other.x), (self.z, other.z), (self.w, other.w),
                     (self.y, other.y), (self.delta, other.delta), (self.r, other.r)):
            if a.shape != b.shape or not np.array_equal(a, b, equal_nan=True):
                return False
        return True


@dataclass
class ValidationReport:
    """Counts, weight range, and invariant violations for a dataset."""

    N: int
    n: int
    m: int
    setting: int
    weight_min: float
    weight_max: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [
            f"N={self.N} n={self.n} m={self.m} setting={self.setting}",
            f"weight range: [{self.weight_min}, {self.weight_max}]",
            f"violations: {len(self.violations)}",
        ]
        lines.extend("  - " + v for v in self.violations)
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "N": self.N, "n": self.n, "m": self.m, "setting": self.setting,
            "weight_min": self.weight_min, "weight_max": self.weight_max,
            "violations": self.violations, "ok": self.ok,
        }, sort_keys=True)


def validate(dataset: SurveyDataset) -> ValidationReport:
    """Report every invariant violation; an empty list means the dataset is usable.

    Row indices refer to the dataset's current row order (original file order
    when called on a freshly parsed, not yet canonicalized dataset).
    """
    d = dataset
    sampled_w = d.w[d.delta == 1]
    finite_w = d.w[np.isfinite(d.w)]
    report = ValidationReport(
        N=d.N, n=d.n, m=d.m, setting=int(d.setting),
        weight_min=float(finite_w.min()) if finite_w.size else float("nan"),
        weight_max=float(finite_w.max()) if finite_w.size else float("nan"),
    )
    v = report.violations
    x_absent = np.isnan(d.x).all(axis=1)
    z_absent = np.isnan(d.z).all(axis=1)
    y_absent = np.isnan(d.y)
    for i in range(d.rows):
        if d.r[i] == 1 and d.delta[i] == 0:
            v.append(f"monotone pattern violated at row {i} (r=1 with delta=0)")
        observed = d.delta[i] == 1 and d.r[i] == 1
        if observed and y_absent[i]:
            v.append(f"y missing for respondent at row {i}")
        if not observed and not y_absent[i]:
            v.append(f"y present without delta*r=1 at row {i}")
        if d.delta[i] == 1:
            if not np.isfinite(d.w[i]):
                v.append(f"w missing for sampled unit at row {i}")
            elif d.w[i] < 1:
                v.append(f"weight below 1 at row {i}")
            if z_absent[i]:
                v.append(f"z missing for sampled unit at row {i}")
            if x_absent[i]:
                v.append(f"x missing for sampled unit at row {i}")
        else:
            if np.isfinite(d.w[i]) and d.w[i] < 1:
                v.append(f"weight below 1 at row {i}")
            if not z_absent[i]:
                v.append(f"z present for unsampled unit at row {i}")
            if d.setting == Setting.FULL_COVARIATES and x_absent[i]:
                v.append(f"x required for all units in Setting 1 (row {i})")
    if d.setting == Setting.FULL_COVARIATES:
        if d.rows != d.N:
            v.append(f"Setting 1 requires all N={d.N} units materialized (got {d.rows})")
    else:
        if np.any(d.delta == 0):
            v.append("unsampled rows must not be materialized in Settings 2/3")
        if d.rows > d.N:
            v.append(f"more materialized rows ({d.rows}) than N={d.N}")
    return report


def _default_schema(dx: int = 1, dz: int = 1) -> dict:
    x_cols = ["x"] if dx == 1 else [f"x{i}" for i in range(dx)]
    z_cols = ["z"] if dz == 1 else [f"z{i}" for i in range(dz)]
    return {"x": x_cols, "z": z_cols, "w": "w", "y": "y", "delta": "delta", "r": "r"}


def _parse_cell(token: str, row: int, col: str) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return np.nan
    try:
        return float(token)
    except ValueError as exc:
        raise DataError(f"non-numeric value {token!r} in column {col!r} at row {row}") from exc


def load_dataset(path, setting, schema: dict | None = None, N: int | None = None,
                 delimiter: str = ",") -> SurveyDataset:
    """Parse a delimited text file into a validated, canonically ordered dataset.

    Missing values are encoded as empty fields or the literal ``NA``.  ``N`` is
    required for Settings 2/3 and inferred as the row count for Setting 1.
    """
    setting = Setting.coerce(setting)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = [line for line in reader if line]
    schema = dict(schema or _default_schema())
    x_cols = schema["x"] if isinstance(schema["x"], (list, tuple)) else [schema["x"]]
    z_cols = schema["z"] if isinstance(schema["z"], (list, tuple)) else [schema["z"]]
    scalar_cols = {k: schema[k] for k in ("w", "y", "delta", "r")}
    col_index = {}
    for name in [*x_cols, *z_cols, *scalar_cols.values()]:
        if name not in header:
            raise DataError(f"{path}: column {name!r} not found in header")
        col_index[name] = header.index(name)

    nrows = len(rows)
    x = np.full((nrows, len(x_cols)), np.nan)
    z = np.full((nrows, len(z_cols)), np.nan)
    w = np.full(nrows, np.nan)
    y = np.full(nrows, np.nan)
    delta = np.zeros(nrows, dtype=np.int8)
    r = np.zeros(nrows, dtype=np.int8)
    for i, line in enumerate(rows):
        if len(line) != len(header):
            raise DataError(f"{path}: row {i} has {len(line)} fields, expected {len(header)}")
        for j, name in enumerate(x_cols):
            x[i, j] = _parse_cell(line[col_index[name]], i, name)
        for j, name in enumerate(z_cols):
            z[i, j] = _parse_cell(line[col_index[name]], i, name)
        w[i] = _parse_cell(line[col_index[scalar_cols["w"]]], i, scalar_cols["w"])
        y[i] = _parse_cell(line[col_index[scalar_cols["y"]]], i, scalar_cols["y"])
        for name, target in (("delta", delta), ("r", r)):
            val = _parse_cell(line[col_index[scalar_cols[name]]], i, scalar_cols[name])
            if np.isnan(val) or val not in (0.0, 1.0):
                raise DataError(f"{path}: {name} must be 0 or 1 at row {i}")
            target[i] = int(val)

    if setting == Setting.FULL_COVARIATES:
        if N is None:
            N = nrows
        elif N != nrows:
            raise DataError(f"{path}: Setting 1 has N={N} but {nrows} rows")
    elif N is None:
        raise DataError("N must be supplied explicitly for Settings 2/3")

    raw = SurveyDataset.from_arrays(x, z, w, y, delta, r, N=N, setting=setting,
                                    canonicalize=False)
    report = validate(raw)
    if not report.ok:
        raise DataError(f"{path}: invalid dataset:\n" + "\n".join(report.violations))
    return SurveyDataset.from_arrays(x, z, w, y, delta, r, N=N, setting=setting)


def _format_cell(value: float) -> str:
    if np.isnan(value):
        return ""
    return repr(float(value))


def save_dataset(dataset: SurveyDataset, path, delimiter: str = ",") -> None:
    """Write a dataset using the default schema; round-trips through load_dataset."""
    d = dataset
    dx, dz = d.x.shape[1], d.z.shape[1]
    schema = _default_schema(dx, dz)
    header = [*schema["x"], *schema["z"], "w", "y", "delta", "r"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for i in range(d.rows):
            row = [_format_cell(v) for v in d.x[i]]
            row += [_format_cell(v) for v in d.z[i]]
            row += [_format_cell(d.w[i]), _format_cell(d.y[i]),
                    str(int(d.delta[i])), str(int(d.r[i]))]
            writer.writerow(row)


def load_external_summary(spec: dict) -> ExternalSummary:
    """Build an ExternalSummary from a config mapping with keys tau, sigma1, n1."""
    try:
        return ExternalSummary(
            tau_tilde=np.asarray(spec["tau"], dtype=float),
            sigma1_tilde=np.asarray(spec["sigma1"], dtype=float),
            n1=int(spec["n1"]),
        )
    except KeyError as exc:
        raise DataError(f"external summary config missing key {exc}") from exc
