"""Cohort data structures, CSV ingestion, and instrument-model fitting.

A cohort row is one subject: a follow-up time, an event cause (0 meaning
censored, 1 and 2 the two competing causes), an exposure, an instrument,
and optional baseline covariates. Everything downstream works on the
column-array representation held by :class:`CohortDataset`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    NoEventsError,
    RankDeficiencyError,
    ValidationError,
)

VALID_CAUSES = (0, 1, 2)
INSTRUMENT_FAMILIES = ("intercept_only", "linear", "logistic")

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class Subject:
    """A single cohort record.

    Attributes:
        id: unique integer label, used to break event-time ties.
        time: observed follow-up time, nonnegative.
        cause: 0 (censored), 1, or 2.
        exposure: exposure value, used as given (never centered).
        instrument: instrument value.
        covariates: baseline covariate vector (possibly empty).
    """

    id: int
    time: float
    cause: int
    exposure: float
    instrument: float
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time < 0:
            raise ValidationError(f"subject {self.id}: time must be finite and >= 0, got {self.time!r}")
        if self.cause not in VALID_CAUSES:
            raise ValidationError(f"subject {self.id}: cause must be one of {VALID_CAUSES}, got {self.cause!r}")
        for name, v in (("exposure", self.exposure), ("instrument", self.instrument)):
            if not np.isfinite(v):
                raise ValidationError(f"subject {self.id}: {name} must be finite, got {v!r}")
        if any(not np.isfinite(c) for c in self.covariates):
            raise ValidationError(f"subject {self.id}: covariates must be finite")


class CohortDataset:
    """Column-array view of a cohort.

    Validates on construction: nonempty, unique ids, finite values, causes
    in {0, 1, 2}, rectangular covariates. Missing values are rejected, not
    imputed.
    """

    def __init__(self, ids, times, causes, exposures, instruments, covariates=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.times = np.asarray(times, dtype=np.float64)
        self.causes = np.asarray(causes, dtype=np.int64)
        self.exposures = np.asarray(exposures, dtype=np.float64)
        self.instruments = np.asarray(instruments, dtype=np.float64)
        n = self.ids.shape[0]
        if covariates is None:
            covariates = np.empty((n, 0))
        self.covariates = np.asarray(covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(n, -1)
        self._validate()

    def _validate(self):
        n = self.n
        if n == 0:
            raise ValidationError("cohort is empty")
        for name, arr in (("times", self.times), ("causes", self.causes),
                          ("exposures", self.exposures), ("instruments", self.instruments)):
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
        if self.covariates.shape[0] != n:
            raise ValidationError(f"covariates have {self.covariates.shape[0]} rows, expected {n}")
        if np.unique(self.ids).size != n:
            raise ValidationError("subject ids must be unique")
        if not np.all(np.isfinite(self.times)) or np.any(self.times < 0):
            raise ValidationError("times must be finite and >= 0")
        if not np.all(np.isin(self.causes, VALID_CAUSES)):
            bad = self.causes[~np.isin(self.causes, VALID_CAUSES)][0]
            raise ValidationError(f"causes must be 0, 1, or 2; got {bad}")
        for name, arr in (("exposures", self.exposures), ("instruments", self.instruments),
                          ("covariates", self.covariates)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contain non-finite values")

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @classmethod
    def from_subjects(cls, subjects: Iterable[Subject]) -> "CohortDataset":
        subjects = list(subjects)
        if not subjects:
            raise ValidationError("cohort is empty")
        p = len(subjects[0].covariates)
        if any(len(s.covariates) != p for s in subjects):
            raise ValidationError("all subjects must have the same number of covariates")
        return cls(
            ids=[s.id for s in subjects],
            times=[s.time for s in subjects],
            causes=[s.cause for s in subjects],
            exposures=[s.exposure for s in subjects],
            instruments=[s.instrument for s in subjects],
            covariates=np.array([s.covariates for s in subjects], dtype=np.float64).reshape(len(subjects), p),
        )


def _parse_cell(raw: str, column: str, row_number: int, kind: str = "float") -> float:
    text = raw.strip() if raw is not None else ""
    if text.lower() in _MISSING_TOKENS:
        raise ValidationError(f"row {row_number}: missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"row {row_number}: column {column!r} is not numeric: {raw!r}") from None
    if not np.isfinite(value):
        raise ValidationError(f"row {row_number}: column {column!r} is not finite: {raw!r}")
    if kind == "int":
        if value != int(value):
            raise ValidationError(f"row {row_number}: column {column!r} must be an integer: {raw!r}")
        return int(value)
    return value


def parse_cohort_csv(path, time_col="time", cause_col="cause", exposure_col="exposure",
                     instrument_col="instrument", covariate_cols: Sequence[str] = (),
                     id_col: str | None = None) -> CohortDataset:
    """Read a cohort from a headered CSV file.

    Errors name the offending row (1-based, counting the header as row 1)
    and column. When no id column is given, subjects are labeled by data
    row order starting at 0.
    """
    covariate_cols = list(covariate_cols)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file, expected a header row")
        needed = [time_col, cause_col, exposure_col, instrument_col] + covariate_cols
        if id_col is not None:
            needed.append(id_col)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}; header has {reader.fieldnames}")
        ids, times, causes, exposures, instruments, covs = [], [], [], [], [], []
        for i, row in enumerate(reader):
            rownum = i + 2  # header is row 1
            times.append(_parse_cell(row[time_col], time_col, rownum))
            cause = _parse_cell(row[cause_col], cause_col, rownum, kind="int")
            if cause not in (0, 1, 2):
                raise ValidationError(
                    f"{path}: row {rownum}, column {cause_col!r}: cause must be 0, 1, or 2; got {cause}")
            causes.append(cause)
            exposures.append(_parse_cell(row[exposure_col], exposure_col, rownum))
            instruments.append(_parse_cell(row[instrument_col], instrument_col, rownum))
            covs.append([_parse_cell(row[c], c, rownum) for c in covariate_cols])
            ids.append(_parse_cell(row[id_col], id_col, rownum, kind="int") if id_col else i)
        if not times:
            raise ValidationError(f"{path}: no data rows")
    covariates = np.asarray(covs, dtype=np.float64).reshape(len(times), len(covariate_cols))
    try:
        return CohortDataset(ids, times, causes, exposures, instruments, covariates)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class EventTable:
    """Ordered event sequence plus closed at-risk bookkeeping.

    Events are the uncensored subjects with time <= horizon, ordered by
    (time, cause, subject id) ascending. At-risk sets are closed,
    R_i(t) = 1{t <= T_i}, so a subject remains at risk at its own event
    time. Because at-risk sets are nested, they are stored as suffixes of
    the follow-up-time sort order rather than materialized per event.

    Attributes:
        times: event times, nondecreasing (strictly increasing when the
            data carry no ties).
        causes: event causes, each 1 or 2.
        subjects: row index of the event subject in the source dataset.
        horizon: upper end of the estimation window.
        risk_order: dataset row indices sorted by follow-up time ascending.
        risk_start: per event, first position in risk_order that is at risk.
    """

    times: np.ndarray
    causes: np.ndarray
    subjects: np.ndarray
    horizon: float
    risk_order: np.ndarray
    risk_start: np.ndarray

    @property
    def n_events(self) -> int:
        return self.times.shape[0]

    @property
    def n_at_risk(self) -> np.ndarray:
        return self.risk_order.shape[0] - self.risk_start

    def at_risk_indices(self, k: int) -> np.ndarray:
        """Dataset row indices at risk at the k-th event time."""
        return self.risk_order[self.risk_start[k]:]


def build_event_table(data: CohortDataset, horizon: float | None = None) -> EventTable:
    """Order the events and set up at-risk bookkeeping.

    The horizon defaults to the last uncensored event time. Raises
    NoEventsError when no event falls inside the window.
    """
    event_mask = data.causes != 0
    if not np.any(event_mask):
        raise NoEventsError("no uncensored events in cohort; nothing to estimate")
    if horizon is None:
        horizon = float(data.times[event_mask].max())
    elif horizon <= 0 or not np.isfinite(horizon):
        raise ValidationError(f"horizon must be positive and finite, got {horizon!r}")
    event_mask &= data.times <= horizon
    if not np.any(event_mask):
        raise NoEventsError(f"no uncensored events at or before horizon {horizon!r}")

    ev = np.flatnonzero(event_mask)
    # deterministic tie order: time, then cause 1 before cause 2, then id
    order = ev[np.lexsort((data.ids[ev], data.causes[ev], data.times[ev]))]
    risk_order = np.argsort(data.times, kind="stable")
    sorted_times = data.times[risk_order]
    times = data.times[order]
    return EventTable(
        times=times,
        causes=data.causes[order],
        subjects=order,
        horizon=float(horizon),
        risk_order=risk_order,
        risk_start=np.searchsorted(sorted_times, times, side="left"),
    )


@dataclass(frozen=True)
class InstrumentModelSpec:
    """Choice of working model for E(instrument | covariates).

    family:
        "intercept_only": the instrument mean, no covariates.
        "linear": least squares of the instrument on (1, covariates).
        "logistic": logistic regression, requires a binary instrument.
    covariate_indices: which dataset covariate columns enter the design.
    """

    family: str = "intercept_only"
    covariate_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.family not in INSTRUMENT_FAMILIES:
            raise ValidationError(
                f"unknown instrument model family {self.family!r}; expected one of {INSTRUMENT_FAMILIES}")


@dataclass(frozen=True)
class FittedInstrumentModel:
    """Fitted instrument mean model with its estimating-equation pieces.

    residuals are G_i - mu(L_i; theta_hat), the centered instrument the
    estimator consumes. influence holds one row per subject: the iid
    linearization of theta_hat, so that
    sqrt(n) (theta_hat - theta) ~ n^{-1/2} sum_i influence_i.
    """

    spec: InstrumentModelSpec
    theta: np.ndarray
    design: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    influence: np.ndarray

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    def mean_at(self, theta: np.ndarray) -> np.ndarray:
        """Model mean mu(L; theta) at an arbitrary parameter value."""
        theta = np.asarray(theta, dtype=np.float64)
        eta = self.design @ theta
        if self.spec.family == "logistic":
            return _expit(eta)
        return eta

    def mean_gradient_at(self, theta: np.ndarray | None = None) -> np.ndarray:
        """Rows d mu(L_i; theta) / d theta, an (n, q) array."""
        if theta is None:
            theta = self.theta
        if self.spec.family == "logistic":
            mu = self.mean_at(theta)
            return (mu * (1.0 - mu))[:, None] * self.design
        return self.design


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _instrument_design(data: CohortDataset, spec: InstrumentModelSpec) -> np.ndarray:
    if spec.family == "intercept_only":
        return np.ones((data.n, 1))
    idx = list(spec.covariate_indices)
    if any(i < 0 or i >= data.n_covariates for i in idx):
        raise ValidationError(
            f"covariate indices {idx} out of range for {data.n_covariates} covariates")
    return np.column_stack([np.ones(data.n), data.covariates[:, idx]])


def fit_instrument_model(data: CohortDataset, spec: InstrumentModelSpec) -> FittedInstrumentModel:
    """Fit E(instrument | covariates) and its influence function.

    The influence rows average to zero by construction of each fit; the
    variance correction in the band machinery relies on that.
    """
    g = data.instruments
    Z = _instrument_design(data, spec)
    n, q = Z.shape

    if spec.family == "intercept_only":
        theta = np.array([g.mean()])
        fitted = np.full(n, theta[0])
        residuals = g - fitted
        influence = residuals[:, None].copy()
    elif spec.family == "linear":
        if np.linalg.matrix_rank(Z) < q:
            raise RankDeficiencyError("instrument model design is rank deficient")
        theta, *_ = np.linalg.lstsq(Z, g, rcond=None)
        fitted = Z @ theta
        residuals = g - fitted
        influence = np.linalg.solve(Z.T @ Z / n, (Z * residuals[:, None]).T).T
    else:  # logistic
        values = np.unique(g)
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise ValidationError(
                f"logistic instrument model requires a 0/1 instrument; observed values {values[:5]}")
        theta = _fit_logistic(Z, g)
        fitted = _expit(Z @ theta)
        residuals = g - fitted
        w = fitted * (1.0 - fitted)
        info = (Z * w[:, None]).T @ Z / n
        try:
            influence = np.linalg.solve(info, (Z * residuals[:, None]).T).T
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("logistic information matrix is singular") from None

    return FittedInstrumentModel(spec=spec, theta=theta, design=Z, fitted=fitted,
                                 residuals=residuals, influence=influence)


def _fit_logistic(Z: np.ndarray, g: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Newton-Raphson logistic MLE; plain and adequate at cohort scale."""
    n, q = Z.shape
    if np.linalg.matrix_rank(Z) < q:
        raise RankDeficiencyError("instrument model design is rank deficient")
    theta = np.zeros(q)
    for _ in range(max_iter):
        mu = _expit(Z @ theta)
        w = mu * (1.0 - mu)
        score = Z.T @ (g - mu)
        info = (Z * w[:, None]).T @ Z
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise ConvergenceError("logistic fit: singular information matrix (separation?)") from None
        theta = theta + step
        if np.max(np.abs(step)) < tol:
            return theta
    raise ConvergenceError(f"logistic fit did not converge in {max_iter} iterations")
