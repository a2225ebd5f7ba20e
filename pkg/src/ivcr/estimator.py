"""Cumulative effect estimators for competing risks with an instrument.

The core estimator targets the exposure effect on each cause-specific
cumulative hazard, B_1(t) and B_2(t), under a structural model in which
the exposure shifts each cause-specific hazard additively. It is built
from one estimating equation per cause: at every event time the centered
instrument, reweighted by exp(a * exposure) with a the running sum of
both fitted curves just before the event, must be uncorrelated with the
martingale increment. Solving the increment at each event time yields a
step-function estimate with jumps only at own-cause events.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CohortDataset, EventTable, FittedInstrumentModel, build_event_table
from .errors import (
    RankDeficiencyError,
    SingularDenominatorError,
    SingularNormalEquationsError,
    ValidationError,
)

# relative tolerance for declaring the estimating-equation denominator zero
DENOMINATOR_RTOL = 1e-10


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous step function that starts at 0.

    times holds the jump locations in nondecreasing order (ties from
    tied event times are kept as separate entries); values holds the
    cumulative value immediately after each jump. Evaluation before the
    first jump returns 0.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise ValidationError("StepCurve needs matching 1-d times and values")
        if t.size and np.any(np.diff(t) < 0):
            raise ValidationError("StepCurve times must be nondecreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_increments(cls, times, increments) -> "StepCurve":
        times = np.asarray(times, dtype=np.float64)
        return cls(times, np.cumsum(np.asarray(increments, dtype=np.float64)))

    def value_at(self, t):
        """B(t), right-continuous: the value after the last jump <= t."""
        if self.times.size == 0:
            return 0.0 if np.isscalar(t) else np.zeros(np.shape(t))
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return float(vals) if np.isscalar(t) else vals

    def value_before(self, t):
        """B(t-), the left limit: the value after the last jump < t."""
        if self.times.size == 0:
            return 0.0 if np.isscalar(t) else np.zeros(np.shape(t))
        idx = np.searchsorted(self.times, t, side="left") - 1
        vals = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return float(vals) if np.isscalar(t) else vals

    def increments_at(self, t):
        """Total jump size at exactly t (0 off the jump set)."""
        return self.value_at(t) - self.value_before(t)


@dataclass(frozen=True)
class PerJumpRecord:
    """Internals of the recursion at every event time, in event order."""

    times: np.ndarray        # event time tau_k
    causes: np.ndarray       # 1 or 2
    subjects: np.ndarray     # dataset row of the event subject
    increments: np.ndarray   # dB of the event's own cause at tau_k
    denominators: np.ndarray  # sum_i gc_i R_i exp(a X_i) X_i
    numerators: np.ndarray   # gc_e exp(a X_e) of the event subject
    a_left: np.ndarray       # B1(tau_k-) + B2(tau_k-), tie-updated


@dataclass(frozen=True)
class IvFitResult:
    """Fitted cumulative exposure-effect curves for both causes."""

    curve1: StepCurve
    curve2: StepCurve
    per_jump: PerJumpRecord
    horizon: float
    instrument: FittedInstrumentModel
    table: EventTable
    n: int

    def curve(self, cause: int) -> StepCurve:
        if cause == 1:
            return self.curve1
        if cause == 2:
            return self.curve2
        raise ValidationError(f"cause must be 1 or 2, got {cause!r}")


def _check_lengths(data: CohortDataset, model: FittedInstrumentModel):
    if model.residuals.shape[0] != data.n:
        raise ValidationError(
            f"instrument model was fitted on {model.residuals.shape[0]} subjects, data has {data.n}")


def fit_iv_competing(data: CohortDataset, instrument_model: FittedInstrumentModel,
                     horizon: float | None = None,
                     residuals: np.ndarray | None = None) -> IvFitResult:
    """Fit both cumulative effect curves by the per-event recursion.

    At each event time tau_k (ties processed in the deterministic table
    order, with left limits refreshed inside a tied group):

        a    = B1(tau_k-) + B2(tau_k-)
        dB_j = gc_e exp(a X_e) / sum_i gc_i R_i(tau_k) exp(a X_i) X_i

    where gc is the centered instrument, e the event subject and j the
    event's cause. The fit aborts with SingularDenominatorError when the
    denominator is numerically zero; aborting beats silently truncating
    because every later value would inherit the bad increment.

    Args:
        data: the cohort.
        instrument_model: fitted instrument mean model; its residuals
            center the instrument.
        horizon: optional upper time limit (default: last event time).
        residuals: override for the centered instrument, used by the
            parameter-sensitivity machinery to refit at a perturbed
            instrument-model parameter. Same length as the cohort.
    """
    _check_lengths(data, instrument_model)
    table = build_event_table(data, horizon)
    gc = instrument_model.residuals if residuals is None else np.asarray(residuals, dtype=np.float64)
    if gc.shape[0] != data.n:
        raise ValidationError("residual override must have one value per subject")

    # at-risk sets are suffixes of the time-sorted order
    xs = data.exposures[table.risk_order]
    gs = gc[table.risk_order]
    scale_terms = np.abs(xs * gs)

    m = table.n_events
    increments = np.empty(m)
    denominators = np.empty(m)
    numerators = np.empty(m)
    a_left = np.empty(m)
    b1 = 0.0
    b2 = 0.0
    for k in range(m):
        s = table.risk_start[k]
        a = b1 + b2
        with np.errstate(over="ignore", invalid="ignore"):
            w = gs[s:] * np.exp(a * xs[s:])
            den = float(w @ xs[s:])
        scale = float(scale_terms[s:].mean())
        # a runaway recursion overflows exp; that is the same pathology
        # as a vanishing denominator (instrument too weak), so abort
        if abs(den) <= DENOMINATOR_RTOL * scale or not np.isfinite(den):
            raise SingularDenominatorError(float(table.times[k]), den, scale)
        e = table.subjects[k]
        with np.errstate(over="ignore"):
            num = gc[e] * np.exp(a * data.exposures[e])
        inc = num / den
        if not np.isfinite(inc):
            raise SingularDenominatorError(float(table.times[k]), den, scale)
        increments[k] = inc
        denominators[k] = den
        numerators[k] = num
        a_left[k] = a
        if table.causes[k] == 1:
            b1 += inc
        else:
            b2 += inc

    cause1 = table.causes == 1
    record = PerJumpRecord(times=table.times.copy(), causes=table.causes.copy(),
                           subjects=table.subjects.copy(), increments=increments,
                           denominators=denominators, numerators=numerators, a_left=a_left)
    return IvFitResult(
        curve1=StepCurve.from_increments(table.times[cause1], increments[cause1]),
        curve2=StepCurve.from_increments(table.times[~cause1], increments[~cause1]),
        per_jump=record,
        horizon=table.horizon,
        instrument=instrument_model,
        table=table,
        n=data.n,
    )


@dataclass(frozen=True)
class ExtendedIvFitResult:
    """Fit with exposure-covariate interaction curves.

    curves are ordered (B1, B2, B1 x covariate_1, ..., B2 x covariate_1,
    ...): the two main curves first, then the cause-1 interactions, then
    the cause-2 interactions.
    """

    curves: tuple[StepCurve, ...]
    per_jump_times: np.ndarray
    per_jump_causes: np.ndarray
    per_jump_increments: np.ndarray  # (m, 2 + 2p)
    horizon: float
    instrument: FittedInstrumentModel
    table: EventTable
    n: int
    n_covariates: int


def fit_iv_extended(data: CohortDataset, instrument_model: FittedInstrumentModel,
                    horizon: float | None = None) -> ExtendedIvFitResult:
    """Fit main and exposure-covariate interaction curves jointly.

    The moment conditions extend the two-curve fit: at each event time,
    the centered instrument times each of (1, covariates) must be
    orthogonal to the reweighted martingale increments of both causes.
    With p covariates this gives a (2 + 2p)-dimensional linear solve per
    event; the system decouples into one (1 + p) block per cause sharing
    the matrix S = sum_i w_i X_i C_i C_i^T with C_i = (1, L_i) and
    w_i = gc_i R_i exp(eta_i), where eta_i carries all fitted curves at
    their left limits. With p = 0 every increment reduces exactly to the
    two-curve recursion.
    """
    _check_lengths(data, instrument_model)
    table = build_event_table(data, horizon)
    gc = instrument_model.residuals
    p = data.n_covariates

    order = table.risk_order
    xs = data.exposures[order]
    gs = gc[order]
    C = np.column_stack([np.ones(data.n), data.covariates])[order]  # (n, 1+p) in risk order

    m = table.n_events
    inc_all = np.zeros((m, 2 + 2 * p))
    # running curve states: main effects and interactions per cause
    bmain = np.zeros(2)
    binter = np.zeros((2, p))
    scale_terms = np.abs(xs * gs)
    for k in range(m):
        s = table.risk_start[k]
        csum = C[s:, 1:] @ (binter[0] + binter[1]) if p else 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            eta = xs[s:] * ((bmain[0] + bmain[1]) + csum)
            w = gs[s:] * np.exp(eta)
        # event subject is at risk; find its position in the suffix
        e = table.subjects[k]
        pos = s + int(np.nonzero(order[s:] == e)[0][0])
        if p == 0:
            # same arithmetic as the two-curve recursion, so the collapse
            # at p = 0 is identical to fit_iv_competing bit for bit
            den = float(w @ xs[s:])
            if abs(den) <= DENOMINATOR_RTOL * float(scale_terms[s:].mean()) or not np.isfinite(den):
                raise SingularNormalEquationsError(float(table.times[k]), np.inf)
            num = gs[pos] * np.exp((bmain[0] + bmain[1]) * xs[pos])
            d = np.array([num / den])
        else:
            wx = w * xs[s:]
            S = (C[s:] * wx[:, None]).T @ C[s:]
            if not np.all(np.isfinite(S)):
                raise SingularNormalEquationsError(float(table.times[k]), np.inf)
            rhs = w[pos - s] * C[pos]
            U, sing, Vt = np.linalg.svd(S)
            if sing[0] == 0.0 or sing[-1] <= sing[0] * 1e-12:
                cond = np.inf if sing[-1] == 0.0 else sing[0] / sing[-1]
                raise SingularNormalEquationsError(float(table.times[k]), float(cond))
            d = Vt.T @ ((U.T @ rhs) / sing)
        if not np.all(np.isfinite(d)):
            raise SingularNormalEquationsError(float(table.times[k]), np.inf)
        j = int(table.causes[k]) - 1
        bmain[j] += d[0]
        if p:
            binter[j] += d[1:]
        inc_all[k, j] = d[0]
        if p:
            inc_all[k, 2 + j * p: 2 + (j + 1) * p] = d[1:]

    # curve order: B1, B2, then cause-1 interactions, then cause-2 interactions
    curves = []
    for j in (0, 1):
        mask = table.causes == j + 1
        curves.append(StepCurve.from_increments(table.times[mask], inc_all[mask, j]))
    for j in (0, 1):
        mask = table.causes == j + 1
        for c in range(p):
            curves.append(StepCurve.from_increments(table.times[mask], inc_all[mask, 2 + j * p + c]))
    return ExtendedIvFitResult(
        curves=tuple(curves),
        per_jump_times=table.times.copy(),
        per_jump_causes=table.causes.copy(),
        per_jump_increments=inc_all,
        horizon=table.horizon,
        instrument=instrument_model,
        table=table,
        n=data.n,
        n_covariates=p,
    )


@dataclass(frozen=True)
class NaiveAalenResult:
    """Additive-hazards regression ignoring unmeasured confounding.

    One cumulative coefficient curve per (cause, regressor) pair with
    regressors (intercept, exposure, instrument). Serves as the
    comparison estimator whose exposure coefficient is biased when an
    unmeasured confounder drives both exposure and hazard.
    """

    curves: dict
    horizon: float
    n: int

    def curve(self, cause: int, name: str) -> StepCurve:
        return self.curves[(cause, name)]


NAIVE_REGRESSORS = ("intercept", "exposure", "instrument")


def fit_naive_aalen(data: CohortDataset, horizon: float | None = None) -> NaiveAalenResult:
    """Least-squares additive-hazards fit with design (1, exposure, instrument).

    At each event time the coefficient increment for the event's cause is
    (Z'Z)^{-1} Z_e' with Z the at-risk design rows. Because the design is
    time-constant per subject, the at-risk Gram matrix is a reverse
    cumulative sum; each event then costs one 3x3 solve.
    """
    table = build_event_table(data, horizon)
    order = table.risk_order
    Z = np.column_stack([np.ones(data.n), data.exposures, data.instruments])[order]
    # suffix Gram matrices: gram[s] = Z[s:]'Z[s:]
    outer = Z[:, :, None] * Z[:, None, :]
    gram_suffix = np.concatenate([np.cumsum(outer[::-1], axis=0)[::-1],
                                  np.zeros((1, 3, 3))], axis=0)

    m = table.n_events
    increments = np.zeros((m, 3))
    for k in range(m):
        s = table.risk_start[k]
        M = gram_suffix[s]
        e = table.subjects[k]
        z_e = np.array([1.0, data.exposures[e], data.instruments[e]])
        try:
            increments[k] = np.linalg.solve(M, z_e)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                f"at-risk design rank deficient at t={float(table.times[k])!r}") from None

    curves = {}
    for cause in (1, 2):
        mask = table.causes == cause
        for col, name in enumerate(NAIVE_REGRESSORS):
            curves[(cause, name)] = StepCurve.from_increments(table.times[mask], increments[mask, col])
    return NaiveAalenResult(curves=curves, horizon=table.horizon, n=data.n)


def _format(x: float) -> str:
    return repr(float(x))


def write_curves_csv(result, path, covariate_names=None) -> None:
    """Write fitted curves as CSV: time, B1, B2 [, interactions].

    One row per jump in event order plus a leading t=0 row. Extended fits
    add one column per interaction curve, named B1x<cov> / B2x<cov>.
    """
    import csv as _csv

    if isinstance(result, ExtendedIvFitResult):
        p = result.n_covariates
        if covariate_names is None:
            covariate_names = [f"cov{i+1}" for i in range(p)]
        if len(covariate_names) != p:
            raise ValidationError(f"need {p} covariate names, got {len(covariate_names)}")
        header = (["time", "B1", "B2"]
                  + [f"B1x{c}" for c in covariate_names]
                  + [f"B2x{c}" for c in covariate_names])
        times = result.per_jump_times
        # increment columns are already ordered (B1, B2, B1 x L..., B2 x L...)
        cum = np.cumsum(result.per_jump_increments, axis=0)
        rows = [[t] + list(c) for t, c in zip(times, cum)]
        zero = [0.0] * (2 + 2 * p)
    else:
        header = ["time", "B1", "B2"]
        times = result.per_jump.times
        b1 = np.cumsum(np.where(result.per_jump.causes == 1, result.per_jump.increments, 0.0))
        b2 = np.cumsum(np.where(result.per_jump.causes == 2, result.per_jump.increments, 0.0))
        rows = [[t, v1, v2] for t, v1, v2 in zip(times, b1, b2)]
        zero = [0.0, 0.0]

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        w.writerow([_format(0.0)] + [_format(v) for v in zero])
        for row in rows:
            w.writerow([_format(v) for v in row])
