"""Relative-risk functional built on the fitted cumulative effect curves.

For a subgroup at fixed exposure and instrument levels, the counterfactual
cause-1 risk had the subgroup been unexposed can be recovered from the
subgroup's own nonparametric hazards plus the fitted cause-1 effect curve,
provided the exposure does not shift the cause-2 hazard. The ratio of that
counterfactual risk to the subgroup's factual cause-1 risk is reported as
a curve, with percentile bootstrap bands when requested.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import CohortDataset, InstrumentModelSpec, fit_instrument_model
from .errors import EmptySubgroupError, IvcrError, ValidationError
from .estimator import IvFitResult, StepCurve, fit_iv_competing


@dataclass(frozen=True)
class SubgroupHazards:
    """Nonparametric hazard summary of one exposure/instrument subgroup.

    cum_hazard1 and cum_hazard2 are Nelson-Aalen cause-specific cumulative
    hazards. survivor is the all-cause product-limit curve (1 before the
    first event). incidence1/incidence2 are the cause-specific cumulative
    incidence curves sum_s survivor(s-) dLambda_j(s); together with the
    survivor they satisfy incidence1 + incidence2 = 1 - survivor at every
    event time.
    """

    exposure_level: float
    instrument_level: float
    n_subgroup: int
    horizon: float
    cum_hazard1: StepCurve
    cum_hazard2: StepCurve
    survivor: StepCurve  # values are S(t) after each event time
    incidence1: StepCurve
    incidence2: StepCurve
    # raw per-time hazard jumps; differencing the cumulative curves would
    # lose the last bits and break the exact null-effect identity
    hazard_jumps1: np.ndarray = None
    hazard_jumps2: np.ndarray = None

    def survivor_at(self, t) -> float:
        """S(t) with the product-limit convention (1 before first event)."""
        idx = np.searchsorted(self.survivor.times, t, side="right") - 1
        if np.isscalar(t):
            return float(self.survivor.values[idx]) if idx >= 0 else 1.0
        vals = np.where(idx >= 0, self.survivor.values[np.maximum(idx, 0)], 1.0)
        return vals


def subgroup_hazards(data: CohortDataset, exposure_level: float, instrument_level: float,
                     horizon: float | None = None) -> SubgroupHazards:
    """Nelson-Aalen cause-specific hazards within one subgroup.

    Subgroup membership is exact equality on the exposure and instrument
    values, which is meant for discrete exposures and instruments. Tied
    event times are handled with the discrete convention: the hazard jump
    at a time is the event count over the at-risk count.
    """
    mask = (data.exposures == exposure_level) & (data.instruments == instrument_level)
    n_sub = int(mask.sum())
    if n_sub == 0:
        raise EmptySubgroupError(
            f"no subjects with exposure == {exposure_level!r} and instrument == {instrument_level!r}")
    times = data.times[mask]
    causes = data.causes[mask]
    event_times = times[causes != 0]
    if event_times.size == 0:
        raise EmptySubgroupError("subgroup has no uncensored events")
    if horizon is None:
        horizon = float(event_times.max())
    taus = np.unique(event_times[event_times <= horizon])
    if taus.size == 0:
        raise EmptySubgroupError(f"subgroup has no events at or before horizon {horizon!r}")

    # closed at-risk counts and per-cause event counts at each distinct time
    at_risk = (times[None, :] >= taus[:, None]).sum(axis=1).astype(np.float64)
    d1 = np.array([(times[causes == 1] == t).sum() for t in taus], dtype=np.float64)
    d2 = np.array([(times[causes == 2] == t).sum() for t in taus], dtype=np.float64)

    dl1 = d1 / at_risk
    dl2 = d2 / at_risk
    surv = np.cumprod(1.0 - (dl1 + dl2))
    surv_minus = np.concatenate([[1.0], surv[:-1]])
    inc1 = np.cumsum(surv_minus * dl1)
    inc2 = np.cumsum(surv_minus * dl2)

    return SubgroupHazards(
        exposure_level=float(exposure_level),
        instrument_level=float(instrument_level),
        n_subgroup=n_sub,
        horizon=float(horizon),
        cum_hazard1=StepCurve(taus, np.cumsum(dl1)),
        cum_hazard2=StepCurve(taus, np.cumsum(dl2)),
        survivor=StepCurve(taus, surv),
        incidence1=StepCurve(taus, inc1),
        incidence2=StepCurve(taus, inc2),
        hazard_jumps1=dl1,
        hazard_jumps2=dl2,
    )


@dataclass(frozen=True)
class RrCurve:
    """Relative-risk values at requested times, with optional bands.

    values[i] is NaN where the curve is undefined: past the reporting
    window or where the subgroup incidence is still zero. metadata
    records the premise the functional needs (no exposure effect on the
    cause-2 hazard).
    """

    times: np.ndarray
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    n_replicates: int | None = None
    n_failures: int = 0
    metadata: dict = field(default_factory=dict)


def relative_risk_curve(sub: SubgroupHazards, iv: IvFitResult, times) -> RrCurve:
    """Ratio of counterfactual to factual cause-1 risk in the subgroup.

    The numerator integrates, over the merged jump grid of the subgroup
    cause-1 hazard and the fitted cause-1 curve,

        survivor(s-) * exp(B1(s-)) * (dLambda1(s) - dB1(s)),

    with all left limits: the survivor factor is the subgroup all-cause
    product-limit curve, so a fitted curve that is identically zero makes
    the numerator equal the subgroup incidence exactly. The denominator
    is the subgroup cause-1 cumulative incidence. Values are reported up
    to min(both horizons, last subgroup event) and NaN beyond.
    """
    req = np.asarray(times, dtype=np.float64)
    if req.ndim != 1 or req.size == 0:
        raise ValidationError("need a nonempty 1-d array of evaluation times")
    b1 = iv.curve1
    haz1 = sub.cum_hazard1
    t_max = min(sub.horizon, iv.horizon, float(sub.cum_hazard1.times.max()))

    grid = np.unique(np.concatenate([haz1.times, b1.times]))
    grid = grid[grid <= t_max]
    # left limit of the product-limit survivor (1 before the first event)
    idx = np.searchsorted(sub.survivor.times, grid, side="left") - 1
    s_minus = np.where(idx >= 0, sub.survivor.values[np.maximum(idx, 0)], 1.0)
    eb1 = np.exp(b1.value_before(grid))
    # hazard jumps placed exactly (not recovered by differencing), so a
    # zero fitted curve reproduces the subgroup incidence bit for bit
    dl1 = np.zeros(grid.size)
    pos = np.searchsorted(haz1.times, grid)
    hit = pos < haz1.times.size
    hit[hit] &= haz1.times[pos[hit]] == grid[hit]
    dl1[hit] = sub.hazard_jumps1[pos[hit]]
    db1 = b1.value_at(grid) - b1.value_before(grid)
    contrib = s_minus * eb1 * (dl1 - db1)
    cumnum = np.cumsum(contrib)

    values = np.full(req.size, np.nan)
    for i, t in enumerate(req):
        if t > t_max:
            continue
        pos = np.searchsorted(grid, t, side="right") - 1
        num = cumnum[pos] if pos >= 0 else 0.0
        den = sub.incidence1.value_at(t)
        if den > 0.0:
            values[i] = num / den
    return RrCurve(times=req.copy(), values=values,
                   metadata={"assumes_no_cause2_exposure_effect": True,
                             "reporting_limit": t_max})


def _rr_once(data: CohortDataset, exposure_level, instrument_level, spec, times,
             horizon=None):
    model = fit_instrument_model(data, spec)
    iv = fit_iv_competing(data, model, horizon=horizon)
    sub = subgroup_hazards(data, exposure_level, instrument_level, horizon=horizon)
    return relative_risk_curve(sub, iv, times)


def bootstrap_rr(data: CohortDataset, exposure_level: float, instrument_level: float,
                 spec: InstrumentModelSpec, times, replicates: int = 500,
                 seed: int | None = None, horizon: float | None = None,
                 level: float = 0.95, workers: int = 1) -> RrCurve:
    """Percentile bootstrap bands for the relative-risk curve.

    Subjects are resampled with replacement and the whole pipeline
    (instrument model, effect curves, subgroup hazards) is refitted per
    replicate. Replicate streams are spawned from the master seed, so
    results are identical for any worker count. Replicates that fail to
    fit are counted and skipped; bands are reported only when at least
    80 percent of the replicates succeed.
    """
    if replicates < 0:
        raise ValidationError("replicates must be >= 0")
    point = _rr_once(data, exposure_level, instrument_level, spec, times, horizon)
    if replicates == 0:
        return point

    req = np.asarray(times, dtype=np.float64)
    children = np.random.SeedSequence(seed).spawn(replicates)
    n = data.n
    results = np.full((replicates, req.size), np.nan)
    failures = np.zeros(replicates, dtype=bool)

    def run(r: int):
        rng = np.random.default_rng(children[r])
        idx = rng.integers(0, n, n)
        boot = CohortDataset(
            ids=np.arange(n), times=data.times[idx], causes=data.causes[idx],
            exposures=data.exposures[idx], instruments=data.instruments[idx],
            covariates=data.covariates[idx],
        )
        try:
            rr = _rr_once(boot, exposure_level, instrument_level, spec, req, horizon)
            results[r] = rr.values
        except IvcrError:
            failures[r] = True

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(replicates)))
    else:
        for r in range(replicates):
            run(r)

    n_failed = int(failures.sum())
    n_ok = replicates - n_failed
    lower = upper = None
    if n_ok >= 0.8 * replicates:
        ok = results[~failures]
        alpha = (1.0 - level) / 2.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)  # all-NaN columns
            lower = np.nanpercentile(ok, 100 * alpha, axis=0)
            upper = np.nanpercentile(ok, 100 * (1 - alpha), axis=0)
    meta = dict(point.metadata)
    meta["bootstrap_level"] = level
    return RrCurve(times=point.times, values=point.values, lower=lower, upper=upper,
                   n_replicates=n_ok, n_failures=n_failed, metadata=meta)


def write_rr_csv(rr: RrCurve, path) -> None:
    """CSV columns: time, rr [, lo, hi, n_replicates when bootstrapped]."""
    import csv as _csv

    banded = rr.lower is not None and rr.upper is not None
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        if banded:
            w.writerow(["time", "rr", "lo", "hi", "n_replicates"])
            for i, t in enumerate(rr.times):
                w.writerow([repr(float(t)), repr(float(rr.values[i])),
                            repr(float(rr.lower[i])), repr(float(rr.upper[i])),
                            rr.n_replicates])
        else:
            w.writerow(["time", "rr"])
            for i, t in enumerate(rr.times):
                w.writerow([repr(float(t)), repr(float(rr.values[i]))])
