"""Subgroup hazards, the relative-risk curve, and its bootstrap bands."""
import csv
import dataclasses
import math

import numpy as np
import pytest

from ivcr import (
    CohortDataset,
    EmptySubgroupError,
    InstrumentModelSpec,
    IvcrError,
    StepCurve,
    ValidationError,
    bootstrap_rr,
    fit_instrument_model,
    fit_iv_competing,
    relative_risk_curve,
    subgroup_hazards,
    write_rr_csv,
)
from ivcr.simulation import RrScenarioConfig, generate_rr_cohort
from conftest import RR_TRUTH_DEFAULT, rr_truth

SPEC = InstrumentModelSpec("intercept_only")


def cohort(seed, n=200, **kw):
    cfg = RrScenarioConfig(n=n, seed=seed, **kw)
    return generate_rr_cohort(cfg).dataset


def pipeline(data, horizon=None):
    model = fit_instrument_model(data, SPEC)
    fit = fit_iv_competing(data, model, horizon=horizon)
    sub = subgroup_hazards(data, 1.0, 1.0, horizon=horizon)
    return sub, fit


def stable_pipeline(seed, n=200, horizon=None):
    """First seed at or after the given one whose fit goes through.

    Small cohorts can lose the instrument contrast in the late risk sets,
    which aborts the fit; stepping the seed is this suite's redraw policy
    for such degenerate draws and keeps every test deterministic.
    """
    for s in range(seed, seed + 50):
        data = cohort(s, n=n)
        try:
            return data, *pipeline(data, horizon=horizon)
        except IvcrError:
            continue
    raise AssertionError("no fittable draw within 50 seeds")


# ---------------------------------------------------------------- subgroup


def test_subgroup_two_subject_hand_example():
    # one cause-1 event out of 2 at risk, then one cause-2 event out of 1;
    # the third subject sits outside the subgroup and must be ignored
    data = CohortDataset(
        ids=np.arange(3),
        times=np.array([1.0, 2.0, 0.5]),
        causes=np.array([1, 2, 1]),
        exposures=np.array([1.0, 1.0, 0.0]),
        instruments=np.array([1.0, 1.0, 1.0]),
    )
    sub = subgroup_hazards(data, 1.0, 1.0)
    assert sub.n_subgroup == 2
    np.testing.assert_array_equal(sub.cum_hazard1.times, [1.0, 2.0])
    np.testing.assert_array_equal(sub.cum_hazard1.values, [0.5, 0.5])
    np.testing.assert_array_equal(sub.cum_hazard2.values, [0.0, 1.0])
    np.testing.assert_array_equal(sub.hazard_jumps1, [0.5, 0.0])
    np.testing.assert_array_equal(sub.hazard_jumps2, [0.0, 1.0])
    np.testing.assert_array_equal(sub.survivor.values, [0.5, 0.0])
    np.testing.assert_array_equal(sub.incidence1.values, [0.5, 0.5])
    np.testing.assert_array_equal(sub.incidence2.values, [0.0, 0.5])
    assert sub.horizon == 2.0


def test_subgroup_tied_events_share_the_at_risk_count():
    # two cause-1 events and one cause-2 event all tied at t=1, 4 at risk
    data = CohortDataset(
        ids=np.arange(4),
        times=np.array([1.0, 1.0, 1.0, 3.0]),
        causes=np.array([1, 1, 2, 0]),
        exposures=np.ones(4),
        instruments=np.ones(4),
    )
    sub = subgroup_hazards(data, 1.0, 1.0)
    np.testing.assert_array_equal(sub.cum_hazard1.times, [1.0])
    assert sub.hazard_jumps1[0] == 0.5
    assert sub.hazard_jumps2[0] == 0.25
    assert sub.survivor.values[0] == 0.25


def test_subgroup_aalen_johansen_identity():
    rng = np.random.default_rng(11)
    for seed in range(8):
        data = cohort(seed + 100, n=int(rng.integers(60, 160)))
        sub = subgroup_hazards(data, 1.0, 1.0)
        inc_total = sub.incidence1.values + sub.incidence2.values
        np.testing.assert_allclose(inc_total, 1.0 - sub.survivor.values,
                                   rtol=0, atol=1e-12)
        for curve in (sub.cum_hazard1, sub.cum_hazard2,
                      sub.incidence1, sub.incidence2):
            assert np.all(np.diff(curve.values) >= 0)
        assert sub.incidence1.values[-1] + sub.incidence2.values[-1] <= 1.0


def test_subgroup_errors():
    data = four = CohortDataset(
        ids=np.arange(3),
        times=np.array([1.0, 2.0, 3.0]),
        causes=np.array([0, 0, 1]),
        exposures=np.array([1.0, 1.0, 0.0]),
        instruments=np.ones(3),
    )
    with pytest.raises(EmptySubgroupError, match="no subjects"):
        subgroup_hazards(data, 5.0, 1.0)
    # members exist but both are censored
    with pytest.raises(EmptySubgroupError, match="no uncensored events"):
        subgroup_hazards(data, 1.0, 1.0)
    # events exist but the horizon cuts them all off
    ok = CohortDataset(
        ids=np.arange(2),
        times=np.array([2.0, 3.0]),
        causes=np.array([1, 2]),
        exposures=np.ones(2),
        instruments=np.ones(2),
    )
    with pytest.raises(EmptySubgroupError, match="horizon"):
        subgroup_hazards(ok, 1.0, 1.0, horizon=1.0)


def test_subgroup_horizon_truncates():
    data = cohort(3, n=120)
    sub = subgroup_hazards(data, 1.0, 1.0, horizon=1.0)
    assert sub.horizon == 1.0
    assert sub.cum_hazard1.times.max() <= 1.0
    full = subgroup_hazards(data, 1.0, 1.0)
    k = sub.cum_hazard1.times.size
    np.testing.assert_array_equal(sub.cum_hazard1.values,
                                  full.cum_hazard1.values[:k])


# ------------------------------------------------------------- point curve


def test_null_effect_identity_is_exact():
    # an identically-zero cause-1 curve must reproduce the subgroup
    # incidence bit for bit, so the ratio is exactly 1.0, not just close
    checked = 0
    for seed in range(20):
        data = cohort(seed, n=150)
        try:
            sub, fit = pipeline(data)
        except IvcrError:
            continue
        null_fit = dataclasses.replace(
            fit, curve1=StepCurve(np.array([]), np.array([])))
        rr = relative_risk_curve(sub, null_fit, np.linspace(0.2, 3.4, 33))
        finite = np.isfinite(rr.values)
        assert finite.any()
        assert np.all(rr.values[finite] == 1.0)
        checked += 1
    assert checked >= 10


def brute_force_rr(sub, fit, t):
    """Jump-by-jump Stieltjes sum, sharing no curve bookkeeping.

    Survivor left limits are rebuilt by multiplying raw hazard jumps,
    the fitted curve's left limits and jumps come straight from the
    per-jump record, and every merged jump time is visited one by one.
    """
    t_max = min(sub.horizon, fit.horizon, float(sub.cum_hazard1.times.max()))
    if t > t_max:
        return math.nan
    sub_times = sub.cum_hazard1.times.tolist()
    merged = sorted(set(sub_times) | set(fit.curve1.times.tolist()))
    num = 0.0
    for s in merged:
        if s > t:
            break
        s_minus = 1.0
        for j, tau in enumerate(sub_times):
            if tau < s:
                s_minus *= 1.0 - sub.hazard_jumps1[j] - sub.hazard_jumps2[j]
        b1_minus = 0.0
        db1 = 0.0
        for k in range(fit.per_jump.times.size):
            if fit.per_jump.causes[k] != 1:
                continue
            if fit.per_jump.times[k] < s:
                b1_minus += fit.per_jump.increments[k]
            elif fit.per_jump.times[k] == s:
                db1 += fit.per_jump.increments[k]
        dl1 = 0.0
        for j, tau in enumerate(sub_times):
            if tau == s:
                dl1 = sub.hazard_jumps1[j]
        num += s_minus * math.exp(b1_minus) * (dl1 - db1)
    den = 0.0
    for j, tau in enumerate(sub_times):
        if tau <= t:
            s_minus = 1.0
            for jj in range(j):
                s_minus *= 1.0 - sub.hazard_jumps1[jj] - sub.hazard_jumps2[jj]
            den += s_minus * sub.hazard_jumps1[j]
    return num / den if den > 0.0 else math.nan


def test_rr_matches_brute_force_stieltjes_sum():
    times = np.array([0.3, 0.9, 1.5, 2.2, 3.0, 3.6, 5.0])
    for seed in (0, 60, 120, 180):
        data, sub, fit = stable_pipeline(seed, n=180)
        rr = relative_risk_curve(sub, fit, times)
        for i, t in enumerate(times):
            ref = brute_force_rr(sub, fit, float(t))
            if math.isnan(ref):
                assert math.isnan(rr.values[i])
            else:
                np.testing.assert_allclose(rr.values[i], ref,
                                           rtol=1e-12, atol=1e-12)


def test_rr_undefined_before_first_event_and_past_limit():
    data, sub, fit = stable_pipeline(7, n=150)
    first = float(sub.cum_hazard1.times[sub.hazard_jumps1 > 0][0])
    t_max = min(sub.horizon, fit.horizon, float(sub.cum_hazard1.times.max()))
    rr = relative_risk_curve(
        sub, fit, np.array([first / 2, (first + t_max) / 2, t_max + 1.0]))
    assert math.isnan(rr.values[0])  # denominator still zero
    assert math.isfinite(rr.values[1])
    assert math.isnan(rr.values[2])  # past the reporting limit
    assert rr.metadata["reporting_limit"] == t_max
    assert rr.metadata["assumes_no_cause2_exposure_effect"] is True


def test_rr_rejects_bad_time_grids():
    data, sub, fit = stable_pipeline(7, n=150)
    with pytest.raises(ValidationError):
        relative_risk_curve(sub, fit, np.array([]))
    with pytest.raises(ValidationError):
        relative_risk_curve(sub, fit, np.ones((2, 2)))


def test_oracle_reproduces_frozen_truth():
    got = rr_truth(RrScenarioConfig(), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(got, RR_TRUTH_DEFAULT, rtol=0, atol=1e-8)


def test_rr_estimate_approaches_quadrature_truth():
    # moderate replication: the acceptance suite runs the larger version
    times = np.array([1.0, 2.0, 3.0])
    reps = 12
    vals = np.empty((reps, 3))
    for r in range(reps):
        data = cohort(900 + r, n=4000)
        sub, fit = pipeline(data)
        vals[r] = relative_risk_curve(sub, fit, times).values
    assert np.all(np.isfinite(vals))
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(mean - RR_TRUTH_DEFAULT) <= 3.0 * se)


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_same_seed_bit_identical():
    data, _, _ = stable_pipeline(21, n=150)
    a = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=40, seed=5)
    b = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=40, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.lower, b.lower)
    np.testing.assert_array_equal(a.upper, b.upper)
    assert a.n_replicates == b.n_replicates
    assert a.n_failures == b.n_failures


def test_bootstrap_worker_count_invariance():
    data, _, _ = stable_pipeline(22, n=150)
    one = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=32,
                       seed=9, workers=1)
    four = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=32,
                        seed=9, workers=4)
    np.testing.assert_array_equal(one.values, four.values)
    np.testing.assert_array_equal(one.lower, four.lower)
    np.testing.assert_array_equal(one.upper, four.upper)
    assert one.n_failures == four.n_failures


def test_bootstrap_point_curve_is_the_plain_fit():
    data, sub, fit = stable_pipeline(23, n=150)
    point = relative_risk_curve(sub, fit, np.array([1.0, 2.5]))
    banded = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.5], replicates=8, seed=1)
    np.testing.assert_array_equal(banded.values, point.values)
    assert banded.metadata["bootstrap_level"] == 0.95


def test_bootstrap_zero_replicates_skips_bands():
    data, _, _ = stable_pipeline(23, n=150)
    rr = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=0, seed=3)
    assert rr.lower is None and rr.upper is None
    assert rr.n_replicates is None
    with pytest.raises(ValidationError):
        bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0], replicates=-1)


def test_bootstrap_single_replicate_degenerates_to_that_value():
    data, _, _ = stable_pipeline(24, n=150)
    rr = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0], replicates=1, seed=7)
    assert rr.n_replicates == 1
    ok = np.isfinite(rr.lower)
    np.testing.assert_array_equal(rr.lower[ok], rr.upper[ok])


def test_bootstrap_counts_failures_and_withholds_bands():
    # exactly one subgroup member: a resample misses it with probability
    # (1 - 1/n)^n ~ 0.35, so well over 20% of replicates must fail and
    # the bands have to be withheld while the failures are reported
    times = np.array([0.6, 0.9, 1.3, 1.9, 2.4, 2.8, 3.1, 3.4, 0.7, 1.1])
    causes = np.array([1, 2, 1, 2, 1, 0, 2, 1, 1, 2])
    exposures = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    instruments = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    data = CohortDataset(ids=np.arange(10), times=times, causes=causes,
                         exposures=exposures, instruments=instruments)
    assert int(((exposures == 1) & (instruments == 1)).sum()) == 1
    rr = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0], replicates=60, seed=2)
    assert rr.n_failures > 12
    assert rr.n_failures + rr.n_replicates == 60
    assert rr.lower is None and rr.upper is None


def test_bootstrap_band_covers_truth():
    # scaled-down nested check: the full-size version (hundreds of outer
    # trials at n=4000 with 500 replicates) takes hours, this keeps the
    # same structure at a size a test suite can afford; the horizon stays
    # short of the censoring bound so late risk sets cannot degenerate
    times = np.array([1.0, 2.0, 3.0])
    truth = RR_TRUTH_DEFAULT
    outer, boot = 25, 100
    covered = np.zeros(3)
    usable = 0
    for trial in range(outer):
        data = cohort(3000 + trial, n=2500)
        try:
            rr = bootstrap_rr(data, 1.0, 1.0, SPEC, times, replicates=boot,
                              seed=trial, horizon=3.2)
        except IvcrError:
            continue
        if rr.lower is None:
            continue
        usable += 1
        covered += (rr.lower <= truth) & (truth <= rr.upper)
    assert usable >= 20
    assert np.all(covered / usable >= 0.8)


# --------------------------------------------------------------------- csv


def test_write_rr_csv_banded(tmp_path):
    data, _, _ = stable_pipeline(25, n=400)
    rr = bootstrap_rr(data, 1.0, 1.0, SPEC, [1.0, 2.0, 9.0], replicates=20,
                      seed=4, horizon=3.0)
    assert rr.lower is not None
    path = tmp_path / "rr.csv"
    write_rr_csv(rr, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "rr", "lo", "hi", "n_replicates"]
    assert len(rows) == 4
    for i, row in enumerate(rows[1:]):
        assert float(row[0]) == rr.times[i]
        np.testing.assert_equal(float(row[1]), rr.values[i])  # NaN-safe
        np.testing.assert_equal(float(row[2]), rr.lower[i])
        assert int(row[4]) == rr.n_replicates


def test_write_rr_csv_unbanded(tmp_path):
    data, sub, fit = stable_pipeline(25, n=150)
    rr = relative_risk_curve(sub, fit, np.array([1.0, 2.0]))
    path = tmp_path / "rr.csv"
    write_rr_csv(rr, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "rr"]
    assert float(rows[1][1]) == rr.values[0]
