"""Shared fixtures and independent reference implementations.

The reference code here is deliberately written in the plainest possible
style (explicit loops, math.exp, no shared helpers with the package) so
that agreement between package and reference is evidence, not tautology.
"""
import math

import numpy as np
import pytest

from ivcr import CohortDataset


# the 4-subject worked example used throughout: (time, cause, X, G)
FOUR_ROWS = [
    (1.0, 1, 1.0, 1.0),
    (2.0, 2, 1.0, 0.0),
    (3.0, 0, 0.0, 1.0),
    (2.5, 1, 2.0, 0.0),
]

# hand-derived fit of the 4-subject example with mean-centered instrument:
# theta = 0.5, increments at t = 1.0, 2.0, 2.5
FOUR_INC_1 = -0.5
FOUR_INC_2 = -0.5 * math.exp(-0.5) / (-0.5 * math.exp(-0.5) - math.exp(-1.0))
FOUR_INC_3 = 0.5
# n * weight h_i at the first event time, subjects in input order
FOUR_H_FIRST = (-2.0, 2.0, -2.0, 2.0)


def four_subject_data() -> CohortDataset:
    t, d, x, g = (np.array(col) for col in zip(*FOUR_ROWS))
    return CohortDataset(ids=np.arange(4), times=t, causes=d.astype(int),
                         exposures=x, instruments=g)


@pytest.fixture
def four_subject():
    return four_subject_data()


def random_cohort(rng, n_min=4, n_max=12, p=0, binary_instrument=False):
    """Small random cohort with at least one event of each cause.

    Exposures and instruments are drawn away from degenerate settings so
    the fits in identity tests rarely hit singular denominators; callers
    that want degeneracy build it explicitly.
    """
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        causes = rng.choice([0, 1, 2], size=n, p=[0.25, 0.4, 0.35])
        if np.any(causes == 1) and np.any(causes == 2):
            break
    times = np.round(rng.uniform(0.05, 4.0, n), 6)
    exposures = rng.normal(1.0, 0.6, n)
    if binary_instrument:
        instruments = rng.integers(0, 2, n).astype(float)
        if instruments.min() == instruments.max():
            instruments[0] = 1.0 - instruments[0]
    else:
        instruments = rng.normal(0.0, 1.0, n)
    cov = rng.normal(0.0, 1.0, (n, p)) if p else None
    return CohortDataset(ids=np.arange(n), times=times, causes=causes,
                         exposures=exposures, instruments=instruments, covariates=cov)


def reference_increments(times, causes, exposures, centered, horizon=None):
    """Straight-line re-evaluation of the coupled recursion.

    Returns a list of (time, cause, subject, increment) in the processing
    order: ascending time, cause 1 before cause 2, ascending subject id.
    At-risk status is rescanned from scratch at every event time and the
    left limits are recomputed by summing all previously returned
    increments, so nothing is shared with the package's recursion.
    """
    n = len(times)
    events = sorted((times[i], causes[i], i) for i in range(n) if causes[i] != 0)
    if horizon is not None:
        events = [ev for ev in events if ev[0] <= horizon]
    out = []
    for (t, cause, e) in events:
        b1 = sum(rec[3] for rec in out if rec[1] == 1)
        b2 = sum(rec[3] for rec in out if rec[1] == 2)
        a = b1 + b2
        den = 0.0
        for i in range(n):
            if t <= times[i]:
                den += centered[i] * math.exp(a * exposures[i]) * exposures[i]
        num = centered[e] * math.exp(a * exposures[e])
        out.append((t, cause, e, num / den))
    return out


def simulate_additive(rng, n, lam1, lam2, censor_time=3.5):
    """Draw (T, cause) from two constant cause-specific hazards.

    lam1 and lam2 are per-subject rate arrays, already nonnegative.
    Straightforward competing-exponentials draw used by oracle scenarios.
    """
    total = lam1 + lam2
    latent = np.where(total > 0, rng.standard_exponential(n) / np.where(total > 0, total, 1.0), np.inf)
    cause = np.where(rng.uniform(size=n) * total < lam1, 1, 2)
    obs = np.minimum(latent, censor_time)
    cause = np.where(latent <= censor_time, cause, 0)
    return obs, cause


def rr_truth(config, times):
    """Large-sample limit of the relative-risk functional, by quadrature.

    Inside the X=1, G=1 subgroup the confounder density is tilted by the
    exposure probability, w(u) = expit(a0 + ag + au*u). With constant
    hazards the counterfactual and factual cause-1 risks reduce to
    lam1/lam * (1 - exp(-lam*t)) mixed over that density; the ratio of
    the two mixtures is the limit the estimator should approach. The
    counterfactual all-cause rate keeps the factual cause-2 hazard, which
    is where the no-cause-2-effect premise enters.
    """
    from scipy.integrate import quad

    a1, b1, c1 = config.cause1_coefs
    a2, b2, c2 = config.cause2_coefs
    a0, ag, au = config.exposure_logit

    def weight(u):
        return 1.0 / (1.0 + math.exp(-(a0 + ag + au * u)))

    def risk(u, t, exposed):
        l1 = a1 + b1 * exposed + c1 * u
        l2 = a2 + b2 * 1.0 + c2 * u  # factual cause-2 hazard either way
        lam = l1 + l2
        return l1 / lam * (1.0 - math.exp(-lam * t))

    out = []
    for t in times:
        num = quad(lambda u: weight(u) * risk(u, t, 0.0), 0.0, 1.0,
                   epsabs=1e-12, epsrel=1e-12)[0]
        den = quad(lambda u: weight(u) * risk(u, t, 1.0), 0.0, 1.0,
                   epsabs=1e-12, epsrel=1e-12)[0]
        out.append(num / den)
    return np.array(out)


# frozen quadrature output for the default binary-exposure scenario at
# t = 1, 2, 3 and for the screening-trial-sized scenario at t = 5, 10
RR_TRUTH_DEFAULT = np.array(
    [0.6994323607283837, 0.7265135996568841, 0.7498781713922519])
RR_TRUTH_SCREEN = np.array([1.9980174314643264, 1.5101606431107013])


# ------------------------------------------------------- acceptance scorecard

# test_acceptance.py appends one line per criterion; the summary hook
# replays them after the run so the scorecard survives output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
