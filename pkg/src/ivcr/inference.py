"""Pointwise variance bands for the fitted curves.

The band construction linearizes the estimator into one influence-curve
value per subject and requested time. Three ingredients feed it:

* a per-event weight process (how much each at-risk subject moves the
  increment, plus its sensitivity to the running exponent),
* 2x2 transition factors whose ordered products propagate an early
  perturbation of the curves into a later time, solving the recursion's
  Volterra structure,
* the derivative of the curves in the instrument-model parameter, which
  corrects the band for the fact that the instrument mean was estimated.

The variance of each curve at time t is then the scaled mean square of
the per-subject residuals, and the bands are normal-quantile pointwise
intervals around the estimates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import CohortDataset
from .errors import ValidationError
from .estimator import IvFitResult

_B_COLUMN = np.array([[1.0], [1.0]])  # both curves share the carried exponent


@dataclass(frozen=True)
class WeightProcess:
    """Per-event subject weights of the increment and their sensitivity.

    h[k, i] is n times the contribution weight of subject i at event k:
    h_i = n gc_i R_i exp(a X_i) / D_k, zero off the at-risk set. hdot is
    the derivative of h in the carried exponent a, by the quotient rule:
    hdot_i = h_i (X_i - S2_k / D_k) with S2_k the (gc, exp, X^2)-weighted
    at-risk sum. Scaling by n keeps single-subject weights O(1), so the
    downstream variance is Var(B_j) ~ Sigma_j / n.
    """

    times: np.ndarray
    causes: np.ndarray
    subjects: np.ndarray
    h: np.ndarray      # (m, n)
    hdot: np.ndarray   # (m, n)


def compute_weights(fit: IvFitResult, data: CohortDataset) -> WeightProcess:
    """Materialize the weight process along the fitted event sequence."""
    table = fit.table
    gc = fit.instrument.residuals
    order = table.risk_order
    xs = data.exposures[order]
    gs = gc[order]

    m = table.n_events
    n = data.n
    h = np.zeros((m, n))
    hdot = np.zeros((m, n))
    for k in range(m):
        s = table.risk_start[k]
        a = fit.per_jump.a_left[k]
        den = fit.per_jump.denominators[k]
        ex = np.exp(a * xs[s:])
        hrow = n * gs[s:] * ex / den
        s2 = float((gs[s:] * ex * xs[s:] ** 2).sum())
        h[k, order[s:]] = hrow
        hdot[k, order[s:]] = hrow * (xs[s:] - s2 / den)
    return WeightProcess(times=table.times.copy(), causes=table.causes.copy(),
                         subjects=table.subjects.copy(), h=h, hdot=hdot)


@dataclass(frozen=True)
class TransitionFactors:
    """Ordered 2x2 factors whose products solve the perturbation recursion.

    factor k is I + b v_k where b = (1, 1)^T and v_k is the 1x2 row with
    the event subject's hdot/n in the event's cause column. The product
    over (s, t], earliest factor leftmost, maps a perturbation of the
    curves at time s into its effect at time t.
    """

    times: np.ndarray
    factors: np.ndarray  # (m, 2, 2)

    def matrix(self, s: float, t: float) -> np.ndarray:
        """Product of the factors with event time in (s, t]."""
        if t < s:
            raise ValidationError(f"need s <= t, got ({s!r}, {t!r})")
        lo = np.searchsorted(self.times, s, side="right")
        hi = np.searchsorted(self.times, t, side="right")
        out = np.eye(2)
        for k in range(lo, hi):
            out = out @ self.factors[k]
        return out

    def column(self, t: float) -> np.ndarray:
        """All products F(tau_k, t) for events tau_k <= t, backward pass.

        Entry k of the returned (m_t, 2, 2) array is the product over
        (tau_k, t]; the last entry is the identity. One pass costs O(m_t),
        which keeps a full-grid evaluation at O(m^2) with O(m) memory.
        """
        hi = np.searchsorted(self.times, t, side="right")
        out = np.empty((hi, 2, 2))
        if hi == 0:
            return out
        out[hi - 1] = np.eye(2)
        for k in range(hi - 2, -1, -1):
            out[k] = self.factors[k + 1] @ out[k + 1]
        return out


def accumulate_transitions(weights: WeightProcess) -> TransitionFactors:
    """Build the per-event transition factors from the weight process."""
    m = weights.times.shape[0]
    n = weights.h.shape[1]
    factors = np.tile(np.eye(2), (m, 1, 1))
    for k in range(m):
        v = np.zeros((1, 2))
        v[0, weights.causes[k] - 1] = weights.hdot[k, weights.subjects[k]] / n
        factors[k] += _B_COLUMN @ v
    return TransitionFactors(times=weights.times.copy(), factors=factors)


@dataclass(frozen=True)
class ThetaJacobian:
    """Derivative of both cumulative curves in the instrument parameter.

    jacobians[k] is the (2, q) derivative of (B1, B2) at the k-th event
    time, accumulated through the recursion: the parameter moves the
    centered instrument directly and, through the carried exponent, every
    later increment.
    """

    times: np.ndarray
    jacobians: np.ndarray  # (m, 2, q)

    def at(self, t: float) -> np.ndarray:
        """Jacobian at time t (zero matrix before the first event)."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        if idx < 0:
            return np.zeros_like(self.jacobians[0])
        return self.jacobians[idx]


def theta_jacobian(fit: IvFitResult, data: CohortDataset) -> ThetaJacobian:
    """Differentiate the fitted curves in the instrument-model parameter.

    Runs the same event loop as the fit, propagating for each parameter
    direction the derivative of the increment:

        d(dB) = (dNum D - Num dDen) / D^2,

    with dNum and dDen collecting the direct effect (minus the model-mean
    gradient) and the indirect effect through the carried exponent
    (derivative adot of B1(tau-) + B2(tau-), updated after every event).
    """
    table = fit.table
    gc = fit.instrument.residuals
    grad = fit.instrument.mean_gradient_at()  # (n, q)
    q = grad.shape[1]
    order = table.risk_order
    xs = data.exposures[order]
    gs = gc[order]
    grads = grad[order]

    m = table.n_events
    jac = np.empty((m, 2, q))
    current = np.zeros((2, q))
    adot = np.zeros(q)
    for k in range(m):
        s = table.risk_start[k]
        a = fit.per_jump.a_left[k]
        den = fit.per_jump.denominators[k]
        num = fit.per_jump.numerators[k]
        ex = np.exp(a * xs[s:])
        exx = ex * xs[s:]
        # dDen_r = -sum_i R E X grad_ir + adot_r sum_i R gc E X^2
        dden = -(exx @ grads[s:]) + float((gs[s:] * exx * xs[s:]).sum()) * adot
        e = table.subjects[k]
        ex_e = np.exp(a * data.exposures[e])
        dnum = ex_e * (-grad[e] + gc[e] * data.exposures[e] * adot)
        ddb = (dnum * den - num * dden) / den ** 2
        j = int(table.causes[k]) - 1
        current = current.copy()
        current[j] += ddb
        adot = adot + ddb
        jac[k] = current
    return ThetaJacobian(times=table.times.copy(), jacobians=jac)


@dataclass(frozen=True)
class IidResiduals:
    """Estimated influence-curve values, one (2,) row per subject and time."""

    times: np.ndarray
    values: np.ndarray  # (n, T, 2)


@dataclass(frozen=True)
class VarianceCurves:
    """Pointwise variance estimates and normal-quantile bands."""

    times: np.ndarray
    estimates: np.ndarray  # (T, 2) fitted B1, B2
    sigma: np.ndarray      # (T, 2) variance of sqrt(n)(Bhat - B)
    se: np.ndarray         # (T, 2) sqrt(sigma / n)
    lower: np.ndarray
    upper: np.ndarray
    level: float


def variance_bands(fit: IvFitResult, data: CohortDataset, weights: WeightProcess,
                   transitions: TransitionFactors, jacobian: ThetaJacobian, times,
                   level: float = 0.95) -> tuple[VarianceCurves, IidResiduals]:
    """Estimate pointwise variances and confidence bands at the given times.

    The martingale part of each subject's residual is accumulated by a
    forward pass: crossing event k first propagates the running residual
    matrix through transition factor A_k, then adds the event's own
    contribution h_i (dN_i - X_i dB) in the event's cause column. This is
    algebraically the factor-product formula with the products expanded
    left to right, and costs O(m n) for any number of requested times.
    The instrument-estimation correction adds, per subject, the curve
    Jacobian applied to the instrument model's influence row.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level!r}")
    req = np.asarray(times, dtype=np.float64)
    if req.ndim != 1 or req.size == 0:
        raise ValidationError("need a nonempty 1-d array of evaluation times")
    if np.any(np.diff(req) < 0):
        raise ValidationError("evaluation times must be sorted ascending")

    n = fit.n
    m = weights.times.shape[0]
    x = data.exposures
    T = req.size
    eps = np.zeros((n, T, 2))
    running = np.zeros((n, 2))
    k = 0
    for ti in range(T):
        t = req[ti]
        while k < m and weights.times[k] <= t:
            running = running @ transitions.factors[k]
            j = weights.causes[k] - 1
            hk = weights.h[k]
            running[:, j] -= hk * x * fit.per_jump.increments[k]
            running[weights.subjects[k], j] += hk[weights.subjects[k]]
            k += 1
        eps[:, ti, :] = running

    # correction for the estimated instrument-model parameter
    infl = fit.instrument.influence  # (n, q)
    for ti in range(T):
        eps[:, ti, :] += infl @ jacobian.at(req[ti]).T

    sigma = np.mean(eps ** 2, axis=0)  # (T, 2)
    se = np.sqrt(sigma / n)
    est = np.column_stack([fit.curve1.value_at(req), fit.curve2.value_at(req)])
    z = norm.ppf(0.5 + level / 2.0)
    curves = VarianceCurves(times=req.copy(), estimates=est, sigma=sigma, se=se,
                            lower=est - z * se, upper=est + z * se, level=level)
    return curves, IidResiduals(times=req.copy(), values=eps)


def write_bands_csv(curves: VarianceCurves, path) -> None:
    """CSV columns: time, B1, se1, lo1, hi1, B2, se2, lo2, hi2."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["time", "B1", "se1", "lo1", "hi1", "B2", "se2", "lo2", "hi2"])
        for i, t in enumerate(curves.times):
            row = [t]
            for j in (0, 1):
                row += [curves.estimates[i, j], curves.se[i, j],
                        curves.lower[i, j], curves.upper[i, j]]
            w.writerow([repr(float(v)) for v in row])
