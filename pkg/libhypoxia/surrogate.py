"""
Surrogate functions extracted from a 0D run: a decreasing sigmoid for the
surviving fraction and a rational decay A/(t + B) + C for the effective
metabolic rate. Both are fitted with Levenberg-Marquardt using analytic
Jacobians.
"""
import logging as log
import unittest
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import kstest, norm

from libhypoxia.pkpd0d import EPSILON_C
from libhypoxia.util import Serialize, write_csv

MAX_ITERATIONS = 500
FTOL = 1e-12
GTOL = 1e-10


class FitError(Exception):

    def __init__(self, reason, message):
        self.reason = reason
        super().__init__(message)


@dataclass
class SigmoidFit(Serialize):
    X: float
    Y: float
    Z: float
    D: float
    r_squared: float
    ks_statistic: float | None = None
    ks_pvalue: float | None = None
    degenerate: bool = False

    def __call__(self, t):
        return eval_sigmoid(self, t)

    def block(self):
        return {
            "model": "sigmoid",
            "params": {"X": self.X, "Y": self.Y, "Z": self.Z, "D": self.D},
            "r_squared": self.r_squared,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "degenerate": self.degenerate,
        }


@dataclass
class RationalFit(Serialize):
    A: float
    B: float
    C: float
    r_squared: float
    ks_statistic: float | None = None
    ks_pvalue: float | None = None
    degenerate: bool = False
    t_min: float = 0.0

    def __call__(self, t):
        return eval_rational(self, t)

    def block(self):
        return {
            "model": "rational",
            "params": {"A": self.A, "B": self.B, "C": self.C},
            "r_squared": self.r_squared,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "degenerate": self.degenerate,
            "t_min": self.t_min,
        }


@dataclass
class SurrogateFit:
    sigmoid: SigmoidFit
    rational: RationalFit

    def sf(self, t):
        return eval_sigmoid(self.sigmoid, t)

    def r(self, t):
        return eval_rational(self.rational, t)


def _sigmoid(theta, t):
    X, Y, Z, D = theta
    return X - Y * expit(Z * (t - D))


def _sigmoid_jac(theta, t):
    X, Y, Z, D = theta
    s = expit(Z * (t - D))
    ds = s * (1 - s)
    return np.column_stack((np.ones_like(t), -s, -Y * ds * (t - D), Y * ds * Z))


def _rational(theta, t):
    A, B, C = theta
    return A / (t + B) + C


def _rational_jac(theta, t):
    A, B, C = theta
    u = 1.0 / (t + B)
    return np.column_stack((u, -A * u * u, np.ones_like(t)))


def eval_sigmoid(fit, t):
    return _sigmoid((fit.X, fit.Y, fit.Z, fit.D), np.asarray(t, dtype=float))


def eval_rational(fit, t):
    t = np.asarray(t, dtype=float)
    if np.any(t + fit.B <= 0):
        raise FitError("pole", f"rational surrogate evaluated at or beyond its pole t = {-fit.B}")
    return _rational((fit.A, fit.B, fit.C), t)


def r_squared(observed, predicted):
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.size != predicted.size or observed.size < 2:
        raise ValueError("need two equally long series of at least 2 values")
    ss_tot = np.sum((observed - observed.mean()) ** 2)
    if ss_tot == 0:
        raise FitError("degenerate-variance", "observed values have zero variance")
    return float(1.0 - np.sum((observed - predicted) ** 2) / ss_tot)


def _standardized(residuals):
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size < 2:
        raise ValueError("need at least 2 residuals")
    std = residuals.std(ddof=1)
    if not std > 0:
        raise FitError("degenerate-variance", "residuals have zero variance")
    return (residuals - residuals.mean()) / std


def ks_statistic(residuals):
    """Largest gap between the standardized residual ECDF and the standard normal CDF"""
    return float(kstest(_standardized(residuals), norm.cdf).statistic)


def ks_pvalue(residuals):
    return float(kstest(_standardized(residuals), norm.cdf).pvalue)


def _check_series(times, values, minimum):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size != values.size:
        raise FitError("insufficient-data", "times and values differ in length")
    if times.size < minimum:
        raise FitError("insufficient-data", f"need at least {minimum} samples, got {times.size}")
    if np.any(np.diff(times) <= 0):
        raise FitError("insufficient-data", "times must be strictly increasing")
    if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
        raise FitError("insufficient-data", "series contains non-finite values")
    return times, values


def _flat(values):
    return np.ptp(values) <= 1e-14 * max(1.0, float(np.max(np.abs(values))))


def _solve(fun, jac, x0, times, values, what):
    res = least_squares(
        lambda x: fun(x, times) - values,
        np.asarray(x0, dtype=float),
        jac=lambda x: jac(x, times),
        method="lm",
        x_scale="jac",
        ftol=FTOL,
        xtol=FTOL,
        gtol=GTOL,
        max_nfev=MAX_ITERATIONS * (len(x0) + 1),
    )
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError("nonconvergence", f"{what} fit did not converge: {res.message}")
    log.debug(f"{what} fit: {res.nfev} evaluations, cost {res.cost:.6e}")
    return res.x


def _goodness(values, predicted):
    residuals = values - predicted
    try:
        ks, pv = ks_statistic(residuals), ks_pvalue(residuals)
    except FitError:
        ks = pv = None
    return r_squared(values, predicted), ks, pv


def sigmoid_initializer(times, values):
    hi, lo = float(values.max()), float(values.min())
    Y = hi - lo
    slopes = np.diff(values) / np.diff(times)
    idx = int(np.argmin(slopes))
    D = 0.5 * (times[idx] + times[idx + 1])
    Z = 4.0 * abs(float(slopes[idx])) / Y if Y > 0 else 0.0
    if not Z > 0:
        Z = 4.0 / (times[-1] - times[0])
    return np.array([hi, Y, Z, D])


def sigmoid_initializers(times, values):
    """Default initializer plus a small grid around it"""
    X, Y, Z, D = sigmoid_initializer(times, values)
    res = [np.array([X, Y, Z, D])]
    for zf in (0.5, 2.0):
        for df in (0.8, 1.2):
            res.append(np.array([X, Y, Z * zf, D * df]))
    return res


def fit_sigmoid(times, values, init=None):
    times, values = _check_series(times, values, 8)

    if _flat(values):
        log.warning("Surviving fraction is flat, sigmoid fit is degenerate")
        X = float(values[0])
        Z = 4.0 / (times[-1] - times[0])
        return SigmoidFit(X=X, Y=0.0, Z=Z, D=float(0.5 * (times[0] + times[-1])), r_squared=1.0, degenerate=True)

    x0 = sigmoid_initializer(times, values) if init is None else init
    X, Y, Z, D = _solve(_sigmoid, _sigmoid_jac, x0, times, values, "sigmoid")
    if Z < 0:
        # mirror solution of the same curve
        X, Y, Z = X - Y, -Y, -Z
    if Y < 0:
        log.warning("Sigmoid fit is increasing (Y < 0)")

    r2, ks, pv = _goodness(values, _sigmoid((X, Y, Z, D), times))
    return SigmoidFit(X=float(X), Y=float(Y), Z=float(Z), D=float(D), r_squared=r2, ks_statistic=ks, ks_pvalue=pv)


def rational_initializer(times, values):
    B0 = (times[-1] - times[0]) / 10.0
    C = float(values[-1])
    A = float((values[0] - values[-1]) * (times[0] + B0))
    return np.array([A, B0, C])


def fit_rational(times, values, init=None):
    times, values = _check_series(times, values, 6)
    x0 = rational_initializer(times, values) if init is None else init

    if _flat(values):
        return RationalFit(A=0.0, B=float(x0[1]), C=float(values[0]), r_squared=1.0,
                           degenerate=True, t_min=float(times[0]))

    A, B, C = _solve(_rational, _rational_jac, x0, times, values, "rational")
    if times[0] + B <= 0:
        raise FitError("pole", f"rational fit places its pole at t = {-B}, inside the data window")

    r2, ks, pv = _goodness(values, _rational((A, B, C), times))
    return RationalFit(A=float(A), B=float(B), C=float(C), r_squared=r2, ks_statistic=ks, ks_pvalue=pv,
                       t_min=float(times[0]))


def rational_window(series):
    """Samples of r_eff from the first time the tissue holds drug"""
    ok = np.nonzero(series.c_t_tpz > EPSILON_C)[0]
    if not ok.size:
        raise FitError("insufficient-data", "tissue never receives drug")
    return series.times[ok[0]:], series.r_eff[ok[0]:]


def fit_surrogates(series):
    sigmoid = fit_sigmoid(series.times, series.sf)
    rational = fit_rational(*rational_window(series))
    log.info(f"Surrogates: sigmoid R^2={sigmoid.r_squared:.6f}, rational R^2={rational.r_squared:.6f}")
    return SurrogateFit(sigmoid=sigmoid, rational=rational)


def write_residuals(path, times, observed, predicted):
    write_csv(path, ("t", "observed", "predicted", "residual"),
              zip(times, observed, predicted, np.asarray(observed) - np.asarray(predicted)))


BASELINE_SIGMOID = (1.0658, 0.6013, 0.00065, 4002.48)
BASELINE_RATIONAL = (4.7865, 331.6163, 0.00247)


class TestSurrogate(unittest.TestCase):

    def setUp(self):
        self.t = np.linspace(0.0, 21600.0, 200)

    def assertRelative(self, got, expect, tol):
        for g, e in zip(got, expect):
            self.assertLess(abs(g - e) / abs(e), tol, msg=f"{got} vs {expect}")

    def test_sigmoid_recovery(self):
        values = _sigmoid(BASELINE_SIGMOID, self.t)
        fit = fit_sigmoid(self.t, values)
        self.assertRelative((fit.X, fit.Y, fit.Z, fit.D), BASELINE_SIGMOID, 1e-4)
        self.assertGreaterEqual(fit.r_squared, 1 - 1e-10)

    def test_sigmoid_flat(self):
        fit = fit_sigmoid(self.t, np.full(self.t.size, 0.5))
        self.assertEqual(fit.X, 0.5)
        self.assertEqual(fit.Y, 0.0)
        self.assertTrue(fit.degenerate)

    def test_sigmoid_eval(self):
        fit = SigmoidFit(*BASELINE_SIGMOID, r_squared=1.0)
        self.assertAlmostEqual(float(fit(fit.D)), fit.X - fit.Y / 2, places=15)
        self.assertAlmostEqual(float(fit(1e9)), fit.X - fit.Y, places=15)

    def test_sigmoid_round_trip_family(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            span = self.t[-1]
            theta = (rng.uniform(0.9, 1.1), rng.uniform(0.1, 0.8), rng.uniform(2, 50) / span, rng.uniform(0.3, 0.7) * span)
            fit = fit_sigmoid(self.t, _sigmoid(theta, self.t))
            self.assertRelative((fit.X, fit.Y, fit.Z, fit.D), theta, 1e-3)

    def test_sigmoid_noise(self):
        clean = fit_sigmoid(self.t, _sigmoid(BASELINE_SIGMOID, self.t))
        noisy = fit_sigmoid(self.t, _sigmoid(BASELINE_SIGMOID, self.t) + 1e-3 * np.sin(7.0 * np.arange(self.t.size)))
        self.assertRelative((noisy.X, noisy.Y, noisy.Z, noisy.D), (clean.X, clean.Y, clean.Z, clean.D), 5e-2)
        self.assertGreaterEqual(noisy.r_squared, 0.999)

    def test_sigmoid_initializer_grid(self):
        values = _sigmoid(BASELINE_SIGMOID, self.t)
        costs = []
        for init in sigmoid_initializers(self.t, values):
            fit = fit_sigmoid(self.t, values, init)
            costs.append(np.sum((values - fit(self.t)) ** 2))
        self.assertLess(max(costs) - min(costs), 1e-6)

    def test_rational_recovery(self):
        values = _rational(BASELINE_RATIONAL, self.t)
        fit = fit_rational(self.t, values)
        self.assertRelative((fit.A, fit.B, fit.C), BASELINE_RATIONAL, 1e-4)
        self.assertGreaterEqual(fit.r_squared, 1 - 1e-10)

    def test_rational_flat(self):
        fit = fit_rational(self.t, np.full(self.t.size, 0.003))
        self.assertEqual(fit.A, 0.0)
        self.assertEqual(fit.C, 0.003)

    def test_rational_eval(self):
        fit = RationalFit(*BASELINE_RATIONAL, r_squared=1.0)
        self.assertAlmostEqual(float(fit(0.0)), 4.7865 / 331.6163 + 0.00247, places=15)
        self.assertAlmostEqual(float(fit(0.0)), 0.016904, places=6)
        with self.assertRaises(FitError):
            fit(-400.0)

    def test_insufficient(self):
        with self.assertRaises(FitError):
            fit_sigmoid([0.0, 1.0], [1.0, 0.5])
        with self.assertRaises(FitError):
            fit_rational([0.0, 1.0, 2.0], [1.0, 0.5, 0.2])
        with self.assertRaises(FitError):
            fit_sigmoid(np.zeros(10), np.linspace(1, 0, 10))

    def test_r_squared(self):
        obs = np.array([0.0, 1.0, 2.0])
        self.assertEqual(r_squared(obs, obs), 1.0)
        self.assertEqual(r_squared(obs, np.full(3, obs.mean())), 0.0)
        self.assertEqual(r_squared(obs, [0.0, 1.0, 1.0]), 0.5)
        with self.assertRaises(FitError):
            r_squared([1.0, 1.0], [1.0, 1.0])

    def test_ks(self):
        n = 100
        quantiles = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
        self.assertLessEqual(ks_statistic(quantiles), 1 / (2 * n) + 0.01)
        with self.assertRaises(FitError):
            ks_statistic(np.ones(8))
        # two points standardize to -+1/sqrt(2)
        z = 1 / np.sqrt(2)
        expect = max(norm.cdf(-z), 0.5 - norm.cdf(-z), norm.cdf(z) - 0.5, 1 - norm.cdf(z))
        self.assertAlmostEqual(ks_statistic([-1.0, 1.0]), expect, places=12)
