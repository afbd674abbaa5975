"""
Dormand-Prince 4(5) integrator with PI step-size control and dense output.

The stepper propagates the 5th-order solution (local extrapolation), uses the
embedded 4th-order solution for the error estimate, and reuses the last
stage as the first stage of the next step (FSAL). Samples between step
endpoints come from the 4th-order continuous extension.
"""
import math
import logging as log
import unittest
from dataclasses import dataclass

import numpy as np


class IntegratorError(Exception):

    def __init__(self, message, t=None, phase=None):
        self.t = t
        self.phase = phase
        super().__init__(message)


C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])

A = np.array([
    [0.0,               0.0,               0.0,               0.0,             0.0,                0.0,       0.0],
    [1 / 5,             0.0,               0.0,               0.0,             0.0,                0.0,       0.0],
    [3 / 40,            9 / 40,            0.0,               0.0,             0.0,                0.0,       0.0],
    [44 / 45,           -56 / 15,          32 / 9,            0.0,             0.0,                0.0,       0.0],
    [19372 / 6561,      -25360 / 2187,     64448 / 6561,      -212 / 729,      0.0,                0.0,       0.0],
    [9017 / 3168,       -355 / 33,         46732 / 5247,      49 / 176,        -5103 / 18656,      0.0,       0.0],
    [35 / 384,          0.0,               500 / 1113,        125 / 192,       -2187 / 6784,       11 / 84,   0.0],
])

# 5th-order weights equal the last row of A (FSAL)
B5 = A[6]
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4

# continuous extension: y(t + theta*h) = y + h * K^T (P @ [theta, theta^2, theta^3, theta^4])
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# PI controller exponents for a 5th-order pair
ALPHA = 0.7 / 5
BETA = 0.4 / 5


@dataclass(frozen=True)
class IntegratorOptions:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_step: float = math.inf
    initial_step: float | None = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("rel_tol and abs_tol must be positive")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial_step must be positive")
        if not self.max_steps > 0:
            raise ValueError("max_steps must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    accepted_steps: int
    rejected_steps: int

    @property
    def final(self):
        return self.states[-1]


def _norm(err, y, ynew, opts):
    scale = opts.abs_tol + opts.rel_tol * np.maximum(np.abs(y), np.abs(ynew))
    return math.sqrt(float(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, t1, opts):
    scale = opts.abs_tol + opts.rel_tol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / scale) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t1 - t0, opts.max_step)
    f1 = np.asarray(rhs(t0 + h0, y0 + h0 * f0), dtype=float)
    d2 = math.sqrt(float(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, t1 - t0, opts.max_step)


def _dense(y, h, K, theta):
    q = np.cumprod(np.full(4, theta))
    return y + h * (K.T @ (P @ q))


def integrate(rhs, y0, t_span, sample_times=(), opts=None):
    """Integrate y' = rhs(t, y) over t_span and sample the solution.

    The returned trajectory holds the start time, every sample time, and the
    end time (duplicates merged), in increasing order.
    """
    opts = opts or IntegratorOptions()
    t0, t1 = (float(t) for t in t_span)
    if not t1 > t0:
        raise ValueError(f"t_span must be increasing, got ({t0}, {t1})")

    samples = np.asarray(sample_times, dtype=float)
    if samples.size and (np.any(np.diff(samples) < 0) or samples[0] < t0 or samples[-1] > t1):
        raise ValueError("sample_times must be sorted and lie within t_span")
    out_times = np.unique(np.concatenate(([t0], samples, [t1])))

    y = np.array(y0, dtype=float)
    n = y.size
    out_states = np.empty((out_times.size, n))
    out_states[0] = y
    nxt = 1

    f = np.asarray(rhs(t0, y), dtype=float)
    if not np.all(np.isfinite(f)):
        raise IntegratorError(f"non-finite derivative at t={t0}", t=t0)

    h = opts.initial_step or _initial_step(rhs, t0, y, f, t1, opts)
    h = min(h, opts.max_step)
    t = t0
    K = np.empty((7, n))
    err_prev = 1e-4
    accepted = rejected = 0

    while t < t1:
        if accepted + rejected >= opts.max_steps:
            raise IntegratorError(f"max_steps={opts.max_steps} exceeded at t={t}", t=t)

        hmin = 16 * np.finfo(float).eps * max(abs(t), 1.0)
        if h < hmin:
            raise IntegratorError(f"step size underflow at t={t} (h={h:.3e})", t=t)

        last = t + h >= t1 or t1 - (t + h) < hmin
        if last:
            h = t1 - t

        K[0] = f
        for i in range(1, 7):
            yi = y + h * (A[i, :i] @ K[:i])
            K[i] = rhs(t + C[i] * h, yi)
            if not np.all(np.isfinite(K[i])):
                raise IntegratorError(f"non-finite derivative at t={t + C[i] * h}", t=t)
        ynew = yi
        tnew = t1 if last else t + h

        err = _norm(h * (E @ K), y, ynew, opts)

        if err <= 1.0:
            while nxt < out_times.size and out_times[nxt] <= tnew:
                ts = out_times[nxt]
                if ts == tnew:
                    out_states[nxt] = ynew
                else:
                    out_states[nxt] = _dense(y, h, K, (ts - t) / h)
                nxt += 1

            accepted += 1
            t, y, f = tnew, ynew, K[6].copy()
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err ** -ALPHA * err_prev ** BETA))
            err_prev = max(err, 1e-4)
            h = min(h * factor, opts.max_step)
        else:
            rejected += 1
            h *= max(MIN_FACTOR, SAFETY * err ** -(1 / 5))

    log.debug(f"Integrated [{t0}, {t1}]: {accepted} accepted, {rejected} rejected steps")
    return Trajectory(times=out_times, states=out_states, accepted_steps=accepted, rejected_steps=rejected)


class TestOdeint(unittest.TestCase):

    def test_decay(self):
        traj = integrate(lambda t, y: -y, [1.0], (0.0, 1.0), opts=IntegratorOptions(rel_tol=1e-9, abs_tol=1e-12))
        self.assertEqual(traj.times[0], 0.0)
        self.assertEqual(traj.times[-1], 1.0)
        self.assertLess(abs(traj.final[0] - math.exp(-1)), 1e-8)

    def test_constant(self):
        times = np.linspace(0, 10, 11)
        traj = integrate(lambda t, y: np.zeros_like(y), [7.0], (0.0, 10.0), times)
        self.assertEqual(len(traj.times), len(traj.states))
        self.assertTrue(np.all(traj.states[:, 0] == 7.0))

    def test_oscillator(self):
        opts = IntegratorOptions(rel_tol=1e-10, abs_tol=1e-12)
        traj = integrate(lambda t, y: np.array([y[1], -y[0]]), [1.0, 0.0], (0.0, 2 * math.pi), opts=opts)
        self.assertLess(abs(traj.final[0] - 1.0), 1e-6)
        self.assertLess(abs(traj.final[1]), 1e-6)

    def test_dense_output(self):
        opts = IntegratorOptions(rel_tol=1e-10, abs_tol=1e-13)
        times = np.linspace(0.0, 3.0, 37)
        traj = integrate(lambda t, y: -y, [1.0], (0.0, 3.0), times, opts)
        np.testing.assert_allclose(traj.states[:, 0], np.exp(-traj.times), rtol=1e-8)

    def test_dense_matches_step_endpoint(self):
        y, h = np.array([1.0, 0.5]), 0.1
        K = np.empty((7, 2))
        rhs = lambda t, y: np.array([y[1], -y[0]])
        K[0] = rhs(0.0, y)
        for i in range(1, 7):
            yi = y + h * (A[i, :i] @ K[:i])
            K[i] = rhs(C[i] * h, yi)
        np.testing.assert_allclose(_dense(y, h, K, 1.0), yi, rtol=1e-12)

    def test_order_fixed_steps(self):
        # tolerances loose enough that max_step alone sets the step
        def error(h):
            opts = IntegratorOptions(rel_tol=1e3, abs_tol=1e3, max_step=h, initial_step=h)
            traj = integrate(lambda t, y: -y, [1.0], (0.0, 2.0), opts=opts)
            return abs(traj.final[0] - math.exp(-2.0))

        self.assertGreaterEqual(error(0.2) / error(0.1), 8.0)

    def test_deterministic(self):
        rhs = lambda t, y: np.array([y[1], -y[0] - 0.1 * y[1]])
        a = integrate(rhs, [1.0, 0.0], (0.0, 20.0), np.linspace(0, 20, 50))
        b = integrate(rhs, [1.0, 0.0], (0.0, 20.0), np.linspace(0, 20, 50))
        self.assertTrue(np.array_equal(a.states, b.states))
        self.assertEqual(a.accepted_steps, b.accepted_steps)

    def test_errors(self):
        with self.assertRaises(IntegratorError):
            integrate(lambda t, y: y * np.nan, [1.0], (0.0, 1.0))
        with self.assertRaises(IntegratorError):
            integrate(lambda t, y: -y, [1.0], (0.0, 100.0), opts=IntegratorOptions(max_step=0.5, max_steps=10))
        with self.assertRaises(IntegratorError):
            integrate(lambda t, y: y ** 2, [1.0], (0.0, 2.0))
        with self.assertRaises(ValueError):
            integrate(lambda t, y: -y, [1.0], (1.0, 0.0))
