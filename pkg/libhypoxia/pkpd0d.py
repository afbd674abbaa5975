"""
Lumped (0D) PK/PD model of tirapazamine in hypoxic tissue.

State is (c_t_tpz, c_t_ox, log SF). Wall and perivascular transport are
lumped into transfer coefficients K = (S/V) P D / (D + P L); the vascular
oxygen is a constant reservoir at c_v0_ox and the vascular TPZ follows the
three-phase injection profile.
"""
import math
import logging as log
import unittest
from unittest import mock
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from libhypoxia.odeint import integrate, IntegratorOptions, IntegratorError
from libhypoxia.params import baseline_parameters, default_protocol, default_bounds, InjectionProtocol, Numerics
from libhypoxia.util import read_csv_columns, write_csv

# below this tissue concentration r_eff is reported as 0
EPSILON_C = 1e-12

SUMMARY_TIMES = (7200.0, 10800.0, 21600.0)

CSV_COLUMNS = ("t", "c_v_tpz", "c_t_tpz", "c_t_ox", "sf", "m_tpz", "r_eff")

# integrator roundoff allowed above log SF = 0
LOG_SF_ROUNDOFF = 1e-12


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class State0D:
    c_t_tpz: float
    c_t_ox: float
    log_sf: float

    @classmethod
    def from_array(cls, y):
        return cls(float(y[0]), float(y[1]), float(y[2]))

    def as_array(self):
        return np.array([self.c_t_tpz, self.c_t_ox, self.log_sf], dtype=float)

    @property
    def sf(self):
        return math.exp(self.log_sf)


@dataclass
class TimeSeries0D:
    times: np.ndarray
    c_t_tpz: np.ndarray
    c_t_ox: np.ndarray
    sf: np.ndarray
    c_v_tpz: np.ndarray
    m_tpz: np.ndarray
    r_eff: np.ndarray
    # integrator state, unclipped; None when read back from CSV
    log_sf: np.ndarray = None

    def index(self, t):
        idx = int(np.searchsorted(self.times, t))
        if idx >= self.times.size or self.times[idx] != t:
            raise SimulationError(f"time {t} is not on the sample grid")
        return idx

    def at(self, t):
        idx = self.index(t)
        return {name: float(getattr(self, name)[idx]) for name in CSV_COLUMNS[1:]}

    def time_average(self, name):
        values = getattr(self, name)
        span = self.times[-1] - self.times[0]
        return float(trapezoid(values, self.times) / span)

    def summary(self):
        res = {}
        for t in SUMMARY_TIMES:
            if t <= self.times[-1]:
                sample = self.at(t)
                res[f"sf_{t:.0f}"] = sample["sf"]
                res[f"c_t_tpz_{t:.0f}"] = sample["c_t_tpz"]
        res["mean_sf"] = self.time_average("sf")
        res["mean_c_t_tpz"] = self.time_average("c_t_tpz")
        return res

    def rows(self):
        cols = [self.times] + [getattr(self, name) for name in CSV_COLUMNS[1:]]
        return zip(*cols)

    def to_csv(self, path):
        write_csv(path, CSV_COLUMNS, self.rows())

    @classmethod
    def from_csv(cls, path):
        cols = read_csv_columns(path)
        missing = [name for name in CSV_COLUMNS if name not in cols]
        if missing:
            raise SimulationError(f"{path}: missing columns {', '.join(missing)}")
        return cls(
            times=cols["t"], c_t_tpz=cols["c_t_tpz"], c_t_ox=cols["c_t_ox"], sf=cols["sf"],
            c_v_tpz=cols["c_v_tpz"], m_tpz=cols["m_tpz"], r_eff=cols["r_eff"],
        )


def vascular_tpz(t, proto):
    """Vascular TPZ concentration of the ramp/plateau/decay protocol"""
    if t <= 0:
        return 0.0
    if t <= proto.T_P:
        return proto.c_v0_tpz * (t / proto.T_P)
    if t <= proto.T:
        return proto.c_v0_tpz
    if t <= proto.decay_end:
        return proto.c_v0_tpz * math.exp(-(t - proto.T) / proto.tau)
    return 0.0


def lumped_transfer_coeff(P, D, L, S_over_V):
    """Transfer coefficient of the wall (1/P) and perivascular layer (L/D) in series"""
    return S_over_V * P * D / (D + P * L)


def perivascular_concentration(c_v, c_t, R1, R2):
    """Quasi-steady concentration between a wall resistance R1 and a layer resistance R2"""
    if not (R1 > 0 and R2 > 0):
        raise ValueError("resistances must be positive")
    return (R2 * c_v + R1 * c_t) / (R1 + R2)


def m_tpz(c_tpz, c_ox, params):
    inhibition = params.K / (params.K + c_ox)
    return inhibition * (params.k_met * c_tpz + params.V_max_tpz * c_tpz / (params.K_m_tpz + c_tpz))


def m_ox(c_ox, params):
    return params.V_max_ox * c_ox / (c_ox + params.K_m_ox)


class ZeroDSystem:
    """Right-hand side of the lumped system with the coefficients precomputed"""

    def __init__(self, params, proto):
        self.params = params
        self.proto = proto
        self.K_tpz = lumped_transfer_coeff(params.P_tpz, params.D_t_tpz, params.L_diff, params.S_over_V)
        self.K_ox = lumped_transfer_coeff(params.P_ox, params.D_t_ox, params.L_diff, params.S_over_V)

    def __call__(self, t, y):
        p = self.params
        c, c_ox, log_sf = y[0], y[1], y[2]
        phi_sf = p.phi_0 * math.exp(log_sf)
        m = m_tpz(c, c_ox, p)
        return np.array([
            self.K_tpz * (vascular_tpz(t, self.proto) - c) - phi_sf * m,
            self.K_ox * (p.c_v0_ox - c_ox) - phi_sf * m_ox(c_ox, p),
            -p.alpha_pd * c * m,
        ])


def rhs_0d(t, state, params, proto):
    y = state.as_array()
    if not np.all(np.isfinite(y)) or not math.isfinite(t):
        raise SimulationError(f"non-finite state {state} at t={t}")
    return State0D.from_array(ZeroDSystem(params, proto)(t, y))


def equilibrium_oxygen(params):
    """Tissue oxygen where exchange balances consumption at SF = 1"""
    K_ox = lumped_transfer_coeff(params.P_ox, params.D_t_ox, params.L_diff, params.S_over_V)
    balance = lambda c: K_ox * (params.c_v0_ox - c) - params.phi_0 * m_ox(c, params)
    if balance(0.0) <= 0.0:
        return 0.0
    return brentq(balance, 0.0, params.c_v0_ox, xtol=1e-300, rtol=4 * np.finfo(float).eps)


def integrator_options(numerics):
    return IntegratorOptions(
        rel_tol=numerics.rel_tol,
        abs_tol=numerics.abs_tol,
        max_step=numerics.max_step,
        max_steps=numerics.max_steps,
    )


def simulate_0d(params, proto, numerics=None):
    numerics = numerics or Numerics()
    opts = integrator_options(numerics)
    system = ZeroDSystem(params, proto)

    grid = np.arange(0.0, proto.t_end, numerics.sample_dt)
    extra = [t for t in SUMMARY_TIMES if t <= proto.t_end]
    grid = np.unique(np.concatenate((grid, proto.corners(), extra, [proto.t_end])))

    edges = (0.0,) + proto.corners() + (proto.t_end,)
    y = np.array([0.0, params.c0_ox, 0.0])
    times, states = [np.zeros(1)], [y[None, :]]

    for a, b in zip(edges[:-1], edges[1:]):
        phase = proto.phase(0.5 * (a + b))
        samples = grid[(grid > a) & (grid < b)]
        try:
            traj = integrate(system, y, (a, b), samples, opts)
        except IntegratorError as E:
            raise IntegratorError(f"{phase} phase: {E}", t=E.t, phase=phase) from E
        times.append(traj.times[1:])
        states.append(traj.states[1:])
        y = traj.final
        log.debug(f"0D {phase} phase [{a}, {b}]: {traj.accepted_steps} steps")

    times = np.concatenate(times)
    states = np.vstack(states)

    c_t, c_ox, log_sf = states[:, 0], states[:, 1], states[:, 2]
    if log_sf.max() > LOG_SF_ROUNDOFF:
        i = int(np.argmax(log_sf))
        raise SimulationError(f"surviving fraction above 1 (log SF = {log_sf[i]:.3g}) at t={times[i]}")
    sf = np.exp(np.minimum(log_sf, 0.0))
    c_v = np.array([vascular_tpz(t, proto) for t in times])
    m = m_tpz(c_t, c_ox, params)
    r_eff = np.zeros_like(m)
    ok = c_t > EPSILON_C
    r_eff[ok] = m[ok] / (sf[ok] * c_t[ok])

    return TimeSeries0D(times=times, c_t_tpz=c_t, c_t_ox=c_ox, sf=sf, c_v_tpz=c_v, m_tpz=m, r_eff=r_eff,
                        log_sf=log_sf)


class TestPkpd0d(unittest.TestCase):

    def setUp(self):
        self.params = baseline_parameters()
        self.proto = default_protocol(self.params)

    def assertNonincreasing(self, log_sf):
        # dense output may wobble within the integrator tolerance
        slack = LOG_SF_ROUNDOFF + 1e-8 * np.abs(log_sf[1:])
        self.assertTrue(np.all(np.diff(log_sf) <= slack), msg=f"max rise {np.diff(log_sf).max():.3g}")
        self.assertLessEqual(log_sf.max(), LOG_SF_ROUNDOFF)

    def test_vascular_profile(self):
        proto = InjectionProtocol.from_plateau(3.0e-2, T_P=3600.0, T=7200.0, tau=3220.0, t_end=21600.0)
        self.assertEqual(vascular_tpz(proto.T_P, proto), 3.0e-2)
        self.assertAlmostEqual(vascular_tpz(proto.T + proto.tau, proto), 3.0e-2 * math.exp(-1), places=15)
        self.assertEqual(vascular_tpz(proto.T + 5 * proto.tau + 1, proto), 0.0)
        self.assertEqual(vascular_tpz(0.0, proto), 0.0)
        for corner in (proto.T_P, proto.T):
            self.assertAlmostEqual(vascular_tpz(corner - 1e-9, proto), vascular_tpz(corner + 1e-9, proto), places=12)

    def test_transfer_coeff(self):
        self.assertAlmostEqual(lumped_transfer_coeff(5e-5, 5e-11, 2.5e-6, 7000.0), 0.1, places=14)
        self.assertAlmostEqual(lumped_transfer_coeff(1e-9, 1e-6, 2.5e-6, 7000.0) / (7000 * 1e-9), 1.0, places=8)
        self.assertAlmostEqual(lumped_transfer_coeff(1.0, 1e-12, 2.5e-6, 7000.0) / (7000 * 1e-12 / 2.5e-6), 1.0, places=8)

    def test_perivascular(self):
        self.assertEqual(perivascular_concentration(2.0, 2.0, 1.0, 3.0), 2.0)
        self.assertEqual(perivascular_concentration(3.0, 1.0, 1.0, 1.0), 2.0)
        self.assertEqual(perivascular_concentration(3.0, 0.0, 2.0, 1.0), 1.0)

    def test_metabolism(self):
        p = self.params
        self.assertEqual(m_tpz(0.0, 0.05, p), 0.0)
        self.assertAlmostEqual(m_tpz(0.01, p.K, p), 0.5 * m_tpz(0.01, 0.0, p), places=18)
        self.assertAlmostEqual(m_tpz(p.K_m_tpz, 0.0, p), p.k_met * p.K_m_tpz + p.V_max_tpz / 2, places=18)
        self.assertEqual(m_ox(0.0, p), 0.0)
        self.assertAlmostEqual(m_ox(p.K_m_ox, p), p.V_max_ox / 2, places=18)
        self.assertGreaterEqual(m_ox(99 * p.K_m_ox, p), 0.99 * p.V_max_ox)
        self.assertLessEqual(m_ox(1e6, p), p.V_max_ox)

    def test_rhs_equilibrium(self):
        c_eq = equilibrium_oxygen(self.params)
        d = rhs_0d(0.0, State0D(0.0, c_eq, 0.0), self.params, self.proto)
        self.assertEqual(d.c_t_tpz, 0.0)
        self.assertLess(abs(d.c_t_ox), 1e-14)
        self.assertEqual(d.log_sf, 0.0)

    def test_rhs_frozen_sf(self):
        p = self.params.replace(alpha_pd=0.0)
        for state in (State0D(0.01, 0.05, -0.2), State0D(0.04, 0.0, 0.0)):
            self.assertEqual(rhs_0d(1000.0, state, p, self.proto).log_sf, 0.0)
        with self.assertRaises(SimulationError):
            rhs_0d(0.0, State0D(math.nan, 0.0, 0.0), p, self.proto)

    def test_pure_exchange(self):
        # constant vascular level from t = 0 up to T
        p = self.params.replace(k_met=0.0, V_max_tpz=0.0)
        proto = InjectionProtocol.from_plateau(p.c_v0_tpz, T_P=1e-6, T=600.0, tau=3220.0, t_end=600.0)
        series = simulate_0d(p, proto)
        K_tpz = lumped_transfer_coeff(p.P_tpz, p.D_t_tpz, p.L_diff, p.S_over_V)
        t = series.times[series.times >= 1.0]
        expect = p.c_v0_tpz * (1 - np.exp(-K_tpz * t))
        np.testing.assert_allclose(series.c_t_tpz[series.times >= 1.0], expect, rtol=1e-6)

    def test_baseline(self):
        series = simulate_0d(self.params, self.proto)
        self.assertEqual(series.sf[0], 1.0)
        self.assertNonincreasing(series.log_sf)
        self.assertLess(series.log_sf[-1], 0.0)
        self.assertTrue(np.all(series.c_t_tpz >= -1e-12))
        self.assertTrue(np.all(series.c_t_ox >= -1e-12))
        peak = series.times[np.argmax(series.c_t_tpz)]
        self.assertGreaterEqual(peak, self.proto.T_P)
        self.assertLessEqual(peak, self.proto.T + 3 * self.proto.tau)
        self.assertEqual(series.r_eff[0], 0.0)
        summary = series.summary()
        self.assertTrue(0.0 < summary["sf_7200"] < 1.0)

    def test_anoxic_linear(self):
        p = self.params.replace(alpha_pd=0.0, c_v0_ox=0.0, c0_ox=0.0, V_max_tpz=0.0)
        series = simulate_0d(p, self.proto)
        # c' = K (c_v(t) - c) - phi_0 k_met c, closed form per protocol phase
        K = lumped_transfer_coeff(p.P_tpz, p.D_t_tpz, p.L_diff, p.S_over_V)
        lam = K + p.phi_0 * p.k_met
        a, c0, T_P, T, tau = self.proto.slope_a, self.proto.c_v0_tpz, self.proto.T_P, self.proto.T, self.proto.tau

        def ramp(t):
            return K * a * (t / lam - (1 - math.exp(-lam * t)) / lam ** 2)

        def plateau(t):
            y0 = ramp(T_P)
            return K * c0 / lam + (y0 - K * c0 / lam) * math.exp(-lam * (t - T_P))

        def decay(t):
            y0, s = plateau(T), t - T
            mu = 1 / tau
            return y0 * math.exp(-lam * s) + K * c0 / (lam - mu) * (math.exp(-mu * s) - math.exp(-lam * s))

        for t in (1800.0, 3600.0, 5000.0, 7200.0, 10800.0, 21600.0):
            expect = ramp(t) if t <= T_P else plateau(t) if t <= T else decay(t)
            got = series.at(t)["c_t_tpz"]
            self.assertLess(abs(got - expect) / expect, 1e-6, msg=f"t={t}")
        self.assertTrue(np.all(series.sf == 1.0))

    def test_implicit_euler_reference(self):
        """Slow: two million fixed steps of backward Euler"""
        p, proto = self.params, self.proto
        K_tpz = lumped_transfer_coeff(p.P_tpz, p.D_t_tpz, p.L_diff, p.S_over_V)
        K_ox = lumped_transfer_coeff(p.P_ox, p.D_t_ox, p.L_diff, p.S_over_V)
        K, kmet, V, Km, Vo, Kmo, phi = p.K, p.k_met, p.V_max_tpz, p.K_m_tpz, p.V_max_ox, p.K_m_ox, p.phi_0
        dt = 0.01
        checks = {720_000: 7200.0, 1_080_000: 10800.0, 2_160_000: 21600.0}
        ref = {}
        c, o, s = 0.0, p.c0_ox, 0.0
        for n in range(1, 2_160_001):
            t = n * dt
            cv = vascular_tpz(t, proto)
            sf = math.exp(s)
            # oxygen only sees TPZ through SF, solve it first
            o_old = o
            for _ in range(3):
                g = o - o_old - dt * (K_ox * (p.c_v0_ox - o) - phi * sf * Vo * o / (o + Kmo))
                o -= g / (1 + dt * (K_ox + phi * sf * Vo * Kmo / (o + Kmo) ** 2))
            f = K / (K + o)
            c_old = c
            for _ in range(3):
                m = f * (kmet * c + V * c / (Km + c))
                dm = f * (kmet + V * Km / (Km + c) ** 2)
                g = c - c_old - dt * (K_tpz * (cv - c) - phi * sf * m)
                c -= g / (1 + dt * (K_tpz + phi * sf * dm))
            s -= dt * p.alpha_pd * c * f * (kmet * c + V * c / (Km + c))
            if n in checks:
                ref[checks[n]] = (c, o, math.exp(s))

        series = simulate_0d(p, proto)
        for t in SUMMARY_TIMES:
            sample = series.at(t)
            for got, expect in zip((sample["c_t_tpz"], sample["c_t_ox"], sample["sf"]), ref[t]):
                self.assertLess(abs(got - expect) / abs(expect), 1e-4, msg=f"t={t}")

    def test_random_draws(self):
        """Property sweep: SF stays in (0, 1] and nonincreasing over the bound box"""
        rng = np.random.default_rng(20240601)
        bounds = default_bounds()
        numerics = Numerics(sample_dt=60.0)
        for point in bounds.scale(rng.random((100, bounds.k))):
            params = self.params.replace_sa(dict(zip(bounds.names, point)))
            series = simulate_0d(params, default_protocol(params), numerics)
            self.assertTrue(np.all(series.sf > 0.0) and np.all(series.sf <= 1.0))
            self.assertNonincreasing(series.log_sf)
            self.assertTrue(np.all(series.c_t_tpz >= -1e-12))
            self.assertTrue(np.all(series.c_t_ox >= -1e-12))

    def test_dose_response(self):
        numerics = Numerics(sample_dt=60.0)
        doses = np.linspace(1.78e-2, 4.73e-2, 21)
        sf_end = []
        for dose in doses:
            p = self.params.replace(c_v0_tpz=float(dose))
            sf_end.append(simulate_0d(p, default_protocol(p), numerics).sf[-1])
        self.assertTrue(np.all(np.diff(sf_end) <= 0.0))

    def test_oxygen_protects(self):
        numerics = Numerics(sample_dt=60.0)
        sf_end = []
        for c_ox in np.linspace(3.9e-2, 1.3e-1, 21):
            p = self.params.replace(c_v0_ox=float(c_ox))
            sf_end.append(simulate_0d(p, self.proto, numerics).sf[-1])
        self.assertTrue(np.all(np.diff(sf_end) >= 0.0))

    def test_growing_survival_rejected(self):
        class Regrowth(ZeroDSystem):
            def __call__(self, t, y):
                dy = super().__call__(t, y)
                dy[2] = -dy[2]
                return dy

        opts = integrator_options(Numerics())
        traj = integrate(Regrowth(self.params, self.proto), np.array([0.0, self.params.c0_ox, 0.0]),
                         (0.0, self.proto.t_end), np.arange(600.0, self.proto.t_end, 600.0), opts)
        with self.assertRaises(AssertionError):
            self.assertNonincreasing(traj.states[:, 2])

        with mock.patch(f"{__name__}.ZeroDSystem", Regrowth):
            with self.assertRaises(SimulationError):
                simulate_0d(self.params, self.proto)
