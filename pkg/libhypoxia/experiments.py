"""
Quantity-of-interest models shared by the command line and the acceptance
tests: the lumped model, the full vessel/tissue pipeline driven by
surrogates fitted to the lumped model, and an additive test model.

Models are plain picklable callables so sensitivity sweeps can hand them to
worker processes.
"""
import logging as log
import unittest
from dataclasses import dataclass

import numpy as np

from libhypoxia.grid import TissueGrid
from libhypoxia.network import default_network
from libhypoxia.params import Numerics, baseline_parameters, default_bounds, default_protocol, reduced_bounds
from libhypoxia.pkpd0d import simulate_0d
from libhypoxia.sensitivity import run_morris, saltelli_sample, sobol_indices, unit_bounds
from libhypoxia.surrogate import SurrogateFit, fit_surrogates, rational_window
from libhypoxia.tissue3d1d import (
    FieldSet, Geometry, TpzResult, solve_flow, solve_hematocrit, solve_oxygen, simulate_tpz,
)

QOI_LABELS = (
    "mean_c_t_tpz",
    "c_t_tpz_7200",
    "c_t_tpz_10800",
    "c_t_tpz_21600",
    "mean_sf",
    "sf_7200",
    "sf_10800",
    "sf_21600",
)


def qoi_vector(summary):
    return np.array([summary[label] for label in QOI_LABELS], dtype=float)


@dataclass
class TissueRun:
    grid: TissueGrid
    fits: SurrogateFit
    fields: FieldSet
    tpz: TpzResult

    def summary(self):
        return self.tpz.summary()


def tissue_grid(network, numerics):
    return TissueGrid((*map(float, network.box),), (int(numerics.cells),) * 3)


def run_tissue(params, proto, network, numerics=None, fits=None, dt=None, geometry=None):
    """Lumped run, surrogate fits, then flow, hematocrit, oxygen and TPZ on the grid"""
    numerics = numerics or Numerics()
    if fits is None:
        fits = fit_surrogates(simulate_0d(params, proto, numerics))
    grid = geometry.grid if geometry else tissue_grid(network, numerics)
    geometry = geometry or Geometry.build(network, grid)

    fields = solve_flow(network, grid, params, geometry)
    H = solve_hematocrit(network, fields, params)
    solve_oxygen(network, grid, fields, H, params, numerics)
    tpz = simulate_tpz(network, grid, fields, fits.sigmoid, fits.rational, proto, params,
                       dt=dt, numerics=numerics)
    log.debug(f"Tissue run: mean c_t_tpz={tpz.summary()['mean_c_t_tpz']:.6e}")
    return TissueRun(grid=grid, fits=fits, fields=fields, tpz=tpz)


class ZeroDModel:
    """ParameterSet -> QoI vector of the lumped model"""

    def __init__(self, proto=None, numerics=None):
        self.proto = proto or default_protocol(baseline_parameters())
        self.numerics = numerics or Numerics()

    def __call__(self, params):
        series = simulate_0d(params, self.proto.with_plateau(params.c_v0_tpz), self.numerics)
        return qoi_vector(series.summary())


class TissueModel:
    """ParameterSet -> QoI vector of the vessel/tissue pipeline"""

    def __init__(self, network=None, proto=None, numerics=None, dt=None):
        self.network = network or default_network()
        self.proto = proto or default_protocol(baseline_parameters())
        self.numerics = numerics or Numerics()
        self.dt = dt
        self._geometry = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_geometry"] = None
        return state

    def __call__(self, params):
        if self._geometry is None:
            self._geometry = Geometry.build(self.network, tissue_grid(self.network, self.numerics))
        run = run_tissue(params, self.proto.with_plateau(params.c_v0_tpz), self.network, self.numerics,
                         dt=self.dt, geometry=self._geometry)
        return qoi_vector(run.summary())


class LinearModel:
    """Y = sum a_i x_i over the sampled values, in bounds order"""

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)

    @classmethod
    def for_bounds(cls, k):
        return cls(np.arange(1.0, k + 1.0))

    def __call__(self, values):
        x = np.fromiter(values.values(), dtype=float, count=len(values))
        return np.array([float(self.coeffs @ x)])

    def first_order(self, bounds):
        """Closed-form first-order indices for independent uniform inputs"""
        var = self.coeffs ** 2 * (bounds.upper - bounds.lower) ** 2 / 12.0
        return var / var.sum()


class TestExperiments(unittest.TestCase):
    """Cross-module acceptance checks. The full Morris sweeps are slow (minutes)."""

    morris = None

    @classmethod
    def zero_d_morris(cls):
        if cls.morris is None:
            cls.morris = run_morris(ZeroDModel(), default_bounds(), r=70, p=4, seed=0, qoi_labels=QOI_LABELS,
                                    base=baseline_parameters(), workers=4)
        return cls.morris

    def test_morris_evaluation_count(self):
        report = self.zero_d_morris()
        self.assertEqual(report.evaluations, 1050)
        self.assertEqual(report.failures, 0)

    def test_plateau_concentration_dominates(self):
        report = self.zero_d_morris()
        q = report.qoi("mean_c_t_tpz")
        lead = report.names.index("c_v0_tpz")
        others = np.delete(report.mu_star[q], lead)
        self.assertGreaterEqual(report.mu_star[q, lead], 10.0 * others.max())

    def test_temporal_ordering(self):
        report = self.zero_d_morris()
        early, late = report.qoi("c_t_tpz_7200"), report.qoi("c_t_tpz_21600")
        for i, name in enumerate(report.names):
            self.assertLess(report.mu_star[late, i], report.mu_star[early, i], msg=name)
        lead = report.names.index("c_v0_tpz")
        self.assertGreaterEqual(report.mu_star[report.qoi("sf_21600"), lead],
                                report.mu_star[report.qoi("sf_7200"), lead])

    def test_survival_top_set(self):
        top = set(self.zero_d_morris().ranking("mean_sf")[:5])
        self.assertLessEqual({"c_v0_tpz", "K", "c_v0_ox", "k_met"}, top)

    def test_baseline_surrogates(self):
        params = baseline_parameters()
        series = simulate_0d(params, default_protocol(params))
        fits = fit_surrogates(series)
        self.assertGreaterEqual(fits.sigmoid.r_squared, 0.999)
        self.assertTrue(0.4 <= fits.rational.r_squared <= 0.99, msg=f"{fits.rational.r_squared}")
        t, _ = rational_window(series)
        self.assertEqual(fits.rational.t_min, t[0])

    def test_linear_morris(self):
        model = LinearModel([1.5, -2.0, 0.25, 4.0])
        report = run_morris(model, unit_bounds(4), r=12, p=6, seed=3)
        np.testing.assert_allclose(report.mu[0], model.coeffs, atol=1e-12)
        self.assertLessEqual(report.sigma[0].max(), 1e-12)

    def test_linear_sobol(self):
        bounds = unit_bounds(4)
        model = LinearModel.for_bounds(4)
        report = sobol_indices(model, saltelli_sample(4, 2 ** 14, bounds, seed=0))
        expect = model.first_order(bounds)
        np.testing.assert_allclose(report.first_order[0], expect, atol=0.02)
        np.testing.assert_allclose(report.total_order[0] - report.first_order[0], 0.0, atol=0.02)

    def test_tissue_model_deterministic(self):
        model = TissueModel(numerics=Numerics(cells=4), dt=240.0)
        params = baseline_parameters()
        a, b = model(params), model(params)
        self.assertTrue(np.array_equal(a, b))
        self.assertEqual(a.size, len(QOI_LABELS))
        self.assertTrue(np.all(a[4:] > 0) and np.all(a[4:] <= 1))

    def test_backend_consistency(self):
        """Slow: 80 vessel/tissue runs on a coarse grid"""
        bounds = reduced_bounds()
        tissue = run_morris(TissueModel(numerics=Numerics(cells=4), dt=60.0), bounds, r=10, p=4, seed=0,
                            qoi_labels=QOI_LABELS, base=baseline_parameters(), workers=4)
        self.assertEqual(tissue.evaluations, 80)
        zero_d = self.zero_d_morris()
        a = tissue.record("mean_c_t_tpz", "c_v0_tpz")["mu_star"]
        b = zero_d.record("mean_c_t_tpz", "c_v0_tpz")["mu_star"]
        self.assertTrue(0.5 <= a / b <= 2.0, msg=f"{a} vs {b}")
