"""
Global sensitivity analysis: Morris elementary-effects screening and
variance-based Sobol indices (Saltelli sampling), sampled and analyzed
with SALib.

A model is any picklable callable returning a vector of quantities of
interest. It receives either a dict {range name: value} or, when a base
ParameterSet is given, that set with the sampled values applied.
"""
import logging as log
import unittest
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat

import numpy as np
from SALib.analyze import morris as morris_analyze
from SALib.analyze import sobol as sobol_analyze
from SALib.sample import morris as morris_sample
from SALib.sample import sobol as sobol_sample
from tqdm import tqdm

from libhypoxia.params import ParameterBounds
from libhypoxia.util import Serialize, write_csv

MAX_FAILURE_RATIO = 0.10
CONF_LEVEL = 0.95
NUM_RESAMPLES = 100


class SensitivityError(Exception):
    pass


def unit_bounds(k):
    return ParameterBounds({f"x{i + 1}": (0.0, 1.0) for i in range(k)})


def _salib_seed(seed):
    # SALib only reseeds numpy's global generator for a truthy seed
    return int(seed) % (2 ** 32 - 1) + 1


def _evaluate_one(model, base, values):
    try:
        arg = values if base is None else base.replace_sa(values)
        y = np.atleast_1d(np.asarray(model(arg), dtype=float))
    except Exception as E:
        log.warning(f"Model evaluation failed at {values}: {E}")
        return None
    if not np.all(np.isfinite(y)):
        log.warning(f"Model returned non-finite output at {values}")
        return None
    return y


def evaluate_points(model, bounds, points, base=None, workers=1, progress=False):
    """Evaluate the model at physical points, one row per point.

    Failed evaluations give a row of NaN. Results are in point order
    whatever the completion order of the workers.
    """
    args = [dict(zip(bounds.names, map(float, row))) for row in points]
    desc = f"{len(args)} model evaluations"

    if workers > 1:
        chunksize = max(1, len(args) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            it = pool.map(_evaluate_one, repeat(model), repeat(base), args, chunksize=chunksize)
            results = list(tqdm(it, total=len(args), desc=desc, disable=not progress))
    else:
        results = [_evaluate_one(model, base, a) for a in tqdm(args, desc=desc, disable=not progress)]

    good = [y for y in results if y is not None]
    failures = len(results) - len(good)
    if failures > MAX_FAILURE_RATIO * len(results) or not good:
        raise SensitivityError(f"{failures} of {len(results)} model evaluations failed")
    if failures:
        log.warning(f"{failures} of {len(results)} model evaluations failed and are excluded")

    q = good[0].size
    out = np.full((len(results), q), np.nan)
    for i, y in enumerate(results):
        if y is not None:
            if y.size != q:
                raise SensitivityError(f"model returned {y.size} outputs at point {i}, expected {q}")
            out[i] = y
    return out, failures


def _labels(qoi_labels, q):
    if qoi_labels is None:
        return tuple(f"y{i}" for i in range(q))
    if len(qoi_labels) != q:
        raise SensitivityError(f"{len(qoi_labels)} QoI labels for {q} model outputs")
    return tuple(qoi_labels)


@dataclass
class MorrisDesign:
    k: int
    p: int
    delta: float
    r: int
    X: np.ndarray
    seed: int
    bounds: ParameterBounds

    def points(self):
        return self.bounds.unit(self.X)

    def physical_points(self):
        return self.X

    @property
    def trajectories(self):
        return self.points().reshape(self.r, self.k + 1, self.k)

    @property
    def evaluations(self):
        return self.r * (self.k + 1)

    def steps(self):
        """Index and sign of the coordinate moved at each step, each of shape (r, k)"""
        d = np.diff(self.trajectories, axis=1)
        index = np.argmax(np.abs(d), axis=2)
        sign = np.sign(np.take_along_axis(d, index[:, :, None], axis=2)[:, :, 0])
        return index, sign


def build_trajectories(k, p, r, bounds=None, seed=0):
    """Random Morris trajectories on the p-level grid, scaled onto the bounds"""
    if p < 2 or p % 2:
        raise SensitivityError(f"grid levels must be even and >= 2, got p={p}")
    if k < 1 or r < 1:
        raise SensitivityError(f"need k >= 1 and r >= 1, got k={k}, r={r}")
    bounds = bounds or unit_bounds(k)
    if bounds.k != k:
        raise SensitivityError(f"bounds hold {bounds.k} parameters, expected {k}")

    X = morris_sample.sample(bounds.problem(), r, num_levels=p, seed=_salib_seed(seed))
    return MorrisDesign(k=k, p=p, delta=p / (2 * (p - 1)), r=r, X=X, seed=seed, bounds=bounds)


def elementary_effects(design, outputs):
    """Elementary effects in unit-cube coordinates, shape (r, k, q).

    Steps touching a failed (NaN) evaluation give NaN effects.
    """
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    if outputs.shape[0] != design.evaluations:
        raise SensitivityError(f"got {outputs.shape[0]} outputs for {design.evaluations} design points")

    dy = np.diff(outputs.reshape(design.r, design.k + 1, -1), axis=1)
    index, sign = design.steps()
    ee = np.empty_like(dy)
    ee[np.arange(design.r)[:, None], index] = dy / (sign * design.delta)[:, :, None]
    return ee


def morris_stats(ee):
    """mu, mu_star, sigma (divisor r-1) and sigma/mu_star per parameter of an (r, k) matrix"""
    ee = np.asarray(ee, dtype=float)
    if ee.ndim == 1:
        ee = ee[:, None]
    valid = np.sum(np.isfinite(ee), axis=0)
    if np.any(valid < 2):
        raise SensitivityError("need at least 2 elementary effects per parameter")

    mu = np.nanmean(ee, axis=0)
    mu_star = np.nanmean(np.abs(ee), axis=0)
    sigma = np.nanstd(ee, axis=0, ddof=1)
    return {"mu": mu, "mu_star": mu_star, "sigma": sigma, "sigma_over_mu_star": _ratio(sigma, mu_star)}


def _ratio(sigma, mu_star):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mu_star > 0, sigma / mu_star, np.nan)


def _cell(value):
    return "" if not np.isfinite(value) else float(value)


@dataclass
class SensitivityReport(Serialize):
    names: tuple
    qoi_labels: tuple
    mu: np.ndarray
    mu_star: np.ndarray
    sigma: np.ndarray
    sigma_over_mu_star: np.ndarray
    mu_star_conf: np.ndarray
    evaluations: int
    failures: int = 0
    trajectories_used: int = 0
    r: int = 0
    p: int = 0
    seed: int = 0

    def qoi(self, label):
        try:
            return self.qoi_labels.index(label)
        except ValueError:
            raise SensitivityError(f"unknown QoI {label!r}") from None

    def record(self, label, name):
        q, i = self.qoi(label), self.names.index(name)
        return {
            "mu": float(self.mu[q, i]),
            "mu_star": float(self.mu_star[q, i]),
            "sigma": float(self.sigma[q, i]),
            "sigma_over_mu_star": float(self.sigma_over_mu_star[q, i]),
            "mu_star_conf": float(self.mu_star_conf[q, i]),
        }

    def ranking(self, label):
        q = self.qoi(label)
        return [self.names[i] for i in np.argsort(-self.mu_star[q], kind="stable")]

    def table_rows(self, label):
        q = self.qoi(label)
        for i, name in enumerate(self.names):
            yield (name, float(self.mu[q, i]), float(self.mu_star[q, i]), float(self.sigma[q, i]),
                   _cell(self.sigma_over_mu_star[q, i]), float(self.mu_star_conf[q, i]))

    def write(self, out_dir, prefix="morris"):
        """Write the JSON report, one CSV table per QoI and the scatter CSV; returns the paths"""
        paths = [out_dir / f"{prefix}.json"]
        paths[0].write_text(self.to_json())
        for label in self.qoi_labels:
            path = out_dir / f"{prefix}-{label}.csv"
            write_csv(path, ("parameter", "mu", "mu_star", "sigma", "sigma_over_mu_star", "mu_star_conf"),
                      self.table_rows(label))
            paths.append(path)
        path = out_dir / f"{prefix}-scatter.csv"
        write_csv(path, ("qoi", "parameter", "mu_star", "sigma"), mu_star_sigma_table(self))
        paths.append(path)
        return paths


def mu_star_sigma_table(report):
    """Plot-ready (qoi, parameter, mu_star, sigma) rows of the Morris plane"""
    rows = []
    for q, label in enumerate(report.qoi_labels):
        for i, name in enumerate(report.names):
            rows.append((label, name, float(report.mu_star[q, i]), float(report.sigma[q, i])))
    return rows


def run_morris(model, bounds, r, p=4, seed=0, qoi_labels=None, base=None, workers=1, progress=False):
    """Morris screening of model over bounds.

    SALib analyzes the trajectories that were evaluated completely. When
    some evaluations failed, mu, mu_star and sigma are recomputed with only
    the elementary effects touching a failed point left out.
    """
    if r < 2:
        raise SensitivityError(f"Morris statistics need at least 2 trajectories, got r={r}")
    design = build_trajectories(bounds.k, p, r, bounds, seed)
    log.info(f"Morris screening: k={design.k}, p={p}, r={r}, {design.evaluations} evaluations")
    outputs, failures = evaluate_points(model, bounds, design.physical_points(), base, workers, progress)
    labels = _labels(qoi_labels, outputs.shape[1])
    q = outputs.shape[1]

    Y = outputs.reshape(r, design.k + 1, q)
    keep = np.all(np.isfinite(Y), axis=(1, 2))
    used = int(keep.sum())
    if used < r:
        log.warning(f"{r - used} of {r} Morris trajectories are incomplete")

    mu_star_conf = np.full((q, design.k), np.nan)
    stats = {}
    if used >= 2:
        X = design.X.reshape(r, design.k + 1, -1)[keep].reshape(-1, design.k)
        Y = Y[keep].reshape(-1, q)
        res = [morris_analyze.analyze(
            bounds.problem(), X, np.ascontiguousarray(Y[:, j]),
            num_resamples=NUM_RESAMPLES, conf_level=CONF_LEVEL, num_levels=p, seed=_salib_seed(seed),
        ) for j in range(q)]
        for key in ("mu", "mu_star", "sigma"):
            stats[key] = np.array([np.asarray(s[key], dtype=float) for s in res])
        mu_star_conf = np.array([np.asarray(s["mu_star_conf"], dtype=float) for s in res])

    if failures:
        ee = elementary_effects(design, outputs)
        per_qoi = [morris_stats(ee[:, :, j]) for j in range(q)]
        for key in ("mu", "mu_star", "sigma"):
            stats[key] = np.array([s[key] for s in per_qoi])

    return SensitivityReport(
        names=bounds.names,
        qoi_labels=labels,
        mu=stats["mu"],
        mu_star=stats["mu_star"],
        sigma=stats["sigma"],
        sigma_over_mu_star=_ratio(stats["sigma"], stats["mu_star"]),
        mu_star_conf=mu_star_conf,
        evaluations=design.evaluations,
        failures=failures,
        trajectories_used=used,
        r=r,
        p=p,
        seed=seed,
    )


@dataclass
class SobolDesign:
    """Saltelli design in SALib row order: per base sample A, AB_1..AB_k, B"""
    k: int
    n: int
    X: np.ndarray
    seed: int
    bounds: ParameterBounds

    def points(self):
        return self.bounds.unit(self.X)

    def physical_points(self):
        return self.X

    def _blocks(self):
        return self.points().reshape(self.n, self.k + 2, self.k)

    @property
    def A(self):
        return self._blocks()[:, 0]

    @property
    def B(self):
        return self._blocks()[:, -1]

    @property
    def AB(self):
        return np.swapaxes(self._blocks()[:, 1:-1], 0, 1)

    @property
    def evaluations(self):
        return self.n * (self.k + 2)


def saltelli_sample(k, n, bounds=None, seed=0):
    if n < 2 or k < 1:
        raise SensitivityError(f"need n >= 2 and k >= 1, got n={n}, k={k}")
    bounds = bounds or unit_bounds(k)
    if bounds.k != k:
        raise SensitivityError(f"bounds hold {bounds.k} parameters, expected {k}")
    if n & (n - 1):
        log.warning(f"Sobol sample size {n} is not a power of two")

    X = sobol_sample.sample(bounds.problem(), n, calc_second_order=False, scramble=True, seed=seed)
    return SobolDesign(k=k, n=n, X=X, seed=seed, bounds=bounds)


@dataclass
class SobolReport(Serialize):
    names: tuple
    qoi_labels: tuple
    first_order: np.ndarray
    total_order: np.ndarray
    first_order_conf: np.ndarray
    total_order_conf: np.ndarray
    evaluations: int
    failures: int = 0
    n: int = 0
    seed: int = 0

    def table_rows(self, label):
        q = self.qoi_labels.index(label)
        for i, name in enumerate(self.names):
            yield (name, float(self.first_order[q, i]), float(self.first_order_conf[q, i]),
                   float(self.total_order[q, i]), float(self.total_order_conf[q, i]))

    def write(self, out_dir, prefix="sobol"):
        paths = [out_dir / f"{prefix}.json"]
        paths[0].write_text(self.to_json())
        for label in self.qoi_labels:
            path = out_dir / f"{prefix}-{label}.csv"
            write_csv(path, ("parameter", "S", "S_conf", "S_T", "S_T_conf"), self.table_rows(label))
            paths.append(path)
        return paths


def sobol_indices(model, design, base=None, qoi_labels=None, workers=1, progress=False):
    log.info(f"Sobol indices: k={design.k}, n={design.n}, {design.evaluations} evaluations")
    outputs, failures = evaluate_points(model, design.bounds, design.physical_points(), base, workers, progress)
    labels = _labels(qoi_labels, outputs.shape[1])

    # drop base samples touched by a failed evaluation
    Y = outputs.reshape(design.n, design.k + 2, -1)
    keep = np.all(np.isfinite(Y), axis=(1, 2))
    if keep.sum() < 2:
        raise SensitivityError(f"only {int(keep.sum())} of {design.n} base samples were evaluated completely")
    Y = Y[keep].reshape(-1, Y.shape[2])

    res = []
    for q in range(Y.shape[1]):
        y = np.ascontiguousarray(Y[:, q])
        if not np.var(y) > 0:
            raise SensitivityError(f"model output {labels[q]} has zero variance")
        res.append(sobol_analyze.analyze(
            design.bounds.problem(), y, calc_second_order=False,
            num_resamples=NUM_RESAMPLES, conf_level=CONF_LEVEL, seed=_salib_seed(design.seed),
        ))
    pick = lambda key: np.array([np.asarray(s[key], dtype=float) for s in res])

    return SobolReport(names=design.bounds.names, qoi_labels=labels, first_order=pick("S1"),
                       total_order=pick("ST"), first_order_conf=pick("S1_conf"), total_order_conf=pick("ST_conf"),
                       evaluations=design.evaluations, failures=failures, n=design.n, seed=design.seed)


class _Linear:

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)

    def __call__(self, values):
        return float(self.coeffs @ np.array(list(values.values())))


class TestSensitivity(unittest.TestCase):

    def test_trajectory_structure(self):
        design = build_trajectories(2, 4, 1, seed=3)
        self.assertEqual(design.trajectories.shape, (1, 3, 2))
        self.assertAlmostEqual(design.delta, 2 / 3)
        for traj in build_trajectories(6, 4, 25, seed=1).trajectories:
            steps = np.diff(traj, axis=0)
            self.assertTrue(np.all(np.sum(steps != 0, axis=1) == 1))
            np.testing.assert_allclose(np.abs(steps.sum(axis=1)), 2 / 3, rtol=1e-12)
            self.assertEqual(sorted(np.nonzero(steps)[1]), list(range(6)))
            self.assertTrue(np.all((traj >= 0) & (traj <= 1)))

    def test_evaluation_count(self):
        design = build_trajectories(14, 4, 70, seed=0)
        self.assertEqual(design.evaluations, 1050)
        self.assertEqual(design.points().shape, (1050, 14))

    def test_deterministic(self):
        a = build_trajectories(5, 4, 10, seed=42)
        b = build_trajectories(5, 4, 10, seed=42)
        self.assertTrue(np.array_equal(a.trajectories, b.trajectories))
        c = build_trajectories(5, 4, 10, seed=43)
        self.assertFalse(np.array_equal(a.trajectories, c.trajectories))

    def test_infeasible(self):
        with self.assertRaises(SensitivityError):
            build_trajectories(3, 3, 5)
        with self.assertRaises(SensitivityError):
            build_trajectories(3, 4, 0)

    def test_linear_effects(self):
        a = np.array([3.0, -1.0, 0.5, 2.0])
        report = run_morris(_Linear(a), unit_bounds(4), r=12, seed=5)
        design = build_trajectories(4, 4, 12, seed=5)
        ee = elementary_effects(design, design.points() @ a)
        np.testing.assert_allclose(ee[:, :, 0], np.tile(a, (12, 1)), rtol=0, atol=1e-12)
        np.testing.assert_allclose(report.mu_star[0], np.abs(a), atol=1e-12)
        np.testing.assert_allclose(np.abs(report.mu[0]), report.mu_star[0], atol=1e-12)
        self.assertTrue(np.all(report.sigma[0] <= 1e-12))

    def test_constant_model(self):
        report = run_morris(lambda v: 1.5, unit_bounds(3), r=4)
        self.assertTrue(np.all(report.mu_star == 0))
        self.assertTrue(np.all(np.isnan(report.sigma_over_mu_star)))

    def test_abs_model_takes_both_signs(self):
        design = build_trajectories(2, 4, 20, seed=11)
        ee = elementary_effects(design, np.abs(design.points()[:, 0] - 0.5))[:, 0, 0]
        self.assertTrue(np.any(ee > 0) and np.any(ee < 0))
        stats = morris_stats(ee)
        self.assertLess(abs(stats["mu"][0]), stats["mu_star"][0])

    def test_stats(self):
        stats = morris_stats([1.0, 1.0, 1.0])
        self.assertEqual(stats["mu"][0], 1.0)
        self.assertEqual(stats["mu_star"][0], 1.0)
        self.assertEqual(stats["sigma"][0], 0.0)
        stats = morris_stats([1.0, -1.0])
        self.assertEqual(stats["mu"][0], 0.0)
        self.assertEqual(stats["mu_star"][0], 1.0)
        self.assertAlmostEqual(stats["sigma"][0], np.sqrt(2), places=15)
        with self.assertRaises(SensitivityError):
            morris_stats([1.0])

    def test_ranking_ratio(self):
        report = run_morris(_Linear([3.0, 1.0]), unit_bounds(2), r=6)
        self.assertEqual(report.ranking("y0"), ["x1", "x2"])
        self.assertAlmostEqual(report.mu_star[0, 0] / report.mu_star[0, 1], 3.0, places=12)

    def test_projection(self):
        report = run_morris(lambda v: v["x3"], unit_bounds(5), r=8)
        np.testing.assert_allclose(report.mu_star[0], [0, 0, 1, 0, 0], atol=1e-12)

    def test_scaling_covariance(self):
        f = lambda v: np.array([v["x1"] ** 2 + v["x1"] * v["x2"], np.sin(3 * v["x3"])])
        g = lambda v: 7.5 * f(v)
        a = run_morris(f, unit_bounds(3), r=10, seed=2)
        b = run_morris(g, unit_bounds(3), r=10, seed=2)
        for name in ("mu", "mu_star", "sigma"):
            np.testing.assert_allclose(getattr(b, name), 7.5 * getattr(a, name), rtol=1e-12, atol=1e-15)
        for label in a.qoi_labels:
            self.assertEqual(a.ranking(label), b.ranking(label))

    def test_failures(self):
        calls = {"n": 0}

        def flaky(v):
            calls["n"] += 1
            if calls["n"] % 4 == 0:
                raise RuntimeError("solver abort")
            return v["x1"]

        with self.assertRaises(SensitivityError):
            run_morris(flaky, unit_bounds(2), r=10)

        calls["n"] = 0

        def once(v):
            calls["n"] += 1
            return np.nan if calls["n"] == 7 else v["x1"] + v["x2"]

        report = run_morris(once, unit_bounds(2), r=30, seed=1)
        self.assertEqual(report.failures, 1)
        np.testing.assert_allclose(report.mu_star[0], [1.0, 1.0], atol=1e-12)

    def test_report_json_deterministic(self):
        a = run_morris(_Linear([1.0, 2.0, 3.0]), unit_bounds(3), r=5, seed=9)
        b = run_morris(_Linear([1.0, 2.0, 3.0]), unit_bounds(3), r=5, seed=9)
        self.assertEqual(a.to_json(), b.to_json())
        rows = mu_star_sigma_table(a)
        self.assertEqual(len(rows), 3)

    def test_saltelli_design(self):
        design = saltelli_sample(3, 4, seed=1)
        self.assertEqual(design.evaluations, 20)
        self.assertEqual(design.points().shape, (20, 3))
        self.assertTrue(np.all((design.points() >= 0) & (design.points() <= 1)))
        again = saltelli_sample(3, 4, seed=1)
        self.assertTrue(np.array_equal(design.points(), again.points()))
        self.assertEqual(saltelli_sample(14, 4).evaluations, 64)
        for i in range(3):
            np.testing.assert_array_equal(design.AB[i][:, i], design.B[:, i])

    def test_sobol_additive(self):
        a = np.array([1.0, 2.0, 3.0])
        report = sobol_indices(_Linear(a), saltelli_sample(3, 2 ** 14, seed=4))
        np.testing.assert_allclose(report.first_order[0], a ** 2 / np.sum(a ** 2), atol=0.02)
        np.testing.assert_allclose(report.total_order[0] - report.first_order[0], 0.0, atol=0.02)

    def test_sobol_single_factor(self):
        report = sobol_indices(lambda v: v["x1"], saltelli_sample(3, 2 ** 12, seed=4))
        self.assertAlmostEqual(report.first_order[0, 0], 1.0, delta=0.02)
        self.assertAlmostEqual(report.total_order[0, 0], 1.0, delta=0.02)
        np.testing.assert_allclose(report.first_order[0, 1:], 0.0, atol=0.02)
        np.testing.assert_allclose(report.total_order[0, 1:], 0.0, atol=0.02)

    def test_sobol_interaction(self):
        f = lambda v: (v["x1"] - 0.5) * (v["x2"] - 0.5)
        report = sobol_indices(f, saltelli_sample(2, 2 ** 12, seed=4))
        np.testing.assert_allclose(report.first_order[0], 0.0, atol=0.05)
        np.testing.assert_allclose(report.total_order[0], 1.0, atol=0.05)
        self.assertTrue(np.all(report.first_order[0] <= report.total_order[0] + 0.02))

    def test_sobol_zero_variance(self):
        with self.assertRaises(SensitivityError):
            sobol_indices(lambda v: 2.0, saltelli_sample(2, 8))

    def test_problem_definition(self):
        bounds = ParameterBounds({"a": (1.0, 3.0), "b": (-2.0, 0.0)})
        self.assertEqual(bounds.problem(), {"num_vars": 2, "names": ["a", "b"], "bounds": [[1.0, 3.0], [-2.0, 0.0]]})
        design = build_trajectories(2, 4, 6, bounds, seed=7)
        self.assertTrue(np.all((design.X[:, 0] >= 1.0) & (design.X[:, 0] <= 3.0)))
        np.testing.assert_allclose(bounds.scale(design.points()), design.X, atol=1e-12)

    def test_report_matches_effects(self):
        f = lambda v: np.sin(2 * v["x1"]) + v["x2"] * v["x3"]
        report = run_morris(f, unit_bounds(3), r=15, seed=4)
        design = build_trajectories(3, 4, 15, seed=4)
        y = np.array([f(dict(zip(design.bounds.names, x))) for x in design.physical_points()])
        stats = morris_stats(elementary_effects(design, y)[:, :, 0])
        for name in ("mu", "mu_star", "sigma"):
            np.testing.assert_allclose(getattr(report, name)[0], stats[name], rtol=1e-10, atol=1e-12)
        self.assertTrue(np.all(np.isfinite(report.mu_star_conf)))
        self.assertEqual(report.trajectories_used, 15)

    def test_failed_point_keeps_other_effects(self):
        calls = {"n": 0}

        def once(v):
            calls["n"] += 1
            return np.nan if calls["n"] == 2 else 2 * v["x1"] - v["x2"]

        report = run_morris(once, unit_bounds(2), r=12, seed=3)
        self.assertEqual(report.failures, 1)
        self.assertEqual(report.trajectories_used, 11)
        self.assertEqual(report.evaluations, 36)

        design = build_trajectories(2, 4, 12, seed=3)
        y = design.points() @ [2.0, -1.0]
        y[1] = np.nan
        ee = elementary_effects(design, y)[:, :, 0]
        # the failed point sits between the first two steps of trajectory 0
        self.assertTrue(np.all(np.isnan(ee[0])))
        self.assertEqual(int(np.sum(np.isfinite(ee))), 22)
        np.testing.assert_allclose(report.mu[0], [2.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(report.mu_star[0], morris_stats(ee)["mu_star"], atol=1e-12)
        self.assertTrue(np.all(np.isfinite(report.mu_star_conf)))

    def test_sobol_confidence(self):
        report = sobol_indices(_Linear([1.0, 2.0]), saltelli_sample(2, 2 ** 10, seed=2))
        for name in ("first_order_conf", "total_order_conf"):
            value = getattr(report, name)
            self.assertEqual(value.shape, (1, 2))
            self.assertTrue(np.all(np.isfinite(value) & (value >= 0)))
