"""
Implementations of the tpzctl subcommands. Every command writes its
artifacts into one output directory, logs to run.log there and finishes by
writing manifest.json with the content hash of each artifact.
"""
import contextlib
import json
import logging as log
import tempfile
import time
import unittest
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from rich import print

import cli.logfmt
import cli.util
from cli.model import Artifact, RunManifest

from libhypoxia.experiments import QOI_LABELS, LinearModel, TissueModel, ZeroDModel, run_tissue
from libhypoxia.grid import write_field_csv, write_vtk
from libhypoxia.network import NetworkError, VesselNetwork, default_network
from libhypoxia.odeint import IntegratorError
from libhypoxia.params import ParameterError, default_bounds, reduced_bounds
from libhypoxia.pkpd0d import SimulationError, TimeSeries0D, simulate_0d
from libhypoxia.sensitivity import SensitivityError, run_morris, saltelli_sample, sobol_indices, unit_bounds
from libhypoxia.surrogate import (
    FitError, BASELINE_RATIONAL, BASELINE_SIGMOID, eval_rational, eval_sigmoid, fit_surrogates, rational_window,
    write_residuals,
)
from libhypoxia.tissue3d1d import SEGMENT_COLUMNS, SERIES_COLUMNS, SolverError
from libhypoxia.util import dump_json, write_csv

LIBRARY_ERRORS = (
    ParameterError, IntegratorError, SimulationError, FitError, SensitivityError, NetworkError, SolverError,
    OSError, ValueError,
)


@contextlib.contextmanager
def fatal_errors(command):
    try:
        yield
    except LIBRARY_ERRORS as E:
        log.critical(f"{command} failed: {E}")
        raise SystemExit(127) from E


class Run:
    """Output directory bookkeeping for one command"""

    def __init__(self, command, out_dir, cfg=None, seed=None):
        self.command = command
        self.out = Path(out_dir)
        self.cfg = cfg
        self.seed = seed
        self.paths = []
        self.diagnostics = {}
        self.manifest = None
        self._logging = None

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self._start = time.monotonic()
        self._started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._logging = cli.logfmt.file_logging(self.out / "run.log")
        self._logging.__enter__()
        log.info(f"{self.command}: writing to {self.out}")
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.manifest = self._finish()
        finally:
            self._logging.__exit__(exc_type, exc, tb)
        return False

    def path(self, name):
        path = self.out / name
        self.paths.append(path)
        return path

    def add(self, paths):
        self.paths.extend(paths)

    def _finish(self):
        manifest = RunManifest(
            command=self.command,
            config=str(self.cfg.path) if self.cfg is not None and self.cfg.path else None,
            seed=self.seed,
            out_dir=str(self.out),
            started=self._started,
            wall_clock=time.monotonic() - self._start,
            artifacts=[Artifact.of(p, self.out) for p in self.paths],
            diagnostics=self.diagnostics,
        )
        (self.out / "manifest.json").write_text(manifest.to_json())
        total = sum(a.size for a in manifest.artifacts)
        log.info(f"{len(manifest.artifacts)} artifacts ({cli.util.pretty_size(total)}) "
                 f"in {cli.util.pretty_duration(manifest.wall_clock)}")
        return manifest


def print_summary(summary):
    for key, value in summary.items():
        print(f"    [bold]{key:16}[/bold] {value:.6e}")


def cmd_run0d(cfg, out_dir):
    with Run("run0d", out_dir, cfg) as run:
        series = simulate_0d(cfg.params, cfg.protocol, cfg.numerics)
        series.to_csv(run.path("timeseries.csv"))
        summary = series.summary()
        run.path("summary.json").write_text(dump_json(summary))
        run.diagnostics["samples"] = int(series.times.size)
        log.info("Summary:")
        print_summary(summary)
    return run.manifest


def cmd_fit_surrogates(cfg, out_dir, timeseries=None):
    with Run("fit-surrogates", out_dir, cfg) as run:
        if timeseries:
            log.info(f"Reading time series from {timeseries}")
            series = TimeSeries0D.from_csv(timeseries)
        else:
            series = simulate_0d(cfg.params, cfg.protocol, cfg.numerics)
            series.to_csv(run.path("timeseries.csv"))

        fits = fit_surrogates(series)
        blocks = {"sigmoid": fits.sigmoid.block(), "rational": fits.rational.block()}
        run.path("surrogates.json").write_text(dump_json(blocks))
        write_residuals(run.path("sigmoid-residuals.csv"), series.times, series.sf,
                        eval_sigmoid(fits.sigmoid, series.times))
        t, r = rational_window(series)
        write_residuals(run.path("rational-residuals.csv"), t, r, eval_rational(fits.rational, t))
        run.diagnostics.update({
            "sigmoid_r_squared": fits.sigmoid.r_squared,
            "rational_r_squared": fits.rational.r_squared,
        })
        for name, block in blocks.items():
            params = ", ".join(f"{k}={v:.6g}" for k, v in block["params"].items())
            log.info(f"{name}: {params} (R^2={block['r_squared']:.6f})")
    return run.manifest


def _sweep_setup(cfg, backend, linear_test, network=None, dt=None):
    """(model, bounds, base, qoi labels) for a sensitivity sweep"""
    if linear_test:
        k = default_bounds().k
        return LinearModel.for_bounds(k), unit_bounds(k), None, ("y",)
    if backend == "0d":
        return ZeroDModel(cfg.protocol, cfg.numerics), default_bounds(), cfg.params, QOI_LABELS
    network = VesselNetwork.load(network) if network else default_network()
    return TissueModel(network, cfg.protocol, cfg.numerics, dt), reduced_bounds(), cfg.params, QOI_LABELS


def cmd_morris(cfg, out_dir, backend="0d", r=70, p=4, seed=0, workers=1, network=None, dt=None,
               linear_test=False, progress=True):
    with Run("morris", out_dir, cfg, seed) as run:
        model, bounds, base, labels = _sweep_setup(cfg, backend, linear_test, network, dt)
        report = run_morris(model, bounds, r, p, seed, labels, base, workers, progress)
        run.add(report.write(run.out))
        run.diagnostics.update({
            "backend": "linear" if linear_test else backend,
            "evaluations": report.evaluations,
            "failures": report.failures,
        })
        for label in report.qoi_labels:
            log.info(f"{label}: {' > '.join(report.ranking(label)[:5])}")
    return run.manifest


def cmd_sobol(cfg, out_dir, n=1024, seed=0, workers=1, linear_test=False, progress=True):
    with Run("sobol", out_dir, cfg, seed) as run:
        model, bounds, base, labels = _sweep_setup(cfg, "0d", linear_test)
        design = saltelli_sample(bounds.k, n, bounds, seed)
        report = sobol_indices(model, design, base, labels, workers, progress)
        run.add(report.write(run.out))
        run.diagnostics.update({"evaluations": report.evaluations, "failures": report.failures})
        if linear_test:
            run.diagnostics["analytic_first_order"] = model.first_order(bounds)
        for q, label in enumerate(report.qoi_labels):
            top = np.argsort(-report.total_order[q], kind="stable")[:5]
            log.info(f"{label}: " + ", ".join(f"{report.names[i]} S_T={report.total_order[q, i]:.3f}" for i in top))
    return run.manifest


def cmd_run3d(cfg, out_dir, network=None, dt=None):
    with Run("run3d", out_dir, cfg) as run:
        net = VesselNetwork.load(network) if network else default_network()
        res = run_tissue(cfg.params, cfg.protocol, net, cfg.numerics, dt=dt)
        fields, tpz = res.fields, res.tpz

        run.path("surrogates.json").write_text(dump_json({
            "sigmoid": res.fits.sigmoid.block(),
            "rational": res.fits.rational.block(),
        }))
        write_csv(run.path("qoi-series.csv"), SERIES_COLUMNS, tpz.rows())
        write_csv(run.path("segments.csv"), SEGMENT_COLUMNS, fields.segment_rows())
        for t in sorted(tpz.snapshots):
            c_t, _ = tpz.snapshots[t]
            write_vtk(run.path(f"fields-{t:.0f}.vtk"), res.grid,
                      {**fields.tissue_fields(), "c_t_tpz": c_t})
            write_field_csv(run.path(f"c_t_tpz-{t:.0f}.csv"), res.grid, c_t)

        summary = tpz.summary()
        run.path("summary.json").write_text(dump_json(summary))
        run.diagnostics.update(fields.diagnostics)
        run.diagnostics.update({
            "cells": list(res.grid.cells),
            "mass_drift": tpz.mass_drift,
            "min_concentration": tpz.min_concentration,
        })
        log.info("Summary:")
        print_summary(summary)
    return run.manifest


class TestRun(unittest.TestCase):

    def setUp(self):
        from click.testing import CliRunner
        import tpzctl
        self.main = tpzctl.main
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def invoke(self, *args, config=None):
        if config is not None:
            path = self.dir / "config.json"
            path.write_text(json.dumps(config))
            args = ("--config", str(path)) + args
        return self.runner.invoke(self.main, ["-q", *args], env={"TPZCTL_CONFIG": None})

    def manifest(self, out):
        return RunManifest.from_json((Path(out) / "manifest.json").read_text())

    def test_run0d(self):
        out = self.dir / "run0d"
        res = self.invoke("run0d", "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        summary = json.loads((out / "summary.json").read_text())
        self.assertTrue(0 < summary["sf_7200"] < 1)
        manifest = self.manifest(out)
        self.assertEqual(manifest.verify(), [])
        self.assertEqual({a.path for a in manifest.artifacts}, {"timeseries.csv", "summary.json"})
        self.assertTrue((out / "run.log").exists())

    def test_run0d_frozen_survival(self):
        out = self.dir / "frozen"
        res = self.invoke("run0d", "--out", str(out), config={"tpz": {"alpha_pd": 0.0}})
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertEqual(json.loads((out / "summary.json").read_text())["sf_21600"], 1.0)

    def test_missing_config(self):
        res = self.invoke("--config", str(self.dir / "nope.json"), "run0d", "--out", str(self.dir / "x"))
        self.assertEqual(res.exit_code, 2)

    def test_bad_config_key(self):
        res = self.invoke("run0d", "--out", str(self.dir / "x"), config={"tpz": {"k_mett": 1.0}})
        self.assertEqual(res.exit_code, 127)
        self.assertIn("k_mett", res.output)

    def write_series(self, path, t):
        X, Y, Z, D = BASELINE_SIGMOID
        A, B, C = BASELINE_RATIONAL
        cols = {name: np.zeros_like(t) for name in ("c_v_tpz", "c_t_ox", "m_tpz")}
        cols["c_t_tpz"] = np.full_like(t, 0.01)
        cols["sf"] = X - Y / (1.0 + np.exp(-Z * (t - D)))
        cols["r_eff"] = A / (t + B) + C
        rows = zip(t, cols["c_v_tpz"], cols["c_t_tpz"], cols["c_t_ox"], cols["sf"], cols["m_tpz"], cols["r_eff"])
        write_csv(path, ("t", "c_v_tpz", "c_t_tpz", "c_t_ox", "sf", "m_tpz", "r_eff"), rows)

    def test_fit_surrogates_synthetic(self):
        src = self.dir / "series.csv"
        self.write_series(src, np.linspace(0.0, 21600.0, 433))
        out = self.dir / "fits"
        res = self.invoke("fit-surrogates", "--timeseries", str(src), "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        blocks = json.loads((out / "surrogates.json").read_text())
        got = blocks["sigmoid"]["params"]
        for name, expect in zip("XYZD", BASELINE_SIGMOID):
            self.assertLess(abs(got[name] - expect) / expect, 1e-4, msg=name)
        got = blocks["rational"]["params"]
        for name, expect in zip("ABC", BASELINE_RATIONAL):
            self.assertLess(abs(got[name] - expect) / expect, 1e-4, msg=name)

    def test_fit_surrogates_baseline(self):
        out = self.dir / "fits"
        res = self.invoke("fit-surrogates", "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        blocks = json.loads((out / "surrogates.json").read_text())
        self.assertGreaterEqual(blocks["sigmoid"]["r_squared"], 0.999)

    def test_fit_surrogates_insufficient(self):
        src = self.dir / "series.csv"
        self.write_series(src, np.array([0.0, 10.0]))
        res = self.invoke("fit-surrogates", "--timeseries", str(src), "--out", str(self.dir / "fits"))
        self.assertNotEqual(res.exit_code, 0)

    def test_morris_reproducible(self):
        outs = [self.dir / "a", self.dir / "b"]
        for out in outs:
            res = self.invoke("morris", "--linear-test", "--trajectories", "5", "--seed", "7", "--out", str(out))
            self.assertEqual(res.exit_code, 0, res.output)
        a, b = (self.manifest(out) for out in outs)
        self.assertEqual(a.artifacts, b.artifacts)
        self.assertEqual(a.diagnostics["evaluations"], 5 * 15)
        self.assertEqual((outs[0] / "morris.json").read_bytes(), (outs[1] / "morris.json").read_bytes())

    def test_morris_0d(self):
        out = self.dir / "m0"
        res = self.invoke("morris", "--backend", "0d", "--trajectories", "2", "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        report = json.loads((out / "morris.json").read_text())
        self.assertEqual(report["evaluations"], 30)
        self.assertEqual(tuple(report["qoi_labels"]), QOI_LABELS)

    def test_morris_3d(self):
        out = self.dir / "m3"
        res = self.invoke("morris", "--backend", "3d", "--trajectories", "2", "--dt", "240", "--out", str(out),
                          config={"numerics": {"cells": 4}})
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertEqual(json.loads((out / "morris.json").read_text())["evaluations"], 16)

    def test_sobol_counts(self):
        out = self.dir / "s"
        res = self.invoke("sobol", "--linear-test", "--samples", "4", "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertEqual(self.manifest(out).diagnostics["evaluations"], 64)

    def test_sobol_linear(self):
        out = self.dir / "s"
        res = self.invoke("sobol", "--linear-test", "--samples", "2^14", "--out", str(out))
        self.assertEqual(res.exit_code, 0, res.output)
        report = json.loads((out / "sobol.json").read_text())
        expect = self.manifest(out).diagnostics["analytic_first_order"]
        np.testing.assert_allclose(report["first_order"][0], expect, atol=0.02)

    def test_run3d(self):
        out = self.dir / "r3"
        res = self.invoke("run3d", "--dt", "120", "--out", str(out), config={"numerics": {"cells": 6}})
        self.assertEqual(res.exit_code, 0, res.output)
        manifest = self.manifest(out)
        self.assertLess(manifest.diagnostics["mass_balance_residual"], 1e-8)
        self.assertEqual(manifest.verify(), [])
        self.assertTrue((out / "fields-7200.vtk").exists())

    def test_run3d_conservation(self):
        out = self.dir / "r3"
        config = {"tpz": {"P_tpz": 0.0, "beta_tpz": 0.0}, "numerics": {"cells": 4, "metabolism": False}}
        res = self.invoke("run3d", "--dt", "10", "--out", str(out), config=config)
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertLess(self.manifest(out).diagnostics["mass_drift"], 1e-10)

    def test_run3d_outside_box(self):
        data = default_network().to_dict()
        data["nodes"][-1]["x"] = 600e-6
        path = self.dir / "net.json"
        path.write_text(dump_json(data))
        res = self.invoke("run3d", "--network", str(path), "--out", str(self.dir / "r3"))
        self.assertNotEqual(res.exit_code, 0)
        self.assertIn(f"segment {data['segments'][-1]['id']}", res.output)

    def test_predict_diffusivity(self):
        path = self.dir / "coeffs.json"
        path.write_text(json.dumps({"a": -4.0, "b": -0.5, "c": 0.0, "w": 1.0, "x": 0.0, "y": 0.0, "z": 0.0}))
        res = self.invoke("predict-diffusivity", "--mw", "100", "--logp", "0.3", "--hd", "1", "--ha", "4",
                          "--coeffs", str(path))
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertIn("1.000000e-05", res.output)
        res = self.invoke("predict-diffusivity", "--mw", "100", "--logp", "0.3", "--hd", "1", "--ha", "4")
        self.assertEqual(res.exit_code, 127)

    def test_config_show(self):
        res = self.invoke("config", "show", config={"tpz": {"k_met": 0.01}})
        self.assertEqual(res.exit_code, 0, res.output)
        self.assertIn("k_met", res.output)

    def test_config_show_json(self):
        res = self.invoke("config", "show", "--json", config={"tpz": {"k_met": 0.01}})
        self.assertEqual(res.exit_code, 0, res.output)
        data = json.loads(res.output)
        self.assertEqual(data["tpz"]["k_met"], 0.01)
        self.assertIn("numerics", data)
