#!/usr/bin/env python3

import json
import click
import logging as log
from rich import print  # you need python3

import cli.config
import cli.logfmt
import cli.run
import cli.util
import cli.checkver  # check python version

from libhypoxia.params import PARAMETER_INFO, ParameterError, bounds_info
from libhypoxia.tissue3d1d import DiffusivityCoefficients, predict_diffusivity


class Environment:
    def __init__(self):
        pass

    def load_config(self):
        """Parameters, protocol and numerics from the resolved config file"""
        with cli.run.fatal_errors("config"):
            return cli.config.RunConfig(self.config_path)


pass_env = click.make_pass_decorator(Environment)


@click.group(context_settings=dict(help_option_names=["-h", "--help"]))
@click.option("--config", "-c", "config_path", metavar="<config.json>", envvar="TPZCTL_CONFIG",
              type=click.Path(exists=True, dir_okay=False), help="Parameter config file")
@click.option("--verbose", "-v", count=True, help="Increase verbosity")
@click.option("--quiet", "-q", count=True, help="Decrease verbosity")
@click.pass_context
def main(ctx, config_path, verbose, quiet):
    ctx.ensure_object(Environment)
    env = ctx.obj
    levels = {
        -3: log.CRITICAL,
        -2: log.ERROR,
        -1: log.WARNING,
        0: log.INFO,
        1: log.DEBUG,
    }
    env.level = max(-3, min(verbose - quiet, 1))
    env.progress = env.level >= 0
    cli.logfmt.setup_logging(levels[env.level])

    env.configmgr = cli.config.configmgr()
    env.config_path = env.configmgr.resolve(config_path)
    if env.config_path:
        log.debug(f"Using config [{env.config_path}]")
    else:
        log.debug("No config file, using built-in defaults")


def out_option(default):
    return click.option("--out", "-o", "out_dir", default=default, show_default=True, metavar="<dir>",
                        type=click.Path(file_okay=False), help="Output directory")


def seed_option():
    return click.option("--seed", "-s", default=0, show_default=True, type=int, help="Random seed of the design")


def workers_option():
    return click.option("--workers", "-j", default=1, show_default=True, type=click.IntRange(min=1),
                        help="Parallel model evaluations")


@main.command("run0d")
@out_option("out/run0d")
@pass_env
def run0d(env, out_dir):
    """
    Run the lumped model over the injection protocol.

    Writes timeseries.csv and summary.json (SF and tissue TPZ at 7200, 10800
    and 21600 s plus their time averages).
    """
    cfg = env.load_config()
    with cli.run.fatal_errors("run0d"):
        cli.run.cmd_run0d(cfg, out_dir)


@main.command("fit-surrogates")
@click.option("--timeseries", "-t", metavar="<timeseries.csv>", type=click.Path(exists=True, dir_okay=False),
              help="Lumped time series to fit (default: run the lumped model)")
@out_option("out/surrogates")
@pass_env
def fit_surrogates(env, timeseries, out_dir):
    """
    Fit the sigmoid SF(t) and rational r(t) surrogates.
    """
    cfg = env.load_config()
    with cli.run.fatal_errors("fit-surrogates"):
        cli.run.cmd_fit_surrogates(cfg, out_dir, timeseries)


@main.command("morris")
@click.option("--backend", "-b", type=click.Choice(["0d", "3d"]), default="0d", show_default=True,
              help="Model evaluated at each design point")
@click.option("--trajectories", "-r", default=70, show_default=True, type=click.IntRange(min=2),
              help="Number of Morris trajectories")
@click.option("--levels", "-p", default=4, show_default=True, type=click.IntRange(min=2),
              help="Grid levels per factor (even)")
@click.option("--network", "-n", metavar="<network.json>", type=click.Path(exists=True, dir_okay=False),
              help="Vessel network for the 3d backend")
@click.option("--dt", type=click.FloatRange(min=0, min_open=True), help="Time step of the 3d backend [s]")
@click.option("--linear-test", is_flag=True, help="Screen the additive test model instead")
@seed_option()
@workers_option()
@out_option("out/morris")
@pass_env
def morris(env, backend, trajectories, levels, network, dt, linear_test, seed, workers, out_dir):
    """
    Morris elementary-effects screening.

    The 0d backend covers all 14 ranged parameters; the 3d backend covers
    the reduced 7-parameter set.
    """
    cfg = env.load_config()
    with cli.run.fatal_errors("morris"):
        cli.run.cmd_morris(cfg, out_dir, backend, trajectories, levels, seed, workers, network, dt,
                           linear_test, env.progress)


@main.command("sobol")
@click.option("--samples", "-N", default="1024", show_default=True, type=cli.util.SampleCountType(),
              help="Base sample count (power of two, e.g. 2^14)")
@click.option("--linear-test", is_flag=True, help="Analyze the additive test model instead")
@seed_option()
@workers_option()
@out_option("out/sobol")
@pass_env
def sobol(env, samples, linear_test, seed, workers, out_dir):
    """
    First-order and total-effect Sobol indices of the lumped model.
    """
    cfg = env.load_config()
    with cli.run.fatal_errors("sobol"):
        cli.run.cmd_sobol(cfg, out_dir, samples, seed, workers, linear_test, env.progress)


@main.command("run3d")
@click.option("--network", "-n", metavar="<network.json>", type=click.Path(exists=True, dir_okay=False),
              help="Vessel network (default: the shipped network)")
@click.option("--dt", type=click.FloatRange(min=0, min_open=True), help="Time step [s] (default: numerics.dt)")
@out_option("out/run3d")
@pass_env
def run3d(env, network, dt, out_dir):
    """
    Run flow, hematocrit, oxygen and surrogate-driven TPZ on the tissue grid.

    Writes field snapshots at 7200, 10800 and 21600 s (VTK and CSV), the
    vascular profile per segment and the QoI series.
    """
    cfg = env.load_config()
    with cli.run.fatal_errors("run3d"):
        cli.run.cmd_run3d(cfg, out_dir, network, dt)


@main.command("predict-diffusivity")
@click.option("--mw", type=float, required=True, help="Molecular weight [g/mol]")
@click.option("--logp", type=float, required=True, help="Octanol/water partition at pH 7.4")
@click.option("--hd", type=int, required=True, help="Hydrogen bond donors")
@click.option("--ha", type=int, required=True, help="Hydrogen bond acceptors")
@click.option("--coeffs", metavar="<coeffs.json>", type=click.File("r"),
              help="Fitted coefficient set {a, b, c, w, x, y, z, unit}")
def diffusivity(mw, logp, hd, ha, coeffs):
    """
    Estimate a tissue diffusivity from molecular descriptors.
    """
    with cli.run.fatal_errors("predict-diffusivity"):
        cs = None
        if coeffs:
            try:
                cs = DiffusivityCoefficients.from_dict(json.load(coeffs))
            except (TypeError, json.JSONDecodeError) as E:
                raise ParameterError("coeffs", f"invalid coefficient set: {E}") from E
        value = predict_diffusivity(mw, logp, hd, ha, cs)
        print(f"{value:.6e} {cs.unit}")


@main.group("config", help="View and create the parameter config")
def config():
    pass


@config.command("show")
@click.option("--json", "as_json", is_flag=True, help="Print the resolved config as a fully populated config file")
@pass_env
def config_show(env, as_json):
    """Show the resolved parameter set"""

    cfg = env.load_config()
    if as_json:
        click.echo(cfg.dump())
        return

    log.info(f"Config: {env.config_path or 'built-in defaults'}")
    for sect, values in cfg.params.sections().items():
        print(f"  [bold]\\[{sect}][/bold]")
        for key, value in values.items():
            info = PARAMETER_INFO[key]
            print(f"    {key:16} {value:<12.6g} {info.unit:16} {info.description}")
    proto = cfg.protocol
    print("  [bold]\\[protocol][/bold]")
    for key in ("T_P", "T", "tau", "t_end"):
        print(f"    {key:16} {getattr(proto, key):<12.6g} s")

    log.info("Sensitivity ranges:")
    for name, info in bounds_info().items():
        print(f"    {name:10} {info.unit:16} {info.description}")


@config.command("init")
@click.option("--force", "-f", is_flag=True, help="Overwrite an existing config")
@pass_env
def config_init(env, force):
    """Write the fully populated defaults to the user config file"""
    with cli.run.fatal_errors("config init"):
        try:
            path = env.configmgr.init(force)
        except FileExistsError as E:
            log.critical(str(E))
    log.info(f"Wrote {path}")


if __name__ == "__main__":
    main()
