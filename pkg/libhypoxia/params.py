"""
Parameter registry: the full physiological/drug/transport parameter set, the
sensitivity-analysis ranges, the injection protocol and the numerics knobs,
plus ingestion and validation of JSON config files.

All values are SI (mol/m^3, m, s, Pa) except the oxygen partial pressures
p_s50 and p_m50, which stay in mmHg and are converted through the alpha
solubilities where they are used.
"""
import json
import math
import logging as log
import unittest
import dataclasses
from dataclasses import dataclass, field
from functools import cache

import numpy as np

from libhypoxia import DATA_DIR
from libhypoxia.util import Serialize, dump_json


class ParameterError(Exception):

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class ParameterInfo:
    unit: str
    description: str
    section: str


PARAMETER_INFO = {
    # flow
    "L_p":           ParameterInfo("m/(Pa*s)", "vessel wall hydraulic conductivity", "flow"),
    "L_p_LF":        ParameterInfo("m/(Pa*s)", "lymphatic wall hydraulic permeability", "flow"),
    "S_over_V":      ParameterInfo("1/m", "exchange surface density", "flow"),
    "p_L":           ParameterInfo("Pa", "lymphatic pressure", "flow"),
    "sigma_oncotic": ParameterInfo("-", "oncotic reflection coefficient", "flow"),
    "pi_v":          ParameterInfo("Pa", "vascular oncotic pressure", "flow"),
    "pi_t":          ParameterInfo("Pa", "interstitial oncotic pressure", "flow"),
    "kappa":         ParameterInfo("m^2", "tissue permeability", "flow"),
    "mu_t":          ParameterInfo("Pa*s", "interstitial fluid viscosity", "flow"),
    "mu_v":          ParameterInfo("Pa*s", "blood viscosity", "flow"),
    "p_0":           ParameterInfo("Pa", "outlet pressure", "flow"),
    "delta_p":       ParameterInfo("Pa", "inlet-outlet pressure difference", "flow"),
    "H_in":          ParameterInfo("-", "inlet hematocrit", "flow"),
    # oxygen
    "D_v_ox":        ParameterInfo("m^2/s", "plasma oxygen diffusivity", "oxygen"),
    "D_t_ox":        ParameterInfo("m^2/s", "tissue oxygen diffusivity", "oxygen"),
    "P_ox":          ParameterInfo("m/s", "vessel wall permeability to oxygen", "oxygen"),
    "sigma_ox":      ParameterInfo("-", "oxygen reflection coefficient", "oxygen"),
    "k_1":           ParameterInfo("mol/m^3", "Huefner factor times MCHC", "oxygen"),
    "alpha_pl":      ParameterInfo("mol/(m^3*mmHg)", "plasma oxygen solubility", "oxygen"),
    "p_s50":         ParameterInfo("mmHg", "hemoglobin half-saturation pressure", "oxygen"),
    "gamma":         ParameterInfo("-", "Hill exponent", "oxygen"),
    "V_max_ox":      ParameterInfo("mol/(m^3*s)", "maximum oxygen consumption", "oxygen"),
    "p_m50":         ParameterInfo("mmHg", "half-consumption partial pressure", "oxygen"),
    "alpha_t_ox":    ParameterInfo("mol/(m^3*mmHg)", "tissue oxygen solubility", "oxygen"),
    "beta_ox":       ParameterInfo("m/s", "boundary conductivity for oxygen", "oxygen"),
    "c0_ox":         ParameterInfo("mol/m^3", "far-field tissue oxygen", "oxygen"),
    "c_v0_ox":       ParameterInfo("mol/m^3", "inflow vascular oxygen", "oxygen"),
    # tpz
    "c_v0_tpz":      ParameterInfo("mol/m^3", "plateau vascular TPZ concentration", "tpz"),
    "D_v_tpz":       ParameterInfo("m^2/s", "plasma TPZ diffusivity", "tpz"),
    "D_t_tpz":       ParameterInfo("m^2/s", "tissue TPZ diffusivity", "tpz"),
    "P_tpz":         ParameterInfo("m/s", "vessel wall permeability to TPZ", "tpz"),
    "k_met":         ParameterInfo("1/s", "first-order TPZ metabolic rate", "tpz"),
    "V_max_tpz":     ParameterInfo("mol/(m^3*s)", "Michaelis-Menten TPZ max rate", "tpz"),
    "K_m_tpz":       ParameterInfo("mol/m^3", "Michaelis constant of TPZ metabolism", "tpz"),
    "K":             ParameterInfo("mol/m^3", "oxygen half-inhibition concentration", "tpz"),
    "alpha_pd":      ParameterInfo("(mol/m^3)^-2", "cell-kill sensitivity constant", "tpz"),
    "phi_0":         ParameterInfo("-", "initial viable cell fraction", "tpz"),
    "beta_tpz":      ParameterInfo("m/s", "boundary conductivity for TPZ", "tpz"),
    "c0_tpz":        ParameterInfo("mol/m^3", "far-field tissue TPZ", "tpz"),
    # lumped
    "L_diff":        ParameterInfo("m", "perivascular diffusion distance", "lumped"),
}

SECTIONS = ("flow", "oxygen", "tpz", "lumped")

# pressures may take any sign, everything else is a nonnegative physical quantity
SIGNED = {"p_L", "p_0", "delta_p"}
STRICTLY_POSITIVE = {"mu_t", "mu_v", "alpha_pl", "alpha_t_ox", "L_diff", "p_s50", "p_m50"}
UNIT_INTERVAL = {"sigma_oncotic", "sigma_ox"}

# sensitivity-analysis names that do not coincide with a ParameterSet field
SA_ALIASES = {
    "D_tpz": "D_t_tpz",
    "D_ox": "D_t_ox",
}

REDUCED_SA_NAMES = ("c_v0_tpz", "k_met", "K", "alpha_pd", "c_v0_ox", "V_max_ox", "P_ox")


@cache
def _defaults():
    with open(DATA_DIR / "defaults.json") as fd:
        return json.load(fd)


@dataclass(frozen=True)
class ParameterSet(Serialize):
    # flow
    L_p: float
    L_p_LF: float
    S_over_V: float
    p_L: float
    sigma_oncotic: float
    pi_v: float
    pi_t: float
    kappa: float
    mu_t: float
    mu_v: float
    p_0: float
    delta_p: float
    H_in: float
    # oxygen
    D_v_ox: float
    D_t_ox: float
    P_ox: float
    sigma_ox: float
    k_1: float
    alpha_pl: float
    p_s50: float
    gamma: float
    V_max_ox: float
    p_m50: float
    alpha_t_ox: float
    beta_ox: float
    c0_ox: float
    c_v0_ox: float
    # tpz
    c_v0_tpz: float
    D_v_tpz: float
    D_t_tpz: float
    P_tpz: float
    k_met: float
    V_max_tpz: float
    K_m_tpz: float
    K: float
    alpha_pd: float
    phi_0: float
    beta_tpz: float
    c0_tpz: float
    # lumped
    L_diff: float = 2.5e-6

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ParameterError(name, f"expected a number, got {value!r}")
            if not math.isfinite(value):
                raise ParameterError(name, f"value must be finite, got {value!r}")
            if name in SIGNED:
                continue
            if value < 0:
                raise ParameterError(name, f"value must be nonnegative, got {value!r}")
            if name in STRICTLY_POSITIVE and value == 0:
                raise ParameterError(name, "value must be positive")
            if name in UNIT_INTERVAL and value > 1:
                raise ParameterError(name, f"value must lie in [0, 1], got {value!r}")

        if not 0 < self.phi_0 <= 1:
            raise ParameterError("phi_0", f"value must lie in (0, 1], got {self.phi_0!r}")
        if not 0 <= self.H_in < 1:
            raise ParameterError("H_in", f"value must lie in [0, 1), got {self.H_in!r}")
        if self.gamma < 1:
            raise ParameterError("gamma", f"Hill exponent must be >= 1, got {self.gamma!r}")

    @property
    def K_m_ox(self):
        return self.alpha_t_ox * self.p_m50

    def sa_value(self, name):
        """Value of a sensitivity-analysis parameter, addressed by its range name"""
        if name == "K_m_ox":
            return self.K_m_ox
        return getattr(self, SA_ALIASES.get(name, name))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def replace_sa(self, values):
        """Return a copy with sensitivity-analysis parameters applied.

        K_m_ox is realized through p_m50 at the current tissue solubility.
        """
        changes = {}
        for name, value in values.items():
            value = float(value)
            if name == "K_m_ox":
                changes["p_m50"] = value / self.alpha_t_ox
            elif name in SA_ALIASES:
                changes[SA_ALIASES[name]] = value
            elif name in self.__dataclass_fields__:
                changes[name] = value
            else:
                raise ParameterError(name, "unknown sensitivity parameter")
        return dataclasses.replace(self, **changes)

    def sections(self):
        res = {sect: {} for sect in SECTIONS}
        for name in self.__dataclass_fields__:
            res[PARAMETER_INFO[name].section][name] = float(getattr(self, name))
        return res


@dataclass(frozen=True)
class ParameterBounds:
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in self.ranges.items():
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ParameterError(name, "bounds must be finite")
            if not lo < hi:
                raise ParameterError(name, f"lower bound {lo!r} must be below upper bound {hi!r}")

    @property
    def names(self):
        return tuple(self.ranges)

    @property
    def k(self):
        return len(self.ranges)

    @property
    def lower(self):
        return np.array([lo for lo, _ in self.ranges.values()], dtype=float)

    @property
    def upper(self):
        return np.array([hi for _, hi in self.ranges.values()], dtype=float)

    def midpoints(self):
        return {name: 0.5 * (lo + hi) for name, (lo, hi) in self.ranges.items()}

    def scale(self, unit_points):
        """Affine map of unit-cube points onto the physical box"""
        unit_points = np.asarray(unit_points, dtype=float)
        lo, hi = self.lower, self.upper
        return lo + unit_points * (hi - lo)

    def unit(self, points):
        """Inverse of scale: physical points back onto the unit cube"""
        points = np.asarray(points, dtype=float)
        lo, hi = self.lower, self.upper
        return (points - lo) / (hi - lo)

    def problem(self):
        """Problem definition in the form SALib samplers and analyzers take"""
        return {
            "num_vars": self.k,
            "names": list(self.names),
            "bounds": [[lo, hi] for lo, hi in self.ranges.values()],
        }

    def subset(self, names):
        missing = [n for n in names if n not in self.ranges]
        if missing:
            raise ParameterError(missing[0], "not a bounded parameter")
        return ParameterBounds({n: self.ranges[n] for n in names})

    def to_dict(self):
        return {name: [lo, hi] for name, (lo, hi) in self.ranges.items()}


@dataclass(frozen=True)
class InjectionProtocol(Serialize):
    slope_a: float
    T_P: float
    T: float
    tau: float
    c_v0_tpz: float
    t_end: float

    def __post_init__(self):
        if not 0 < self.T_P <= self.T:
            raise ParameterError("T_P", f"need 0 < T_P <= T, got T_P={self.T_P!r}, T={self.T!r}")
        if not self.tau > 0:
            raise ParameterError("tau", f"clearance time constant must be positive, got {self.tau!r}")
        if not self.t_end >= self.T:
            raise ParameterError("t_end", f"horizon {self.t_end!r} ends before administration end {self.T!r}")
        if self.c_v0_tpz < 0:
            raise ParameterError("c_v0_tpz", "plateau concentration must be nonnegative")
        if not math.isclose(self.slope_a * self.T_P, self.c_v0_tpz, rel_tol=1e-12, abs_tol=1e-300):
            raise ParameterError("slope_a", "ramp must reach the plateau exactly at T_P")

    @classmethod
    def from_plateau(cls, c_v0_tpz, T_P, T, tau, t_end):
        return cls(slope_a=c_v0_tpz / T_P, T_P=T_P, T=T, tau=tau, c_v0_tpz=c_v0_tpz, t_end=t_end)

    def with_plateau(self, c_v0_tpz):
        return self.from_plateau(c_v0_tpz, self.T_P, self.T, self.tau, self.t_end)

    @property
    def decay_end(self):
        return self.T + 5.0 * self.tau

    def corners(self):
        """Times inside (0, t_end) where the vascular profile has a kink"""
        return tuple(sorted({t for t in (self.T_P, self.T, self.decay_end) if 0 < t < self.t_end}))

    def phase(self, t):
        if t <= self.T_P:
            return "ramp"
        if t <= self.T:
            return "plateau"
        if t <= self.decay_end:
            return "decay"
        return "washout"


@dataclass(frozen=True)
class Numerics(Serialize):
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_step: float = 600.0
    max_steps: int = 1_000_000
    sample_dt: float = 10.0
    cells: int = 10
    dt: float = 10.0
    picard_damping: float = 0.5
    picard_max_iter: int = 200
    picard_tol: float = 1e-8
    max_courant: float = 1.0
    metabolism: bool = True

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "max_step", "sample_dt", "dt", "picard_tol", "max_courant"):
            if not getattr(self, name) > 0:
                raise ParameterError(name, "value must be positive")
        for name in ("max_steps", "picard_max_iter"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(name, "value must be at least 1")
        if int(self.cells) < 4:
            raise ParameterError("cells", "need at least 4 cells per axis")
        if not 0 < self.picard_damping <= 1:
            raise ParameterError("picard_damping", "value must lie in (0, 1]")


def default_bounds():
    """The 14 sensitivity ranges shipped in the defaults file"""
    bounds = _defaults()["bounds"]
    return ParameterBounds({name: (float(b["min"]), float(b["max"])) for name, b in bounds.items()})


def reduced_bounds():
    return default_bounds().subset(REDUCED_SA_NAMES)


def bounds_info():
    return {name: ParameterInfo(b["unit"], b["description"], "bounds") for name, b in _defaults()["bounds"].items()}


def _baseline_values():
    values = {}
    for sect in SECTIONS:
        values.update({k: float(v) for k, v in _defaults()["baseline"].get(sect, {}).items()})
    return values


def baseline_parameters():
    """Documented defaults, with every bounded parameter at the middle of its range"""
    values = _baseline_values()
    mids = default_bounds().midpoints()
    km_ox = mids.pop("K_m_ox")
    for name, value in mids.items():
        values[SA_ALIASES.get(name, name)] = value
    values["p_m50"] = km_ox / values["alpha_t_ox"]
    return ParameterSet(**values)


def parse_config(config_source):
    """Parse config text (or an already-decoded mapping) into a section dict"""
    if config_source is None:
        return {}
    if isinstance(config_source, dict):
        data = config_source
    else:
        if isinstance(config_source, bytes):
            config_source = config_source.decode()
        if not config_source.strip():
            return {}
        try:
            data = json.loads(config_source)
        except json.JSONDecodeError as E:
            raise ParameterError(None, f"malformed config: {E}") from E

    if not isinstance(data, dict):
        raise ParameterError(None, "malformed config: top level must be an object")

    known = set(SECTIONS) | {"protocol", "numerics"}
    for sect, body in data.items():
        if sect not in known:
            raise ParameterError(sect, f"unknown config section (expected one of {', '.join(sorted(known))})")
        if not isinstance(body, dict):
            raise ParameterError(sect, "config section must be an object")
    return data


def _number(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParameterError(key, f"expected a number, got {value!r}")
    return float(value)


def _integer(key, value):
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParameterError(key, f"expected an integer, got {value!r}")
    return value


def _flag(key, value):
    if not isinstance(value, bool):
        raise ParameterError(key, f"expected true or false, got {value!r}")
    return value


def load_parameters(config_source=None):
    """Build a validated ParameterSet from config text.

    Unspecified keys keep their defaults. Oxygen-type concentrations may be
    given in mmHg with a `_mmHg` suffix; they are converted through the
    solubility named in the defaults file.
    """
    data = parse_config(config_source)
    values = dataclasses.asdict(baseline_parameters())
    mmhg = _defaults()["mmhg"]
    pending = {}

    for sect in SECTIONS:
        for key, value in data.get(sect, {}).items():
            name = key[:-len("_mmHg")] if key.endswith("_mmHg") else key
            if name not in PARAMETER_INFO or PARAMETER_INFO[name].section != sect:
                raise ParameterError(key, f"unknown key in section [{sect}]")
            if key != name:
                if name not in mmhg:
                    raise ParameterError(key, "no mmHg conversion defined for this key")
                if name in data[sect]:
                    raise ParameterError(key, f"given both as {name} and {key}")
                pending[name] = _number(key, value)
            else:
                values[name] = _number(key, value)

    for name, pressure in pending.items():
        values[name] = pressure * values[mmhg[name]]
        log.debug(f"Converted {name} from {pressure} mmHg to {values[name]} mol/m^3")

    params = ParameterSet(**values)
    load_protocol(data, params)
    load_numerics(data)
    return params


def default_protocol(params):
    proto = _defaults()["protocol"]
    return InjectionProtocol.from_plateau(
        params.c_v0_tpz,
        T_P=float(proto["T_P"]),
        T=float(proto["T"]),
        tau=float(proto["tau"]),
        t_end=float(proto["t_end"]),
    )


def load_protocol(config_source, params):
    data = parse_config(config_source)
    base = default_protocol(params)
    times = {k: getattr(base, k) for k in ("T_P", "T", "tau", "t_end")}
    for key, value in data.get("protocol", {}).items():
        if key not in times:
            raise ParameterError(key, "unknown key in section [protocol]")
        times[key] = _number(key, value)
    return InjectionProtocol.from_plateau(params.c_v0_tpz, **times)


def load_numerics(config_source=None):
    data = parse_config(config_source)
    values = dict(_defaults()["numerics"])
    for key, value in data.get("numerics", {}).items():
        if key not in Numerics.__dataclass_fields__:
            raise ParameterError(key, "unknown key in section [numerics]")
        kind = Numerics.__dataclass_fields__[key].type
        convert = _flag if kind in (bool, "bool") else _integer if kind in (int, "int") else _number
        values[key] = convert(key, value)
    return Numerics(**values)


def dump_parameters(params, protocol=None, numerics=None):
    """Canonical sectioned JSON text for a parameter set"""
    data = params.sections()
    if protocol is not None:
        data["protocol"] = {k: getattr(protocol, k) for k in ("T_P", "T", "tau", "t_end")}
    if numerics is not None:
        data["numerics"] = numerics.to_dict()
    return dump_json(data)


class TestParams(unittest.TestCase):

    def test_empty_config_is_baseline(self):
        params = load_parameters("")
        self.assertEqual(params, baseline_parameters())
        self.assertEqual(params.k_met, 0.5 * (5.00e-3 + 3.33e-2))
        self.assertEqual(params.c_v0_tpz, 0.5 * (1.78e-2 + 4.73e-2))
        self.assertAlmostEqual(params.K_m_ox, 0.5 * (6.50e-4 + 1.30e-3), places=15)
        self.assertEqual(params.L_diff, 2.5e-6)

    def test_negative_rate_names_key(self):
        with self.assertRaises(ParameterError) as ctx:
            load_parameters('{"tpz": {"k_met": -1}}')
        self.assertEqual(ctx.exception.key, "k_met")
        self.assertIn("k_met", str(ctx.exception))

    def test_override(self):
        params = load_parameters('{"tpz": {"c_v0_tpz": 4.73e-2}}')
        self.assertEqual(params.c_v0_tpz, 4.73e-2)

    def test_malformed(self):
        with self.assertRaises(ParameterError):
            load_parameters("{tpz: ")
        with self.assertRaises(ParameterError):
            load_parameters('{"tpz": {"no_such_key": 1}}')
        with self.assertRaises(ParameterError):
            load_parameters('{"oxygen": {"k_met": 1}}')
        with self.assertRaises(ParameterError):
            load_parameters('{"plumbing": {}}')
        with self.assertRaises(ParameterError):
            load_parameters('{"flow": {"H_in": 1.0}}')
        with self.assertRaises(ParameterError):
            load_parameters('{"tpz": {"phi_0": 0}}')

    def test_mmhg_conversion(self):
        params = load_parameters('{"oxygen": {"c_v0_ox_mmHg": 40, "alpha_pl": 1.0e-3}}')
        self.assertAlmostEqual(params.c_v0_ox, 4.0e-2, places=15)
        with self.assertRaises(ParameterError):
            load_parameters('{"oxygen": {"c_v0_ox_mmHg": 40, "c_v0_ox": 0.04}}')

    def test_round_trip(self):
        params = load_parameters('{"tpz": {"k_met": 0.0123456789012345}, "flow": {"p_L": -12.5}}')
        again = load_parameters(dump_parameters(params))
        self.assertEqual(params, again)

    def test_bounds_golden(self):
        with open(DATA_DIR / "bounds-golden.json") as fd:
            golden = json.load(fd)
        bounds = default_bounds()
        self.assertEqual(bounds.names, tuple(golden))
        for name, (lo, hi) in golden.items():
            self.assertEqual(bounds.ranges[name], (lo, hi))
        self.assertEqual(bounds.k, 14)
        self.assertEqual(bounds.ranges["c_v0_tpz"], (1.78e-2, 4.73e-2))
        self.assertEqual(bounds.ranges["K"], (2.60e-3, 1.30e-2))
        self.assertEqual(bounds.ranges["D_ox"], (1.81e-9, 3.01e-9))

    def test_bounds_invalid(self):
        with self.assertRaises(ParameterError):
            ParameterBounds({"x": (1.0, 1.0)})

    def test_protocol(self):
        proto = default_protocol(baseline_parameters())
        self.assertEqual((proto.T_P, proto.T, proto.tau, proto.t_end), (3600.0, 7200.0, 3220.0, 21600.0))
        proto = default_protocol(baseline_parameters().replace(c_v0_tpz=3.6e-2))
        self.assertAlmostEqual(proto.slope_a, 1.0e-5, places=18)
        with self.assertRaises(ParameterError):
            InjectionProtocol.from_plateau(3e-2, T_P=8000.0, T=7200.0, tau=3220.0, t_end=21600.0)
        proto = load_protocol('{"protocol": {"t_end": 30000}}', baseline_parameters())
        self.assertEqual(proto.t_end, 30000.0)

    def test_replace_sa(self):
        base = baseline_parameters()
        params = base.replace_sa({"D_tpz": 1e-10, "K_m_ox": 1.3e-3, "k_met": 0.02})
        self.assertEqual(params.D_t_tpz, 1e-10)
        self.assertAlmostEqual(params.sa_value("K_m_ox"), 1.3e-3, places=15)
        self.assertEqual(params.sa_value("D_tpz"), 1e-10)
        self.assertEqual(params.k_met, 0.02)
        with self.assertRaises(ParameterError):
            base.replace_sa({"bogus": 1.0})

    def test_numerics(self):
        num = load_numerics('{"numerics": {"cells": 6, "dt": 5}}')
        self.assertEqual(num.cells, 6)
        self.assertEqual(num.dt, 5.0)
        with self.assertRaises(ParameterError):
            load_numerics('{"numerics": {"cells": 2}}')

    def test_numerics_types(self):
        self.assertFalse(load_numerics('{"numerics": {"metabolism": false}}').metabolism)
        self.assertEqual(load_numerics('{"numerics": {"max_steps": 5e4}}').max_steps, 50000)
        for body, key in (
            ('{"cells": "six"}', "cells"),
            ('{"cells": 6.5}', "cells"),
            ('{"picard_max_iter": true}', "picard_max_iter"),
            ('{"metabolism": "false"}', "metabolism"),
            ('{"metabolism": 0}', "metabolism"),
            ('{"dt": "10"}', "dt"),
        ):
            with self.assertRaises(ParameterError) as ctx:
                load_numerics(f'{{"numerics": {body}}}')
            self.assertEqual(ctx.exception.key, key, msg=body)
