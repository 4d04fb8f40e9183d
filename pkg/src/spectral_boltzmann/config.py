"""Experiment configuration: YAML schema, validation and hashing.

Every violation is collected (not only the first) and anchored to the line
of the offending key.  Unknown keys are rejected with a nearest-match hint.

Schema (all blocks optional, defaults shown by `default_config()`):

    kernel:   gamma, s, theta_min, b0
    grid:     V, N, sphere_order
    kgrid:    mode (radial | lattice), K_max, n_radial, radii, n_side, dk
    schedule: p, eps, ell, q, j, r, r1, r2, soft
    run:      kind (envelope | linear | nonlinear), integrator (cn | rk4),
              dt, T_end, stride, windows, initial {family, amplitude, profiles, seed}
    checks:   trilinear_samples, interpolation_samples, positivity_samples
    outputs:  directory, formats
"""

from __future__ import annotations

import copy
import difflib
import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml

from .collision import KernelSpec
from .norms import InterpolationSchedule
from .velocity import VelocityGrid, WeightSpec

INF = math.inf

SCHEMA: dict = {
    "kernel": {"gamma": 1.0, "s": 0.5, "theta_min": 0.2, "b0": 1.0},
    "grid": {"V": 6.0, "N": 12, "sphere_order": 6},
    "kgrid": {"mode": "radial", "K_max": 3.0, "n_radial": 32, "radii": None,
              "n_side": 5, "dk": 2.5},
    "schedule": {"p": INF, "eps": 0.1, "ell": 0.0, "q": 0.0, "j": None, "r": None,
                 "r1": None, "r2": None, "soft": False},
    "run": {"kind": "envelope", "integrator": "cn", "dt": 1.0, "T_end": 100.0, "stride": 1,
            "windows": [[25.0, 100.0]],
            "initial": {"family": "maxwellian", "amplitude": 1.0, "profiles": [INF, 2.0], "seed": 0}},
    "checks": {"trilinear_samples": 16, "interpolation_samples": 100, "positivity_samples": 256},
    "outputs": {"directory": "runs", "formats": ["csv", "json"]},
}

FAMILIES = ("maxwellian", "bump", "random")
FORMATS = ("csv", "json", "markdown")


class ConfigError(ValueError):
    """Invalid configuration; `errors` lists every violation."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


def default_config() -> dict:
    return copy.deepcopy(SCHEMA)


def _to_float(x):
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", "infinity", ".inf"):
        return INF
    if isinstance(x, bool):
        raise TypeError("boolean where a number is expected")
    return float(x)


def _node_tree(node, path=(), lines=None):
    """Plain Python value of a composed YAML node plus a path -> line map."""
    lines = {} if lines is None else lines
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _node_tree(v, path + (key,), lines)[0]
        return out, lines
    if isinstance(node, yaml.SequenceNode):
        return [_node_tree(v, path + (i,), lines)[0] for i, v in enumerate(node.value)], lines
    return yaml.safe_load(yaml.serialize(node)), lines


@dataclass
class ExperimentConfig:
    kernel: KernelSpec
    grid: VelocityGrid
    sphere_order: int
    kgrid: dict
    schedule: InterpolationSchedule
    run: dict
    checks: dict
    outputs: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def weight(self) -> WeightSpec | None:
        if not self.schedule.soft:
            return None
        return WeightSpec(self.schedule.ell, self.schedule.q, self.kernel.gamma2s)

    def canonical(self) -> dict:
        """Validated values only: integers as floats, infinities spelled out for JSON."""
        def fix(x):
            if isinstance(x, dict):
                return {k: fix(v) for k, v in x.items() if k != "outputs"}
            if isinstance(x, list):
                return [fix(v) for v in x]
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            if isinstance(x, int) and not isinstance(x, bool):
                return float(x)
            return x
        return fix(self.raw)

    @property
    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def summary(self) -> dict:
        s = self.schedule
        out = {"hash": self.hash, "sigma": s.sigma, "omega": s.omega, "theta_hard": s.theta_hard,
               "hard": self.kernel.hard, "N": self.grid.N, "V": self.grid.V,
               "kgrid": self.kgrid["mode"], "run": self.run["kind"]}
        if s.soft:
            out.update({"r": s.r_value, "j": s.j_value, "r1": s.r1_value, "r2": s.r2_value})
        return out


def _merge(defaults: dict, given: dict, path: tuple, lines: dict, errors: list) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"line {lines.get(path + (key,), '?')}"
        dotted = ".".join(map(str, path + (key,)))
        if key not in defaults:
            hint = difflib.get_close_matches(str(key), list(defaults), n=1)
            msg = f"{where}: unknown key '{dotted}'"
            errors.append(msg + (f" (did you mean '{hint[0]}'?)" if hint else ""))
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{where}: '{dotted}' must be a mapping")
                continue
            out[key] = _merge(defaults[key], value, path + (key,), lines, errors)
        else:
            out[key] = value
    return out


def _line(lines, *path):
    return f"line {lines[path]}" if path in lines else "config"


def _check(errors, lines, path, fn, value):
    try:
        return fn(value)
    except (TypeError, ValueError) as exc:
        errors.append(f"{_line(lines, *path)}: '{'.'.join(path)}' = {value!r}: {exc}")
        return None


def _positive(x):
    x = _to_float(x)
    if not x > 0:
        raise ValueError("must be positive")
    return x


def _pos_int(x):
    if isinstance(x, bool) or int(x) != x or int(x) < 1:
        raise ValueError("must be a positive integer")
    return int(x)


def _profiles(ps):
    out = [_to_float(p) for p in ps]
    if any(p < 1 for p in out):
        raise ValueError("profile exponents p must be >= 1")
    return out


def _optional(fn):
    return lambda x: None if x is None else fn(x)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML document; raises ConfigError listing every violation."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML syntax error: {exc}"]) from None
    given, lines = ({}, {}) if root is None else _node_tree(root)
    if not isinstance(given, dict):
        raise ConfigError(["config: top level must be a mapping"])
    errors: list[str] = []
    cfg = _merge(SCHEMA, given, (), lines, errors)
    k, g, kg, sc, run, ch, out = (cfg[b] for b in
                                  ("kernel", "grid", "kgrid", "schedule", "run", "checks", "outputs"))
    c = lambda path, fn, v: _check(errors, lines, path, fn, v)

    kern_vals = {name: c(("kernel", name), _to_float, k[name]) for name in ("gamma", "s", "theta_min", "b0")}
    kernel = None
    if None not in kern_vals.values():
        try:
            kernel = KernelSpec(**kern_vals)
        except ValueError as exc:
            errors += [f"{_line(lines, 'kernel')}: kernel: {m}" for m in str(exc).split("; ")]
    V = c(("grid", "V"), _positive, g["V"])
    N = c(("grid", "N"), _pos_int, g["N"])
    order = c(("grid", "sphere_order"), _pos_int, g["sphere_order"])
    grid = None
    if V is not None and N is not None:
        if N < 4:
            errors.append(f"{_line(lines, 'grid', 'N')}: 'grid.N' = {N}: need at least 4 nodes per axis")
        else:
            grid = VelocityGrid(V, N)

    if kg["mode"] not in ("radial", "lattice"):
        errors.append(f"{_line(lines, 'kgrid', 'mode')}: 'kgrid.mode' must be radial or lattice")
    if kg["mode"] == "lattice":
        n_side = c(("kgrid", "n_side"), _pos_int, kg["n_side"])
        if n_side is not None and n_side % 2 == 0:
            errors.append(f"{_line(lines, 'kgrid', 'n_side')}: 'kgrid.n_side' must be odd so that k=0 is a node")
        c(("kgrid", "dk"), _positive, kg["dk"])
    else:
        c(("kgrid", "K_max"), _positive, kg["K_max"])
        c(("kgrid", "n_radial"), _pos_int, kg["n_radial"])
        if kg["radii"] is not None:
            c(("kgrid", "radii"), lambda r: [_positive(x) for x in r], kg["radii"])

    sched_vals = {}
    for name in ("p", "eps", "ell", "q"):
        sched_vals[name] = c(("schedule", name), _to_float, sc[name])
    for name in ("j", "r", "r1", "r2"):
        sched_vals[name] = c(("schedule", name), _optional(_to_float), sc[name])
    sched_vals["soft"] = bool(sc["soft"])
    schedule = None
    if all(sched_vals[n] is not None for n in ("p", "eps", "ell", "q")):
        try:
            schedule = InterpolationSchedule(**sched_vals)
        except ValueError as exc:
            errors += [f"{_line(lines, 'schedule')}: schedule: {m}" for m in str(exc).split("; ")]
    if kernel is not None and schedule is not None and schedule.soft == kernel.hard:
        errors.append(f"{_line(lines, 'schedule', 'soft')}: 'schedule.soft' = {schedule.soft} "
                      f"but gamma + 2s = {kernel.gamma2s:g} ({'hard' if kernel.hard else 'soft'} potential)")

    if run["kind"] not in ("envelope", "linear", "nonlinear"):
        errors.append(f"{_line(lines, 'run', 'kind')}: 'run.kind' must be envelope, linear or nonlinear")
    if run["kind"] == "envelope" and kg["mode"] != "radial":
        errors.append(f"{_line(lines, 'run', 'kind')}: envelope runs need kgrid.mode = radial")
    if run["kind"] == "nonlinear" and kg["mode"] != "lattice":
        errors.append(f"{_line(lines, 'run', 'kind')}: nonlinear runs need kgrid.mode = lattice")
    if run["integrator"] not in ("cn", "rk4"):
        errors.append(f"{_line(lines, 'run', 'integrator')}: 'run.integrator' must be cn or rk4")
    dt = c(("run", "dt"), _positive, run["dt"])
    T = c(("run", "T_end"), _positive, run["T_end"])
    c(("run", "stride"), _pos_int, run["stride"])
    if dt is not None and T is not None and abs(round(T / dt) * dt - T) > 1e-9 * max(T, 1.0):
        errors.append(f"{_line(lines, 'run', 'T_end')}: 'run.T_end' must be a multiple of run.dt")
    windows = c(("run", "windows"), lambda w: [(_to_float(a), _to_float(b)) for a, b in w], run["windows"])
    if windows and T is not None and run["kind"] == "envelope":
        for a, b in windows:
            if not 0 <= a < b <= T:
                errors.append(f"{_line(lines, 'run', 'windows')}: fit window [{a}, {b}] must lie in [0, T_end]")
    init = run["initial"]
    if init["family"] not in FAMILIES:
        hint = difflib.get_close_matches(str(init["family"]), FAMILIES, n=1)
        errors.append(f"{_line(lines, 'run', 'initial', 'family')}: unknown initial family "
                      f"{init['family']!r}" + (f" (did you mean '{hint[0]}'?)" if hint else ""))
    c(("run", "initial", "amplitude"), _to_float, init["amplitude"])
    c(("run", "initial", "profiles"), _profiles, init["profiles"])
    for name in ("trilinear_samples", "interpolation_samples", "positivity_samples"):
        c(("checks", name), _pos_int, ch[name])
    bad_fmt = [f for f in out["formats"] if f not in FORMATS]
    if bad_fmt:
        errors.append(f"{_line(lines, 'outputs', 'formats')}: unknown output formats {bad_fmt}")
    if errors:
        raise ConfigError(errors)

    cfg["schedule"]["p"] = schedule.p
    cfg["run"]["initial"]["profiles"] = [_to_float(p) for p in init["profiles"]]
    cfg["run"]["windows"] = [list(w) for w in windows]
    return ExperimentConfig(kernel, grid, order, dict(kg), schedule, cfg["run"], ch, out, cfg)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
