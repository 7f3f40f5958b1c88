"""Experiment configuration: TOML files layered over named presets."""
import copy
import hashlib
import json
import re
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigError, ParameterError

PRESETS = {
    "desk": {
        "grid": {"nx": 24, "ny": 24, "n_m": 65, "t0": 0.0, "t_final": 1.0},
        "pde": {"kappa": 1e-3, "v0": 1.0, "velocity": "cellular",
                "source_center": [0.5, 0.35], "source_width": 0.05},
        "prior_m": {"sigma": 80.0, "ell": 0.17, "mean": 65.0},
        "prior_b": {"eps": 4.5e-3, "alpha": 2.2e-1, "mean": 50.0, "robin": "auto"},
        "sensors": {"lattice": 5, "lattice_min": 0.1, "lattice_max": 0.9,
                    "window": [0.95, 0.99], "noise_sigma": 0.25},
        "optimizer": {"method": "greedy", "sensors": 10, "schedule": [1.0, 0.1, 0.01, 0.001],
                      "threshold": 0.5, "rtol": 1e-8, "max_iter": 5000, "bisection_steps": 20},
        "study": {"n_b_samples": 20, "n_noise_samples": 50, "truth_seed": 12345, "seed": 0},
        "output": {"dir": "runs/desk"},
    },
}
PRESETS["paper5"] = copy.deepcopy(PRESETS["desk"])
PRESETS["paper5"]["grid"].update(nx=39, ny=39, n_m=257)
PRESETS["paper5"]["sensors"].update(lattice=7)
PRESETS["paper5"]["optimizer"].update(sensors=20)
PRESETS["paper5"]["study"].update(n_b_samples=200, n_noise_samples=500)
PRESETS["paper5"]["output"].update(dir="runs/paper5")

SECTIONS = tuple(PRESETS["desk"])
METHODS = ("greedy", "l0", "l1")


@dataclass
class ExperimentConfig:
    grid: dict
    pde: dict
    prior_m: dict
    prior_b: dict
    sensors: dict
    optimizer: dict
    study: dict
    output: dict
    preset: str = "desk"
    source: str = field(default="", repr=False, compare=False)

    # -- derived --------------------------------------------------------------

    def sensor_coords(self):
        s = self.sensors
        if "coords" in s:
            return np.asarray(s["coords"], dtype=float)
        xs = np.linspace(s["lattice_min"], s["lattice_max"], s["lattice"])
        X, Y = np.meshgrid(xs, xs)
        return np.c_[X.ravel(), Y.ravel()]

    @property
    def robin(self):
        r = self.prior_b["robin"]
        return None if r == "auto" else float(r)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("source",)}
        return d

    def fingerprint(self):
        """Hash of everything the kernel matrices depend on."""
        keyed = {k: getattr(self, k) for k in ("grid", "pde", "prior_m", "prior_b")}
        keyed["sensors"] = {"coords": self.sensor_coords().tolist(),
                            "window": list(self.sensors["window"])}
        blob = json.dumps(keyed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dumps(self):
        return tomli_w.dumps(self.to_dict())


def _line_of(text, section, key):
    """1-based line of ``key`` inside ``[section]`` in TOML text, or None."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[\s*([A-Za-z0-9_]+)\s*\]", stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return n
            continue
        if current == section and key and re.match(rf"{re.escape(key)}\s*=", stripped):
            return n
    return None


def _fail(text, origin, section, key, msg):
    line = _line_of(text, section, key) if text else None
    where = f"{origin}:{line}: " if line else f"{origin}: "
    name = f"[{section}] {key}" if key else f"[{section}]"
    raise ConfigError(f"{where}{name}: {msg}")


def _check(cfg, text, origin):
    def need(section, key, cond, msg):
        if not cond(cfg[section][key]):
            _fail(text, origin, section, key, msg)

    def num(x):
        return isinstance(x, (int, float)) and not isinstance(x, bool)

    def integer(x):
        return isinstance(x, int) and not isinstance(x, bool)

    pos = lambda x: num(x) and x > 0  # noqa: E731
    need("grid", "nx", lambda x: integer(x) and x >= 3, "must be an integer >= 3")
    need("grid", "ny", lambda x: integer(x) and x >= 3, "must be an integer >= 3")
    need("grid", "n_m", lambda x: integer(x) and x >= 2, "must be an integer >= 2")
    need("grid", "t0", num, "must be a number")
    need("grid", "t_final", lambda x: num(x) and x > cfg["grid"]["t0"], "must exceed t0")
    need("pde", "kappa", pos, "must be positive")
    need("pde", "v0", num, "must be a number")
    need("pde", "velocity", lambda x: x in ("cellular", "none"), "must be 'cellular' or 'none'")
    need("pde", "source_center",
         lambda x: isinstance(x, list) and len(x) == 2 and all(num(v) and 0 <= v <= 1 for v in x),
         "must be [x, y] inside the unit square")
    need("pde", "source_width", pos, "must be positive")
    need("prior_m", "sigma", pos, "must be positive")
    need("prior_m", "ell", pos, "must be positive")
    need("prior_m", "mean", num, "must be a number")
    need("prior_b", "eps", lambda x: num(x) and x >= 0, "must be nonnegative")
    need("prior_b", "alpha", pos, "must be positive")
    need("prior_b", "mean", num, "must be a number")
    need("prior_b", "robin", lambda x: x == "auto" or (num(x) and x >= 0),
         "must be 'auto' or a nonnegative number")
    s = cfg["sensors"]
    if "coords" in s:
        need("sensors", "coords",
             lambda x: isinstance(x, list) and len(x) >= 1
             and all(isinstance(p, list) and len(p) == 2 and all(num(v) and 0 <= v <= 1 for v in p)
                     for p in x),
             "must be a nonempty list of [x, y] points in the unit square")
    else:
        need("sensors", "lattice", lambda x: integer(x) and x >= 1, "must be a positive integer")
        need("sensors", "lattice_min", lambda x: num(x) and 0 <= x <= 1, "must lie in [0, 1]")
        need("sensors", "lattice_max",
             lambda x: num(x) and s["lattice_min"] <= x <= 1, "must lie in [lattice_min, 1]")
    g = cfg["grid"]
    need("sensors", "window",
         lambda x: isinstance(x, list) and len(x) == 2 and all(num(v) for v in x)
         and g["t0"] < x[0] <= x[1] <= g["t_final"],
         "must be [t_a, t_b] with t0 < t_a <= t_b <= t_final")
    need("sensors", "noise_sigma", pos, "must be positive")
    o = cfg["optimizer"]
    need("optimizer", "method", lambda x: x in METHODS, f"must be one of {METHODS}")
    need("optimizer", "sensors", lambda x: integer(x) and x >= 1, "must be a positive integer")
    if "gamma" in o:
        need("optimizer", "gamma", lambda x: num(x) and x >= 0, "must be nonnegative")
    need("optimizer", "schedule",
         lambda x: isinstance(x, list) and all(pos(v) for v in x)
         and all(a > b for a, b in zip(x, x[1:])),
         "must be a strictly decreasing list of positive numbers")
    need("optimizer", "threshold", lambda x: num(x) and 0 < x < 1, "must lie in (0, 1)")
    need("optimizer", "rtol", pos, "must be positive")
    need("optimizer", "max_iter", lambda x: integer(x) and x >= 1, "must be a positive integer")
    need("optimizer", "bisection_steps", lambda x: integer(x) and x >= 1, "must be a positive integer")
    for key in ("n_b_samples", "n_noise_samples"):
        need("study", key, lambda x: integer(x) and x >= 1, "must be a positive integer")
    for key in ("truth_seed", "seed"):
        need("study", key, lambda x: integer(x) and x >= 0, "must be a nonnegative integer")
    need("output", "dir", lambda x: isinstance(x, str) and x, "must be a nonempty string")


def build_config(overrides=None, preset=None, text="", origin="<config>"):
    """Merge ``overrides`` onto a preset and validate."""
    overrides = copy.deepcopy(overrides or {})
    preset = preset or overrides.pop("preset", "desk")
    overrides.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"{origin}: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    for section, values in overrides.items():
        if section not in cfg:
            _fail(text, origin, section, None, "unknown section")
        if not isinstance(values, dict):
            _fail(text, origin, section, None, "must be a table")
        for key, val in values.items():
            if key not in cfg[section] and not (section, key) in (("sensors", "coords"), ("optimizer", "gamma")):
                _fail(text, origin, section, key, "unknown key")
            cfg[section][key] = val
    _check(cfg, text, origin)
    return ExperimentConfig(**cfg, preset=preset, source=origin)


def load_config(path=None, preset=None):
    """Read a TOML config file (optional) on top of ``preset``."""
    if path is None:
        return build_config({}, preset=preset)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    text = raw.decode("utf-8", errors="replace")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(data, preset=preset or data.get("preset"), text=text, origin=str(path))


def build_grids(cfg: ExperimentConfig):
    from .grids import SpaceGrid, TimeGrid

    g = cfg.grid
    return TimeGrid(g["t0"], g["t_final"], g["n_m"]), SpaceGrid(g["nx"], g["ny"])


def build_priors(cfg: ExperimentConfig, time=None, space=None):
    from .priors import PriorPair, SpatialPrior, build_time_prior

    if time is None or space is None:
        time, space = build_grids(cfg)
    pm, pb = cfg.prior_m, cfg.prior_b
    return PriorPair(build_time_prior(time, pm["sigma"], pm["ell"], pm["mean"]),
                     SpatialPrior(space, pb["eps"], pb["alpha"], pb["mean"], cfg.robin))


def build_problem(cfg: ExperimentConfig):
    """Grids, PDE maps and priors described by ``cfg``."""
    from .forward import AdvectionDiffusion, ObservationSetup, PDEConfig, PDEMaps

    time, space = build_grids(cfg)
    p = cfg.pde
    pde = AdvectionDiffusion(space, time, PDEConfig(
        kappa=p["kappa"], v0=p["v0"], velocity=p["velocity"],
        source_center=tuple(p["source_center"]), source_width=p["source_width"]))
    try:
        maps = PDEMaps(pde, ObservationSetup(cfg.sensor_coords(), tuple(cfg.sensors["window"])))
    except ParameterError as exc:
        raise ConfigError(f"{cfg.source}: [sensors]: {exc}") from exc
    return time, space, maps, build_priors(cfg, time, space)
