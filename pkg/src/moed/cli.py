"""``moed`` command-line front end.

Each command works inside one run directory::

    config.snapshot
    kernels/{C,D,CF,F_adj,G_adj,time_weights,space_weights}.csv, meta.json
    design/{moed,classical}.json, weights.csv
    map/{m_map,b_map}.csv, summary.json
    study/replicates.csv, summary.json

Only ``assemble`` runs the PDE solver. The other commands load the cached
kernel matrices after checking the config fingerprint and file checksums.
"""
import argparse
import copy
import csv
import hashlib
import json
import os
import sys

import numpy as np
import scipy.linalg as la

from . import __version__
from .config import build_config, build_priors, build_problem, load_config
from .errors import CacheError, ConfigError, FactorizationError, GuardError, ParameterError
from .forward import AdvectionDiffusion
from .oed import Criterion, bisect_gamma, greedy_select, sparsify_l0
from .oracle import map_error_study, relative_error, truth_m
from .posterior import DesignWeights, KernelMatrices, MarginalCovariance, map_estimate, precompute_CD

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GUARD = 0, 1, 2, 3, 4

KERNEL_FILES = ("C", "D", "CF", "F_adj", "G_adj", "time_weights", "space_weights")


# -- file helpers -----------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    """RFC-4180 style CSV with a header row and 17-significant-digit floats."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrix(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    write_csv(path, [f"c{j}" for j in range(A.shape[1])], A.tolist())


def write_vector(path, name, v):
    write_csv(path, [name], [[float(x)] for x in np.asarray(v, dtype=float)])


def read_csv(path):
    """Numeric body of a CSV written by :func:`write_csv`, as a 2-D array."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CacheError(f"{path}: empty file")
    try:
        return np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)
    except ValueError as exc:
        raise CacheError(f"{path}: malformed CSV ({exc})") from exc


def write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- kernel cache -------------------------------------------------------------


def _kernel_dir(run_dir):
    return os.path.join(run_dir, "kernels")


def save_kernels(run_dir, kernels: KernelMatrices, cfg):
    kdir = _kernel_dir(run_dir)
    os.makedirs(kdir, exist_ok=True)
    arrays = {name: getattr(kernels, name) for name in KERNEL_FILES}
    checksums, shapes = {}, {}
    for name, arr in arrays.items():
        path = os.path.join(kdir, f"{name}.csv")
        if arr.ndim == 1:
            write_vector(path, name, arr)
        else:
            write_matrix(path, arr)
        checksums[f"{name}.csv"] = sha256_file(path)
        shapes[name] = list(arr.shape)
    meta = {
        "fingerprint": cfg.fingerprint(),
        "n_d": kernels.n_d,
        "forward_solves": kernels.forward_solves,
        "adjoint_solves": kernels.adjoint_solves,
        "checksums": checksums,
        "shapes": shapes,
        "moed_version": __version__,
    }
    write_json(os.path.join(kdir, "meta.json"), meta)
    return meta


def load_kernels(run_dir, cfg, verify_fingerprint=True):
    """Read cached kernels; fingerprint and checksum mismatches raise CacheError."""
    kdir = _kernel_dir(run_dir)
    meta_path = os.path.join(kdir, "meta.json")
    if not os.path.exists(meta_path):
        raise CacheError(f"no kernel cache in {kdir}; run 'moed assemble' first")
    try:
        meta = read_json(meta_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise CacheError(f"{meta_path}: unreadable metadata ({exc})") from exc
    if verify_fingerprint and meta.get("fingerprint") != cfg.fingerprint():
        raise CacheError(f"{kdir}: config fingerprint mismatch; rerun 'moed assemble'")
    arrays = {}
    for name in KERNEL_FILES:
        path = os.path.join(kdir, f"{name}.csv")
        if not os.path.exists(path):
            raise CacheError(f"{path}: missing cache file")
        if sha256_file(path) != meta["checksums"].get(f"{name}.csv"):
            raise CacheError(f"{path}: checksum mismatch; cache is corrupted")
        arr = read_csv(path)
        arrays[name] = arr.ravel() if len(meta["shapes"][name]) == 1 else arr
    return KernelMatrices(**arrays, forward_solves=meta["forward_solves"],
                          adjoint_solves=meta["adjoint_solves"]), meta


# -- commands -------------------------------------------------------------------


def _report(run_dir, name, payload):
    write_json(os.path.join(run_dir, name), payload)


def _sigma(cfg):
    return float(cfg.sensors["noise_sigma"])


def cmd_assemble(cfg, run_dir):
    """Precompute the kernel matrices, or reuse a cache with the same fingerprint."""
    try:
        kernels, meta = load_kernels(run_dir, cfg)
        return {"cache_hit": True, "pde_solves": 0, "forward_solves": 0, "adjoint_solves": 0,
                "recorded_forward_solves": meta["forward_solves"],
                "recorded_adjoint_solves": meta["adjoint_solves"], "n_d": kernels.n_d}
    except CacheError as exc:
        # a stale fingerprint is rebuilt; a corrupted cache is an error
        if "fingerprint mismatch" not in str(exc) and "no kernel cache" not in str(exc):
            raise
    _, _, maps, priors = build_problem(cfg)
    kernels = precompute_CD(maps, priors)
    save_kernels(run_dir, kernels, cfg)
    return {"cache_hit": False, "forward_solves": kernels.forward_solves,
            "adjoint_solves": kernels.adjoint_solves,
            "pde_solves": kernels.forward_solves + kernels.adjoint_solves, "n_d": kernels.n_d}


def _optimize(criterion, cfg, method, K, gamma):
    opt = cfg.optimizer
    n_d = criterion.n_d
    solver_kw = {"rtol": opt["rtol"], "max_iter": opt["max_iter"]}
    schedule = tuple(opt["schedule"]) if method == "l0" else ()
    start = criterion.n_evals
    if method == "greedy":
        if K is None:
            raise ConfigError("greedy needs a sensor count (--sensors)")
        trace = greedy_select(criterion, K, n_d)
        w = trace.weights(n_d)
        info = {"chosen": [int(i) for i in trace.chosen], "greedy_values": trace.values,
                "n_evals": trace.total_evals}
        return w, info, None
    if gamma is not None:
        res = sparsify_l0(criterion, gamma, schedule=schedule, threshold=opt["threshold"], **solver_kw)
        search = res.n_evals
    else:
        res = bisect_gamma(criterion, K, schedule=schedule, max_steps=opt["bisection_steps"],
                           threshold=opt["threshold"], **solver_kw)
        search = res.search_evals
    info = {"chosen": [int(i) for i in np.flatnonzero(res.w_binary)], "gamma": res.gamma,
            "epsilon_schedule": list(res.epsilon_schedule), "stage_iterations": res.iterations,
            "stage_values": res.stage_values, "relaxed_weights": res.w_relaxed.tolist(),
            "relaxed_value": res.relaxed_value, "converged": bool(res.converged),
            "n_evals": res.n_evals, "search_evals": search,
            "total_evals": criterion.n_evals - start}
    return res.w_binary, info, res


def cmd_design(cfg, run_dir, trace=False):
    """Marginalized and classical designs with the configured optimizer."""
    kernels, _ = load_kernels(run_dir, cfg)
    priors = build_priors(cfg)
    sigma = _sigma(cfg)
    tr = priors.m.trace()
    opt = cfg.optimizer
    method = opt["method"]
    gamma = opt.get("gamma")
    K = None if gamma is not None else opt["sensors"]
    if method == "greedy" and gamma is not None:
        raise ConfigError("--gamma applies to l0/l1 only; use --sensors with greedy")
    marginal = Criterion.marginal(kernels, sigma, offset=tr)
    classical = Criterion.classical(kernels, sigma, offset=tr)
    reports, weights = {}, {}
    for kind, crit in (("moed", marginal), ("classical", classical)):
        w, info, res = _optimize(crit, cfg, method, K, gamma)
        weights[kind] = w
        probe_m = Criterion.marginal(kernels, sigma, offset=tr)
        probe_c = Criterion.classical(kernels, sigma, offset=tr)
        Phi = probe_m(w)
        reports[kind] = {
            "method": method, "criterion": kind, "n_active": int(w.sum()),
            "weights": w.tolist(), "Psi": Phi - tr, "Phi": Phi, "psi_classical": probe_c(w),
            "prior_trace": tr, **info,
        }
        if trace and res is not None:
            rows = [(s, it, f, step, act) for s, hist in enumerate(res.traces)
                    for it, f, step, act in hist]
            write_csv(os.path.join(run_dir, "design", f"trace_{kind}.csv"),
                      ["stage", "iteration", "objective", "step", "active"], rows)
    coords = cfg.sensor_coords()
    write_csv(os.path.join(run_dir, "design", "weights.csv"), ["sensor", "x", "y", "w_moed", "w_classical"],
              [(i, float(coords[i, 0]), float(coords[i, 1]), float(weights["moed"][i]),
                float(weights["classical"][i])) for i in range(kernels.n_d)])
    for kind, rep in reports.items():
        rep["pde_solves"] = 0
        _report(run_dir, os.path.join("design", f"{kind}.json"), rep)
    return reports


def _load_design(run_dir, kind):
    path = os.path.join(run_dir, "design", f"{kind}.json")
    if not os.path.exists(path):
        raise CacheError(f"{path} not found; run 'moed design' first")
    return np.asarray(read_json(path)["weights"], dtype=float)


def _truth(cfg, priors, time_nodes):
    return truth_m(time_nodes), priors.b.sample(cfg.study["truth_seed"])


def cmd_map(cfg, run_dir, design="moed", data=None):
    """MAP of ``(m, b)`` and the pointwise marginal posterior std of ``m``."""
    from .config import build_grids

    kernels, _ = load_kernels(run_dir, cfg)
    time, space = build_grids(cfg)
    priors = build_priors(cfg, time, space)
    maps = kernels.measurement_maps()
    w = _load_design(run_dir, design)
    dw = DesignWeights(w, _sigma(cfg))
    m_true, b_true = _truth(cfg, priors, time.nodes)
    if data is None:
        rng = np.random.default_rng(cfg.study["seed"])
        y = maps.apply_F(m_true) + maps.apply_G(b_true) + _sigma(cfg) * rng.standard_normal(kernels.n_d)
        synthesized = True
    else:
        y = read_csv(data).ravel()
        if y.size != kernels.n_d:
            raise ParameterError(f"{data}: expected {kernels.n_d} data values, got {y.size}")
        synthesized = False
    m_map, b_map = map_estimate(kernels, dw, priors, maps, y)
    cov = MarginalCovariance(kernels, dw, priors, maps)
    var = cov.pointwise_variance()
    std = np.sqrt(np.clip(var, 0.0, None))
    prior_std = np.sqrt(priors.m.pointwise_variance())
    x, yy = space.coords()
    mdir = os.path.join(run_dir, "map")
    write_csv(os.path.join(mdir, "m_map.csv"), ["t", "m_map", "m_std", "m_prior_std"],
              [(float(t), float(a), float(s), float(p)) for t, a, s, p in zip(time.nodes, m_map, std, prior_std)])
    write_csv(os.path.join(mdir, "b_map.csv"), ["x", "y", "b_map"],
              [(float(a), float(b), float(c)) for a, b, c in zip(x, yy, b_map)])
    write_vector(os.path.join(mdir, "data.csv"), "y", y)
    summary = {"design": design, "n_active": int(w.sum()), "synthesized_data": synthesized,
               "Phi": cov.trace, "weighted_variance_sum": float(np.dot(priors.m.weights, var)),
               "min_variance": float(var.min()), "pde_solves": 0}
    if synthesized:
        summary["relative_error_m"] = relative_error(m_map, m_true, priors.m.weights)
    _report(run_dir, os.path.join("map", "summary.json"), summary)
    return summary


def cmd_study(cfg, run_dir):
    """Monte-Carlo comparison of MAP errors under the two designs."""
    from .config import build_grids

    kernels, _ = load_kernels(run_dir, cfg)
    time, space = build_grids(cfg)
    priors = build_priors(cfg, time, space)
    designs = {k: _load_design(run_dir, k) for k in ("moed", "classical")}
    m_true, b_true = _truth(cfg, priors, time.nodes)
    st = cfg.study
    res = map_error_study(kernels, priors, designs, _sigma(cfg), m_true, b_true,
                          st["n_b_samples"], st["n_noise_samples"], st["seed"])
    sdir = os.path.join(run_dir, "study")
    write_csv(os.path.join(sdir, "replicates.csv"), ["noise_sample", "b_sample", "kind", "relative_error"],
              res.rows)
    med = {k: v["median"] for k, v in res.summary.items()}
    summary = {"summary": res.summary, "moed_identical_across_b": res.moed_identical,
               "ordering_holds": bool(med["classical_truth"] <= med["moed"] < med["classical_prior"]),
               "n_b_samples": st["n_b_samples"], "n_noise_samples": st["n_noise_samples"],
               "seed": st["seed"], "pde_solves": 0}
    _report(run_dir, os.path.join("study", "summary.json"), summary)
    return summary


# -- entry point -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="moed", description="Marginalized A-optimal sensor placement.")
    p.add_argument("--version", action="version", version=f"moed {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("assemble", "precompute and cache the kernel matrices"),
                        ("design", "optimize marginalized and classical designs"),
                        ("map", "MAP estimate and marginal posterior std for a design"),
                        ("study", "MAP-error study over noise and secondary-parameter draws")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="TOML config file (defaults to the preset alone)")
        s.add_argument("--preset", choices=("desk", "paper5"))
        s.add_argument("--method", choices=("greedy", "l0", "l1"))
        grp = s.add_mutually_exclusive_group()
        grp.add_argument("--sensors", type=int, metavar="K")
        grp.add_argument("--gamma", type=float, metavar="G")
        s.add_argument("--seed", type=int, metavar="S")
        s.add_argument("--out", metavar="DIR")
        if name == "design":
            s.add_argument("--trace", action="store_true", help="write per-iteration optimizer traces")
        if name == "map":
            s.add_argument("--design", choices=("moed", "classical"), default="moed")
            s.add_argument("--data", metavar="CSV", help="observed data (one column); synthesized if omitted")
    return p


def resolve_config(args):
    """Config file plus preset, with command-line overrides applied and validated."""
    cfg = load_config(args.config, args.preset)
    if args.method is None and args.sensors is None and args.gamma is None and args.seed is None:
        return cfg
    raw = {k: copy.deepcopy(getattr(cfg, k)) for k in
           ("grid", "pde", "prior_m", "prior_b", "sensors", "optimizer", "study", "output")}
    if args.method is not None:
        raw["optimizer"]["method"] = args.method
    if args.sensors is not None:
        raw["optimizer"]["sensors"] = args.sensors
        raw["optimizer"].pop("gamma", None)
    if args.gamma is not None:
        raw["optimizer"]["gamma"] = args.gamma
    if args.seed is not None:
        raw["study"]["seed"] = args.seed
    return build_config(raw, preset=cfg.preset, origin="<command line>")


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    run_dir = args.out or cfg.output["dir"]
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    before = AdvectionDiffusion.step_solves
    if args.command == "assemble":
        out = cmd_assemble(cfg, run_dir)
    elif args.command == "design":
        out = cmd_design(cfg, run_dir, trace=args.trace)
    elif args.command == "map":
        out = cmd_map(cfg, run_dir, design=args.design, data=args.data)
    else:
        out = cmd_study(cfg, run_dir)
    steps = AdvectionDiffusion.step_solves - before
    if args.command != "assemble" and steps:
        raise AssertionError(f"{args.command} performed {steps} time-step solves")
    return args.command, run_dir, out, steps


def main(argv=None):
    try:
        command, run_dir, out, steps = run(argv)
    except ConfigError as exc:
        print(f"moed: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParameterError as exc:
        print(f"moed: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GuardError as exc:
        print(f"moed: size guard: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (FactorizationError, la.LinAlgError, ArithmeticError) as exc:
        print(f"moed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CacheError, OSError) as exc:
        print(f"moed: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{command}: {run_dir} (time-step solves: {steps})")
    print(json.dumps(_brief(out), sort_keys=True))
    return EXIT_OK


def _brief(out):
    """Scalar fields of a command report, for the terminal."""
    if all(isinstance(v, dict) for v in out.values()):
        return {k: _brief(v) for k, v in out.items()}
    return {k: v for k, v in out.items() if isinstance(v, (int, float, str, bool))}


if __name__ == "__main__":
    sys.exit(main())
