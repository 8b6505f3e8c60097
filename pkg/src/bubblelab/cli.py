"""Config-driven command line entry point.

Every run validates its JSON config against a small schema, computes, and
writes deterministic artifacts plus a manifest echoing the resolved config.
Exit codes: 0 success, 2 config/schema violation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ansatz import Ansatz, residual_scan, slope_fit
from .functionals import CoercivitySpace, coercivity_min
from .modulation import ModState, RegimeMode, app_trajectory, shoot_unstable
from .profiles import (
    build_profile_set,
    modified_wronskian,
    reference_grid,
)
from .radial import RadialGrid
from .wavesim import BlowupExperiment, flat_power_benchmark

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# schema validation
# ----------------------------------------------------------------------

def _need(cfg, key, kind, path, check=None, default=None, required=False):
    if key not in cfg:
        if required:
            raise ConfigError(f"{path}.{key}: required key missing")
        return default
    val = cfg[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, "
                          f"got {type(val).__name__}")
    if check is not None and not check(val):
        raise ConfigError(f"{path}.{key}: value {val!r} out of range")
    return val


def parse_regime(cfg, path):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = _need(cfg, "kind", str, path, required=True,
                 check=lambda s: s in ("nondegenerate", "degenerate"))
    if kind == "nondegenerate":
        center = _need(cfg, "ustar_center", float, path, required=True,
                       check=lambda x: x > 0)
        return RegimeMode.nondegenerate(center)
    nu = _need(cfg, "nu", float, path, required=True, check=lambda x: x > 0)
    return RegimeMode.degenerate(nu)


COMMANDS = ("profiles", "modulation", "ansatz-scan", "coercivity",
            "benchmark-linear", "simulate")


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config root: expected an object")
    version = _need(cfg, "schema_version", int, "config", default=SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version: unsupported {version}")
    command = _need(cfg, "command", str, "config", required=True,
                    check=lambda s: s in COMMANDS)
    params = cfg.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("config.params: expected an object")
    return command, params


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def cmd_profiles(params, out, verbose):
    n = _need(params, "grid_n", int, "params", default=131072,
              check=lambda x: x >= 1024)
    rmax = _need(params, "grid_rmax", float, "params", default=1e10,
                 check=lambda x: x > 100)
    z_variant = _need(params, "z_variant", str, "params", default="default",
                      check=lambda s: s in ("default", "alternate"))
    cache = _need(params, "cache", str, "params")
    grid = reference_grid(n=n, rmax=rmax)
    ps = build_profile_set(grid, z_variant=z_variant)
    wr = modified_wronskian(grid, ps.field("Gamma").values,
                            ps.field("GammaPrime").values)
    sel = (grid.r > 0.1) & (grid.r < 50.0)

    def far_slope(name, lo=500.0, hi=5000.0):
        m = (grid.r >= lo) & (grid.r <= hi)
        vals = np.abs(ps.field(name).values[m])
        return slope_fit(grid.r[m], vals)

    summary = {
        "kappa": ps.kappa,
        "kappa_closed_form": 128.0 / (105.0 * np.pi),
        "kappa_rel_error": abs(ps.kappa * 105.0 * np.pi / 128.0 - 1.0),
        "e0": ps.e0,
        "wronskian_max_dev": float(np.max(np.abs(wr[sel] - 1.0))),
        "far_slopes_500_5000": {k: far_slope(k) for k in ("A", "dA", "B", "dB")},
        "z_variant": z_variant,
        "grid": grid.descriptor(),
    }
    if cache:
        ps.save(Path(out) / cache)
        summary["cache"] = cache
    _write_json(Path(out) / "profiles_summary.json", summary)
    return summary


def cmd_modulation(params, out, verbose):
    mode = parse_regime(params.get("regime", {"kind": "nondegenerate",
                                              "ustar_center": 1.0}),
                        "params.regime")
    t1 = _need(params, "t1", float, "params", default=0.1, check=lambda x: x > 0)
    t0 = _need(params, "t0", float, "params", default=0.5, check=lambda x: x > 0)
    if not t1 < t0:
        raise ConfigError("params: need t1 < t0")
    e0 = _need(params, "e0", float, "params", default=1.0, check=lambda x: x > 0)
    amp = _need(params, "forcing_amplitude", float, "params", default=0.0)
    tol = _need(params, "tol", float, "params", default=1e-12,
                check=lambda x: x > 0)
    forcing = None
    if amp != 0.0:
        gamma = mode.gamma
        forcing = lambda t: amp * t**gamma
    result = shoot_unstable(t1, t0, mode, forcing=forcing, tol=tol, e0=e0)
    result.trajectory.write_csv(Path(out) / "trajectory.csv")
    summary = {
        "a_star": result.a_star,
        "iterations": result.iterations,
        "bracket": list(result.bracket),
        "trapped": result.trajectory.trapped,
        "transcript": result.transcript,
        "e0": e0,
        "forcing_amplitude": amp,
    }
    _write_json(Path(out) / "modulation_summary.json", summary)
    return summary


def cmd_ansatz_scan(params, out, verbose):
    mode = parse_regime(params.get("regime", {"kind": "nondegenerate",
                                              "ustar_center": 5.0}),
                        "params.regime")
    t_lo = _need(params, "t_lo", float, "params", default=1e-2,
                 check=lambda x: x > 0)
    t_hi = _need(params, "t_hi", float, "params", default=1e-1,
                 check=lambda x: x > t_lo)
    n = _need(params, "n_samples", int, "params", default=9,
              check=lambda x: x >= 4)
    rho = _need(params, "rho", float, "params", default=1.0,
                check=lambda x: x > 0)
    ps = build_profile_set()
    ansatz = Ansatz(ps, mode, rho=rho)
    ts = np.geomspace(t_lo, t_hi, n)
    rows, slopes = residual_scan(ansatz, ts)
    header = ["t", "norm_P0_H1", "norm_P1_L2", "norm_psi0_H1", "norm_psi1_L2"]
    data = np.array([[r["t"], r["P0_H1dot"], r["P1_L2"],
                      r["psi0_H1dot"], r["psi1_L2"]] for r in rows])
    np.savetxt(Path(out) / "residual_scan.csv", data, delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")
    summary = {"slopes": slopes, "n_samples": n,
               "window": [t_lo, t_hi],
               "regime": "nondegenerate" if mode.nondeg else "degenerate"}
    _write_json(Path(out) / "ansatz_summary.json", summary)
    return summary


def cmd_coercivity(params, out, verbose):
    n_nodes = _need(params, "n_nodes", int, "params", default=1600,
                    check=lambda x: x >= 200)
    r_dom = _need(params, "r_dom", float, "params", default=60.0,
                  check=lambda x: x > 10)
    n_modes = _need(params, "n_modes", int, "params", default=200,
                    check=lambda x: 10 <= x)
    lam = _need(params, "lam", float, "params", default=1.0,
                check=lambda x: x > 0)
    ps = build_profile_set()
    y_fn = ps.fn("Y")

    def minima(nn):
        space = CoercivitySpace.build(n_nodes=nn, r_dom=r_dom, n_modes=n_modes)
        yv = y_fn(space.nodes)
        return {
            "none": coercivity_min("none", lam, space),
            "Y": coercivity_min("Y", lam, space, y_values=yv),
            "Y_and_Z": coercivity_min("Y_and_Z", lam, space, y_values=yv),
        }
    coarse = minima(n_nodes)
    fine = minima(2 * n_nodes)
    summary = {
        "constraints": ["none", "Y", "Y_and_Z"],
        "grid": {"n_nodes": n_nodes, "r_dom": r_dom, "n_modes": n_modes},
        "min_quotient": coarse,
        "c2_estimate": fine["Y_and_Z"],
        "refinement_trend": {k: fine[k] - coarse[k] for k in coarse},
    }
    _write_json(Path(out) / "coercivity_report.json", summary)
    return summary


def cmd_benchmark_linear(params, out, verbose):
    p = _need(params, "p", float, "params", default=1.0, check=lambda x: x != 0)
    beta = _need(params, "beta", float, "params", default=3.0,
                 check=lambda x: x > 2.5)
    rho = _need(params, "rho", float, "params", default=1.0,
                check=lambda x: x > 0)
    dr = _need(params, "dr", float, "params", default=1e-3,
               check=lambda x: 0 < x < 0.1)
    window = params.get("t_window", [0.1, 0.3])
    if (not isinstance(window, list) or len(window) != 2
            or not 0 < window[0] < window[1]):
        raise ConfigError("params.t_window: expected [t_lo, t_hi] with "
                          "0 < t_lo < t_hi")
    result = flat_power_benchmark(p=p, beta=beta, rho=rho,
                                  t_window=tuple(window), dr=dr)
    _write_json(Path(out) / "benchmark_linear.json", result)
    return result


def cmd_simulate(params, out, verbose):
    mode = parse_regime(params.get("regime", {"kind": "nondegenerate",
                                              "ustar_center": 5.0}),
                        "params.regime")
    t1 = _need(params, "t1", float, "params", default=0.15,
               check=lambda x: x > 0)
    t0 = _need(params, "t0", float, "params", default=0.5,
               check=lambda x: x > 0)
    if not t1 < t0:
        raise ConfigError("params: need t1 < t0")
    rho = _need(params, "rho", float, "params", default=1.0,
                check=lambda x: x > 0)
    cfl = _need(params, "cfl", float, "params", default=0.4,
                check=lambda x: 0 < x < 1)
    core = _need(params, "nodes_in_core", int, "params", default=40,
                 check=lambda x: x >= 8)
    max_iter = _need(params, "max_iter", int, "params", default=30,
                     check=lambda x: 1 <= x <= 64)
    exp = BlowupExperiment(mode, t1=t1, t0=t0, rho=rho, cfl=cfl,
                           nodes_in_core=core)
    report = exp.run(max_iter=max_iter)
    report.write_csv(Path(out) / "timeseries.csv")
    _write_json(Path(out) / "simulate_summary.json", report.manifest())
    return report.manifest()


DISPATCH = {
    "profiles": cmd_profiles,
    "modulation": cmd_modulation,
    "ansatz-scan": cmd_ansatz_scan,
    "coercivity": cmd_coercivity,
    "benchmark-linear": cmd_benchmark_linear,
    "simulate": cmd_simulate,
}


def run(config, out_dir, threads=1, verbose=False):
    """Validate and execute one experiment config; returns the exit code."""
    try:
        command, params = validate_config(config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = params.get("seed", 0)
    np.random.seed(seed if isinstance(seed, int) else 0)
    try:
        summary = DISPATCH[command](params, out, verbose)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # numerical failures keep their own exit code
        print(f"numerical failure: {err}", file=sys.stderr)
        if verbose:
            raise
        return EXIT_NUMERICAL
    manifest = {
        "tool": "bubblelab",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "resolved_config": {"command": command, "params": params,
                            "threads": threads},
    }
    _write_json(out / "manifest.json", manifest)
    if verbose:
        print(json.dumps(summary, indent=2, default=float))
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="bubblelab",
        description="numerical experiments for bubble concentration in the "
                    "5-d energy-critical wave equation")
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config, args.out, threads=args.threads, verbose=args.verbose)


if __name__ == "__main__":
    sys.exit(main())
