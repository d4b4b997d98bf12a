"""Command-line entry point: ``cauchylab <subcommand> config.toml [flags]``.

Exit codes: 0 success, 2 invalid configuration or hard error, 3 soft failure
(a quality check or fit was flagged; suppressed by ``--soft-fail-ok``).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .cauchy import build_metric, stabilized_aperture
from .fixtures import fixture_spec
from .geometry import DomainSpec, GeometryError, GridDomain, build_augmented_domain, validate_chain
from .green import asymptotics_report, green_columns, green_operator, kernel_stack
from .pde import generation_operator
from .potential import PiecewiseLinearPotential, extend_to_omega0, random_potential
from .probes import smallness_propagation_report, three_spheres_experiment
from .stability import ForwardModel, boundary_stability_probe, reconstruct, stability_sweep

log = logging.getLogger("cauchylab")

EXIT_OK, EXIT_HARD, EXIT_SOFT = 0, 2, 3

RUN_DEFAULTS = {
    "h": 1 / 12,
    "m": 20,
    "seed": 0,
    "e0": 10.0,
    "n_samples": 50,
    "radii": [1, 2, 4, 8],
    "boundary_radii": [1, 2, 3, 4, 5, 6],
    "k": 1,
    "chain": [1, 2],
    "iterations": 500,
    "n_pairs": 10,
    "three_spheres_radii": [0.125, 0.25, 0.375],
    "tau": 1.0,
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Experiment:
    config: dict
    domain: GridDomain
    q1: PiecewiseLinearPotential
    q2: PiecewiseLinearPotential
    run: dict
    config_hash: str


# -- configuration --------------------------------------------------------------------

def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _potential(table, path: str, domain: GridDomain, e0: float, rng) -> PiecewiseLinearPotential:
    dim, n_sub = domain.dim, domain.n_subdomains
    if table is None or (isinstance(table, dict) and table.get("random", False)):
        return random_potential(rng, domain, e0)
    _require(isinstance(table, dict), path, "must be a table")
    _require("pieces" in table, f"{path}.pieces", "missing")
    _require(isinstance(table["pieces"], list) and len(table["pieces"]) == n_sub,
             f"{path}.pieces", f"need one entry per subdomain ({n_sub})")
    try:
        return PiecewiseLinearPotential.from_mapping(table, dim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.pieces", str(exc)) from None


def load_experiment(config: dict, overrides: dict) -> Experiment:
    cfg = copy.deepcopy(config)
    run = dict(RUN_DEFAULTS)
    run_tab = cfg.get("run", {})
    _require(isinstance(run_tab, dict), "run", "must be a table")
    unknown = sorted(set(run_tab) - set(RUN_DEFAULTS))
    _require(not unknown, f"run.{unknown[0] if unknown else ''}", "unknown field")
    run.update(run_tab)
    run.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("m", "seed", "n_samples", "k", "iterations", "n_pairs"):
        _require(isinstance(run[key], int) and not isinstance(run[key], bool), f"run.{key}", "must be an integer")
    for key in ("h", "e0", "tau"):
        _require(isinstance(run[key], (int, float)) and run[key] > 0, f"run.{key}", "must be a positive number")
    _require(run["m"] >= 1, "run.m", "must be >= 1")
    _require(run["n_samples"] >= 1, "run.n_samples", "must be >= 1")
    _require(run["iterations"] >= 0, "run.iterations", "must be >= 0")
    for key in ("radii", "boundary_radii"):
        _require(isinstance(run[key], list) and all(isinstance(v, int) and v > 0 for v in run[key]),
                 f"run.{key}", "must be a list of positive integers (units of h)")
    _require(isinstance(run["three_spheres_radii"], list) and len(run["three_spheres_radii"]) == 3,
             "run.three_spheres_radii", "must list three radii")

    dom_tab = cfg.get("domain")
    _require(isinstance(dom_tab, dict), "domain", "missing table")
    try:
        if "fixture" in dom_tab:
            spec = fixture_spec(dom_tab["fixture"], dom_tab.get("dim"))
        else:
            spec = DomainSpec.from_mapping(dom_tab)
        domain = build_augmented_domain(spec, float(run["h"]))
    except (GeometryError, ValueError, TypeError) as exc:
        raise ConfigError("domain", str(exc)) from None

    pots = cfg.get("potentials", {})
    _require(isinstance(pots, dict), "potentials", "must be a table")
    rng = np.random.default_rng([run["seed"], 7])
    q1 = _potential(pots.get("q1"), "potentials.q1", domain, run["e0"], rng)
    q2 = q1 if pots.get("q2") is None else _potential(pots["q2"], "potentials.q2", domain, run["e0"], rng)
    effective = {"domain": dom_tab, "potentials": pots, "run": run}
    digest = hashlib.sha256(json.dumps(effective, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return Experiment(cfg, domain, q1, q2, run, digest)


# -- artifacts --------------------------------------------------------------------

def provenance(exp: Experiment, command: str) -> dict:
    d = exp.domain
    return {
        "command": command,
        "config_hash": exp.config_hash,
        "seed": exp.run["seed"],
        "grid": {"dim": d.dim, "h": d.h, "shape": list(d.shape), "r0": d.r0, "d0_thickness": d.d0_thickness},
        "version": __version__,
        "flags": list(d.flags),
    }


def _header_lines(prov: dict) -> str:
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in prov.items())


def write_text(out: Path, name: str, prov: dict, body: str) -> Path:
    path = out / name
    path.write_text(_header_lines(prov) + body)
    return path


def write_json(out: Path, name: str, prov: dict, payload: dict) -> Path:
    path = out / name
    doc = {"provenance": prov, "result": payload}
    path.write_text(json.dumps(doc, indent=2, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, complex):
        return [v.real, v.imag]
    raise TypeError(type(v))


# -- subcommands ------------------------------------------------------------------

def _center_node(domain: GridDomain) -> int:
    box = domain.omega_box
    c = (np.array(box.lo) + np.array(box.hi)) / 2
    return int(domain.node_at(domain.lo + domain.h * np.rint((c - domain.lo) / domain.h)))


def cmd_forward(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    op = green_operator(d, extend_to_omega0(exp.q1, d), exp.run["tau"])
    y = _center_node(d)
    col = green_columns(op, [y])[:, 0]
    buf = io.StringIO()
    op.field(col).dump(buf)
    write_text(out, "forward_field.txt", prov, buf.getvalue())
    return {"source_node": y, "n_active": op.n, "max_abs": float(np.max(np.abs(col)))}, False


def cmd_green_check(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    q = extend_to_omega0(exp.q1, d)
    op = green_operator(d, q, exp.run["tau"])
    rng = np.random.default_rng(exp.run["seed"])
    inner = op.active[op.weights == 1.0]
    worst_sym = 0.0
    for _ in range(10):
        a, b = rng.choice(inner, 2, replace=False)
        cols = green_columns(op, [a, b])
        gab, gba = cols[op.row_of[a], 1], cols[op.row_of[b], 0]
        worst_sym = max(worst_sym, abs(gab - gba) / max(abs(gab), abs(gba)))
    y = _center_node(d)
    ks = kernel_stack(d, q, y, op_q=op)
    direct = green_columns(op, [y])[:, 0]
    ks_err = float(np.max(np.abs(ks.total - direct)) / np.max(np.abs(direct)))
    direction = [0] * d.dim
    direction[0] = 1
    try:
        rep = asymptotics_report(d, q, y, direction, exp.run["radii"], op=op)
        buf = io.StringIO()
        rep.write_csv(buf)
        write_text(out, "asymptotics.csv", prov, buf.getvalue())
        slopes = rep.slopes
        flags = list(rep.flags)
    except (GeometryError, ValueError) as exc:
        slopes, flags = {}, [f"asymptotics_skipped: {exc}"]
    result = {"symmetry_max_rel": worst_sym, "kernel_stack_rel_err": ks_err, "J": ks.J,
              "asymptotic_slopes": slopes, "flags": flags}
    write_json(out, "green_check.json", prov, result)
    print(f"kernel-stack relative error: {ks_err:.3e}")
    print(f"symmetry max relative defect: {worst_sym:.3e}")
    return result, ks_err > 1e-8 or worst_sym > 1e-10


def cmd_distance(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    metric = build_metric(d)
    rep = stabilized_aperture(generation_operator(d, exp.q1, exp.run["tau"]),
                              generation_operator(d, exp.q2, exp.run["tau"]), metric, exp.run["m"])
    result = {"aperture": rep.d, "aperture_2m": rep.d_double, "drift": rep.drift,
              "one_sided": list(rep.one_sided), "flags": list(rep.flags) + ["metric_relative"]}
    write_json(out, "distance.json", prov, result)
    print(f"aperture: {rep.d:.6e} (2m: {rep.d_double:.6e}, drift {rep.drift:.2e})")
    return result, not rep.stable


def cmd_sweep(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    res = stability_sweep(exp.domain, exp.run["n_samples"], exp.run["seed"], exp.run["m"], exp.run["e0"])
    buf = io.StringIO()
    res.write_csv(buf)
    write_text(out, "sweep.csv", prov, buf.getvalue())
    write_json(out, "summary.json", prov, res.summary)
    s = res.summary
    print(f"spearman: {s['spearman']:.4f}  max ratio: {s['max_ratio']}  excluded: {s['n_excluded']}")
    return s, s["n_excluded"] > 0 or not s["injectivity_ok"]


def cmd_probe(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    chain = validate_chain(d, exp.run["chain"])
    op1 = green_operator(d, extend_to_omega0(exp.q1, d), exp.run["tau"])
    op2 = green_operator(d, extend_to_omega0(exp.q2, d), exp.run["tau"])
    rep = smallness_propagation_report(op1, op2, chain, exp.run["k"], exp.run["radii"])
    buf = io.StringIO()
    rep.write_csv(buf)
    write_text(out, "probe.csv", prov, buf.getvalue())
    bp = boundary_stability_probe(op1, op2, chain, exp.run["boundary_radii"])
    result = {
        "smallness": {"slopes": rep.slopes, "r2": rep.r2, "pde_residual": rep.pde_residual,
                      "metadata": rep.metadata, "flags": list(rep.flags)},
        "boundary": {"jump": bp.jump, "normal_slope": bp.normal_slope, "truth_jump": bp.truth_jump,
                     "truth_slope": bp.truth_slope, "r2_first": bp.r2_first, "r2_second": bp.r2_second,
                     "flags": list(bp.flags)},
    }
    write_json(out, "probe.json", prov, result)
    print(f"ratio slopes: {rep.slopes}")
    print(f"recovered jump {bp.jump:.4g} (truth {bp.truth_jump:.4g}), slope {bp.normal_slope:.4g}")
    r2s = [v for v in rep.r2.values() if v == v]
    low = "low_confidence" in bp.flags or any(v < 0.9 for v in r2s)
    return result, low


def cmd_three_spheres(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    op = generation_operator(d, exp.q1, exp.run["tau"])
    box = d.omega_box
    c = (np.array(box.lo) + np.array(box.hi)) / 2
    rng = np.random.default_rng(exp.run["seed"])
    res = three_spheres_experiment(op, c, tuple(exp.run["three_spheres_radii"]), exp.run["n_samples"], rng)
    result = {"tau_min": res.tau_min, "tau_max": float(np.max(res.tau_hat)), "skipped": res.skipped,
              "constant_half": res.constant_half, "n": int(res.tau_hat.size)}
    write_json(out, "three_spheres.json", prov, result)
    print(f"tau_hat in [{result['tau_min']:.4f}, {result['tau_max']:.4f}]")
    ok = bool(np.all((res.tau_hat > 0) & (res.tau_hat < 1)))
    return result, not ok


def cmd_reconstruct(exp: Experiment, out: Path, prov: dict) -> tuple[dict, bool]:
    d = exp.domain
    metric = build_metric(d)
    model = ForwardModel(d, metric, tuple(range(min(exp.run["m"], metric.size))), exp.run["tau"])
    truth = exp.q1.theta()
    observed = model.traces(truth)
    res = reconstruct(model, observed, np.zeros_like(truth), exp.run["e0"], exp.run["iterations"],
                      theta_true=truth)
    buf = io.StringIO()
    res.write_csv(buf)
    write_text(out, "reconstruction.csv", prov, buf.getvalue())
    err = res.trace[-1]["coefficient_error"]
    result = {"theta": res.theta.tolist(), "truth": truth.tolist(), "coefficient_error": err,
              "iterations": res.iterations, "converged": res.converged}
    write_json(out, "reconstruction.json", prov, result)
    print(f"coefficient error {err:.3e} after {res.iterations} iterations")
    return result, err > 0.01


COMMANDS = {
    "forward": cmd_forward,
    "green-check": cmd_green_check,
    "distance": cmd_distance,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
    "three-spheres": cmd_three_spheres,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cauchylab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", type=Path, help="TOML experiment configuration")
    p.add_argument("--h", type=float, help="grid spacing (overrides run.h)")
    p.add_argument("--m", type=int, help="number of generated Cauchy pairs (overrides run.m)")
    p.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--format", choices=("text", "json"), default="text", help="stdout summary format")
    p.add_argument("--soft-fail-ok", action="store_true", help="exit 0 even if a quality check is flagged")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = args.config.read_bytes()
        config = tomli.loads(raw.decode("utf-8"))
    except (OSError, UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_HARD
    try:
        exp = load_experiment(config, {"h": args.h, "m": args.m, "seed": args.seed})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HARD
    args.out.mkdir(parents=True, exist_ok=True)
    prov = provenance(exp, args.command)
    try:
        result, soft = COMMANDS[args.command](exp, args.out, prov)
    except (GeometryError, ValueError, RuntimeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_HARD
    if args.format == "json":
        print(json.dumps({"provenance": prov, "result": result}, default=_jsonable, sort_keys=True))
    if soft and not args.soft_fail_ok:
        print("soft failure: a quality check was flagged", file=sys.stderr)
        return EXIT_SOFT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
