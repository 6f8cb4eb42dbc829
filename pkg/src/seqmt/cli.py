"""Command-line interface.

Every subcommand reads a JSON config (``--config``), writes its outputs into
``--out`` (a directory) together with ``<name>.meta.json``, and exits with 0 on
success, 2 on invalid input and 3 on numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .calibrate import ClassSpec, nonconservative_search
from .divergence import ABS_TOL, NEAR_TIE_TOL, REL_TOL, analyze
from .errors import NonUniqueError, NumericError, ValidationError
from .approx import generic_expansion
from .experiments import EXPERIMENT_COLUMNS, preset, preset_meta, run_experiment
from .metrics import loss_from_dict
from .model import Problem, SignalConfig
from .rules import rule_from_dict, rule_name, thresholds_str
from .rwlab import Deterministic, FromProblem, GaussianVector, WalkSpec, residual_report
from .simulate import BLOCK_SIZE, Event, estimate_ess, estimate_error_is
from ._jsonutil import field as jfield

SIMULATE_COLUMNS = ["truth", "rule", "thresholds", "reps", "ess_mean", "ess_se", "metric", "estimate", "se", "truncated"]
APPROX_COLUMNS = ["alpha", "fo", "so", "kl_star", "h", "r"]
RWLAB_COLUMNS = ["b", "ess", "ess_se", "fo", "so", "diff_fo", "diff_so", "reps", "truncated"]


# ---------------------------------------------------------------------------
# io helpers


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: top-level JSON value must be an object")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_meta(out: Path, name: str, cfg: dict, seed: int, extra: dict | None = None) -> Path:
    meta = {
        "command": name,
        "seed": seed,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "versions": {"seqmt": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "tolerances": {"rel_tol": REL_TOL, "abs_tol": ABS_TOL, "near_tie_tol": NEAR_TIE_TOL},
        "rng": {"bit_generator": "PCG64", "block_size": BLOCK_SIZE,
                "substreams": "SeedSequence(seed, spawn_key=(*key, block))"},
    }
    if extra:
        meta.update(extra)
    path = out / f"{name}.meta.json"
    path.write_text(json.dumps(meta, indent=2, default=_json_default))
    return path


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, SignalConfig):
        return x.to_list()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _config_of(x, path: str) -> SignalConfig:
    if not isinstance(x, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in x):
        raise ValidationError(f"{path}: expected a list of stream indices")
    return SignalConfig.from_indices(x)


def _problem(cfg: dict) -> Problem:
    return Problem.from_dict(jfield(cfg, "problem", "", dict), "problem")


def _int(cfg: dict, key: str, default: int | None = None, lo: int = 1) -> int:
    v = jfield(cfg, key, "", int, default)
    if v is None or v < lo:
        raise ValidationError(f"{key}: must be an int >= {lo}, got {v!r}")
    return v


# ---------------------------------------------------------------------------
# subcommands


def cmd_divergence(args, cfg: dict, out: Path) -> dict:
    problem = _problem(cfg)
    W = loss_from_dict(jfield(cfg, "loss", "", dict))
    truth = _config_of(jfield(cfg, "truth", "", list, []), "truth")
    rep = analyze(problem, W, truth, sigma_mode=jfield(cfg, "sigma_mode", "", str, "analytic"),
                  n_mc=_int(cfg, "n_mc", 1_000_000, 1000), seed=args.seed)
    d = rep.to_dict()
    (out / "divergence.json").write_text(json.dumps(d, indent=2, default=_json_default))
    write_meta(out, "divergence", cfg, args.seed)
    return d


def cmd_simulate(args, cfg: dict, out: Path) -> list[dict]:
    problem = _problem(cfg)
    rule = rule_from_dict(jfield(cfg, "rule", "", dict), problem.K, "rule", problem.family)
    reps = _int(cfg, "reps", 1000)
    horizon = jfield(cfg, "horizon", "", int, None)
    metrics = jfield(cfg, "metrics", "", list, [])
    use_is = jfield(cfg, "use_is", "", bool, False)
    if "truths" in cfg:
        truths = [_config_of(t, f"truths[{i}]") for i, t in enumerate(jfield(cfg, "truths", "", list))]
    else:
        truths = [_config_of(jfield(cfg, "truth", "", list, []), "truth")]
    rows = []
    for A in truths:
        A.check(problem.K)
        sim = estimate_ess(rule, problem, A, reps, horizon, args.seed, events=[] if use_is else metrics,
                           workers=args.workers, key=(A.bits,))
        base = {"truth": repr(A), "rule": rule_name(rule), "thresholds": thresholds_str(rule), "reps": reps,
                "ess_mean": sim.ess_mean, "ess_se": sim.ess_se}
        tail = {"truncated": sim.truncated_count}
        if not metrics:
            rows.append({**base, "metric": "", "estimate": "", "se": "", **tail})
        for m in metrics:
            if use_is:
                est = estimate_error_is(rule, problem, A, m, None, reps, horizon, args.seed, args.workers, (A.bits, 1))
                rows.append({**base, "metric": est.event, "estimate": est.estimate, "se": est.se, **tail})
            else:
                e, se = sim.metric_estimates[str(Event.parse(m))]
                rows.append({**base, "metric": str(Event.parse(m)), "estimate": e, "se": se, **tail})
    write_csv(out / "simulate.csv", SIMULATE_COLUMNS, rows)
    write_meta(out, "simulate", cfg, args.seed, {"workers_used": args.workers})
    return rows


def cmd_calibrate(args, cfg: dict, out: Path) -> dict:
    problem = _problem(cfg)
    spec = ClassSpec.from_dict(jfield(cfg, "class", "", dict))
    truths = None
    if "truths" in cfg:
        truths = [_config_of(t, f"truths[{i}]") for i, t in enumerate(jfield(cfg, "truths", "", list))]
    res = nonconservative_search(
        spec, problem, target=jfield(cfg, "target", "", float, None), tol=jfield(cfg, "tol", "", float, 0.0),
        reps=_int(cfg, "reps", 10_000), horizon=jfield(cfg, "horizon", "", int, None), seed=args.seed,
        use_is=jfield(cfg, "use_is", "", bool, False), b_lo=jfield(cfg, "b_lo", "", float, 0.1),
        xtol=jfield(cfg, "xtol", "", float, 1e-3), truths=truths, workers=args.workers)
    d = res.to_dict()
    (out / "calibrate.json").write_text(json.dumps(d, indent=2, default=_json_default))
    write_meta(out, "calibrate", cfg, args.seed)
    return d


def cmd_approx(args, cfg: dict, out: Path) -> list[dict]:
    problem = _problem(cfg)
    W = loss_from_dict(jfield(cfg, "loss", "", dict))
    truth = _config_of(jfield(cfg, "truth", "", list, []), "truth")
    alphas = jfield(cfg, "alphas", "", list)
    for i, a in enumerate(alphas):
        if not isinstance(a, (int, float)) or isinstance(a, bool) or not 0 < a < 1:
            raise ValidationError(f"alphas[{i}]: must be a number in (0, 1), got {a!r}")
    rep = analyze(problem, W, truth, sigma_mode=jfield(cfg, "sigma_mode", "", str, "analytic"),
                  n_mc=_int(cfg, "n_mc", 1_000_000, 1000), seed=args.seed)
    if not rep.unique:
        raise NonUniqueError(f"approx: most favorable subset at {truth} is not unique "
                             f"(maximizers {[m.to_list() for m in rep.maximizers]})")
    rows = []
    for a in alphas:
        ap = generic_expansion(abs(math.log(a)), rep.kl_star, rep.h, rep.r)
        rows.append({"alpha": float(a), "fo": ap.fo, "so": ap.so, "kl_star": ap.kl_star, "h": ap.h, "r": ap.r})
    write_csv(out / "approx.csv", APPROX_COLUMNS, rows)
    write_meta(out, "approx", cfg, args.seed, {"h_se": rep.h_se})
    return rows


def walk_from_dict(d: dict, path: str = "walk") -> WalkSpec:
    kind = jfield(d, "kind", path, str)
    if kind == "gaussian":
        mean = jfield(d, "mean", path, list)
        cov = jfield(d, "cov", path, list, None)
        model = GaussianVector(tuple(mean), tuple(map(tuple, cov))) if cov is not None else GaussianVector.iid(mean)
    elif kind == "deterministic":
        model = Deterministic(tuple(jfield(d, "mean", path, list)))
    elif kind == "problem":
        p = Problem.from_dict(jfield(d, "problem", path, dict), f"{path}.problem")
        model = FromProblem(p, _config_of(jfield(d, "truth", path, list, []), f"{path}.truth"),
                            loss_from_dict(jfield(d, "loss", path, dict), f"{path}.loss"))
    else:
        raise ValidationError(f"{path}.kind: unknown walk kind {kind!r}")
    return WalkSpec(model)


def cmd_rwlab(args, cfg: dict, out: Path) -> list[dict]:
    walk = walk_from_dict(jfield(cfg, "walk", "", dict))
    grid = jfield(cfg, "b_grid", "", list)
    rows = residual_report(walk, grid, _int(cfg, "reps", 10_000), args.seed,
                           n_mc=_int(cfg, "n_mc", 1_000_000, 1000),
                           horizon_factor=jfield(cfg, "horizon_factor", "", float, None), workers=args.workers)
    write_csv(out / "rwlab.csv", RWLAB_COLUMNS, rows)
    write_meta(out, "rwlab", cfg, args.seed, {"h": rows[0]["h"], "r_star": rows[0]["r_star"]})
    return rows


def cmd_experiment(args, cfg: dict, out: Path) -> list[dict]:
    name = args.preset or jfield(cfg, "preset", "", str)
    scale = args.scale or jfield(cfg, "scale", "", str, "desk")
    p = preset(name, scale)
    overrides = dict(jfield(cfg, "overrides", "", dict, {}))
    for key in ("reps", "calib_reps", "n_mc"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.alphas:
        overrides["alphas"] = args.alphas
    p = p.with_overrides(**overrides)
    if scale == "paper":
        print(f"warning: paper-scale preset {name} (K={p.K}) may run for hours", file=sys.stderr)
    res = run_experiment(p, seed=args.seed, workers=args.workers)
    stem = f"{name}_{scale}"
    write_csv(out / f"{stem}.csv", EXPERIMENT_COLUMNS, res.rows)
    extra = {"preset": preset_meta(p), "calibrations": res.calibrations, "divergence": res.divergence,
             "unreliable": res.unreliable}
    write_meta(out, stem, cfg, args.seed, extra)
    for fmt, flag in (("svg", args.svg), ("png", args.png)):
        if flag:
            from .plotting import plot_experiment

            plot_experiment(res.rows, out / f"{stem}.{fmt}", title=f"{name} ({scale}): K={p.K}, m0={p.m0}")
    return res.rows


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqmt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"seqmt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=0, help="64-bit seed (default 0)")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for simulation blocks")

    common(sub.add_parser("divergence", help="KL analysis, critical set and h constant at one truth"))
    common(sub.add_parser("simulate", help="ESS and error estimates for one rule"))
    common(sub.add_parser("calibrate", help="simulation-based threshold search"))
    common(sub.add_parser("approx", help="FO/SO approximations over an alpha grid"))
    common(sub.add_parser("rwlab", help="random-walk boundary crossing against its expansions"))
    ex = sub.add_parser("experiment", help="ESS-versus-approximation presets (fig1, fig2a, fig2b, figE)")
    common(ex, config_required=False)
    ex.add_argument("preset", nargs="?", choices=["fig1", "fig2a", "fig2b", "figE"])
    ex.add_argument("--scale", choices=["desk", "paper"])
    ex.add_argument("--reps", type=int)
    ex.add_argument("--calib-reps", dest="calib_reps", type=int)
    ex.add_argument("--n-mc", dest="n_mc", type=int)
    ex.add_argument("--alphas", type=float, nargs="+")
    ex.add_argument("--svg", action="store_true", help="render the three-panel figure as SVG")
    ex.add_argument("--png", action="store_true", help="render the three-panel figure as PNG")
    return parser


COMMANDS = {"divergence": cmd_divergence, "simulate": cmd_simulate, "calibrate": cmd_calibrate,
            "approx": cmd_approx, "rwlab": cmd_rwlab, "experiment": cmd_experiment}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        cfg = load_config(args.config)
        if args.command == "experiment" and not (args.preset or "preset" in cfg):
            raise ValidationError("experiment: give a preset name or a config with a 'preset' field")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
    except ValidationError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (NumericError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    if isinstance(result, dict):
        print(json.dumps(result, indent=2, default=_json_default))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        if result:
            cols = list(result[0].keys())
            w.writerow(cols)
            for r in result:
                w.writerow([r[c] for c in cols])
    return 0


if __name__ == "__main__":
    sys.exit(main())
