"""Command-line front end.

Subcommands: ``gen``, ``dict``, ``search``, ``eval``, ``superlinear``, ``trace``.
Every flag can also come from ``--config file.json`` (keys are the flag
names with dashes replaced by underscores); flags on the command line win.
A manifest with the resolved config, seeds and sha256 of every artifact is
written next to the outputs, and it can itself be passed back as
``--config`` to rerun.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Logs go to
stderr, output paths to stdout.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dictionary import DictionarySolverError, DictSolverConfig, build_setup
from .evaluation import (METHODS, ExperimentConfig, SuperlinearConfig, derive_seeds,
                         prepare_data, run_adaptivity_suite, run_extrapolation,
                         run_standard, run_superlinear_experiment, tune_methods, write_report)
from .hypersearch import GridSpec, grid_search
from .metrics import nmse_db
from .problems import (DatasetError, GenConfig, ProblemSetup, generate_dictionary,
                       generate_instances, load_problem, save_problem)
from .solvers import CgSwitchConfig, HyperParams, NonFiniteIterateError, run_batch

log = logging.getLogger("hyperlista")

REQUIRED = {
    "gen": ["out"],
    "dict": ["input", "out"],
    "search": ["setup", "out"],
    "eval": ["out_dir"],
    "superlinear": ["out_dir"],
    "trace": ["setup", "out"],
}


class UsageError(Exception):
    pass


# -- helpers ----------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, args, artifacts, seeds=None, extra=None) -> str:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "tool": "hyperlista",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seeds": seeds or {},
        "artifacts": {os.fspath(p): sha256_file(p) for p in artifacts},
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return os.fspath(path)


def emit(*paths) -> None:
    for p in paths:
        print(os.fspath(p))


def parse_nonzero(text: str) -> tuple:
    """``gaussian`` or ``constant:<value>``."""
    if text == "gaussian":
        return "gaussian", 1.0
    if text.startswith("constant"):
        _, _, value = text.partition(":")
        try:
            return "constant", float(value) if value else 1.0
        except ValueError:
            raise UsageError(f"bad constant value in --nonzero {text!r}") from None
    raise UsageError(f"--nonzero must be 'gaussian' or 'constant:<value>', got {text!r}")


def load_grid(args) -> GridSpec:
    if args.grid in (None, "default"):
        grid = GridSpec()
    else:
        with open(args.grid) as fh:
            grid = GridSpec.from_dict(json.load(fh))
    changes = {}
    if args.coarse_points is not None:
        changes["coarse_points"] = args.coarse_points
    if args.fine_points is not None:
        changes["fine_points"] = args.fine_points
    if args.minibatch is not None:
        changes["minibatch_size"] = args.minibatch
    for axis in ("c1", "c2", "c3"):
        value = getattr(args, f"{axis}_range", None)
        if value is not None:
            lo, hi = (float(v) for v in value.split(":"))
            changes[f"{axis}_range"] = (lo, hi)
    if changes:
        grid = GridSpec.from_dict({**grid.to_dict(), **changes})
    return grid


def load_hp(path) -> HyperParams:
    with open(path) as fh:
        d = json.load(fh)
    if "hyperparams" in d:
        return HyperParams.from_dict(d["hyperparams"])
    return HyperParams.from_dict(d)


def _require_built(setup: ProblemSetup, path) -> None:
    if not setup.is_built:
        raise DatasetError(f"{path} has no W / mu; run the dict subcommand first")


# -- subcommands --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    mode, value = parse_nonzero(args.nonzero)
    snr = None if args.noiseless or args.snr is None else args.snr
    dict_seed, inst_seed = derive_seeds(args.seed, 2)
    if args.dict_seed is not None:
        dict_seed = args.dict_seed
    cfg = GenConfig(args.m, args.n, args.p, args.sigma, snr, mode, value, inst_seed, args.count)
    A = generate_dictionary(args.m, args.n, dict_seed)
    setup = ProblemSetup.from_dictionary(A)
    instances = generate_instances(setup, cfg)
    meta = {"gen": cfg.to_dict(), "dictionary_seed": dict_seed, "master_seed": args.seed}
    save_problem(args.out, setup, instances, meta)
    sidecar = args.out + ".json"
    log.info("wrote %d instances of size %dx%d to %s", len(instances), args.m, args.n, args.out)
    manifest = write_manifest(args.out + ".manifest.json", args, [args.out, sidecar],
                              seeds={"master": args.seed, "dictionary": dict_seed,
                                     "instances": inst_seed})
    emit(args.out, sidecar, manifest)
    return 0


def cmd_dict(args) -> int:
    data = load_problem(args.input)
    cfg = DictSolverConfig(
        zeta0=args.zeta0, alpha0=args.alpha0, shrink_factor=args.shrink_factor,
        inner_tol=args.inner_tol, outer_tol=args.outer_tol, max_iters=args.max_iters)
    setup, report = build_setup(data.setup.A, cfg, return_report=True)
    meta = dict(data.meta)
    meta["dictionary_solver"] = {"config": asdict(cfg),
                                 "f1": report.f1, "f2": report.f2, "mu": setup.mu,
                                 "iterations": report.iterations,
                                 "converged": report.converged}
    save_problem(args.out, setup, data.instances, meta)
    outputs = [args.out, args.out + ".json"]
    if args.history:
        report.write_history_csv(args.history)
        outputs.append(args.history)
    log.info("f1=%.10g f2=%.10g mu=%.6f iterations=%d converged=%s",
             report.f1, report.f2, setup.mu, report.iterations, report.converged)
    if not report.converged:
        log.warning("dictionary solver stopped at max_iters without meeting the f1/f2 test")
    manifest = write_manifest(args.out + ".manifest.json", args, outputs,
                              extra={"converged": report.converged, "f1": report.f1,
                                     "f2": report.f2, "mu": setup.mu,
                                     "iterations": report.iterations})
    emit(*outputs, manifest)
    return 0


def cmd_search(args) -> int:
    setup_data = load_problem(args.setup)
    _require_built(setup_data.setup, args.setup)
    train = load_problem(args.train) if args.train else setup_data
    if not train.instances:
        raise DatasetError("training file holds no instances")
    if (train.setup.m, train.setup.n) != (setup_data.setup.m, setup_data.setup.n) or \
            not np.array_equal(train.setup.A, setup_data.setup.A):
        raise DatasetError("training instances were generated for a different dictionary")
    grid = load_grid(args)
    base = HyperParams(1.0, 0.0, 0.0, layers=args.layers, p_mode=args.p_mode,
                       cg=CgSwitchConfig(mode=args.cg))
    seed = train.meta.get("gen", {}).get("seed")
    report = grid_search(setup_data.setup, train.instances, grid, base=base,
                         threads=args.threads, tuning_seed=seed, convention=args.convention)
    report.write_json(args.out)
    outputs = [args.out]
    if args.csv:
        report.write_csv(args.csv)
        outputs.append(args.csv)
    c1, c2, c3 = report.best_triple
    log.info("best (c1, c2, c3) = (%g, %g, %g) at %.4f dB", c1, c2, c3, report.best_score)
    manifest = write_manifest(args.out + ".manifest.json", args, outputs,
                              seeds={"tuning": seed})
    emit(*outputs, manifest)
    return 0


def _experiment_config(args, setup) -> ExperimentConfig:
    m, n = (setup.m, setup.n) if setup is not None else (args.m, args.n)
    counts = tuple(int(c) for c in args.counts.split(",")) if args.counts else None
    if counts is not None and len(counts) != 3:
        raise UsageError("--counts takes train,validation,test")
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    layers_test = args.layers if args.layers is not None else args.layers_train
    return ExperimentConfig(
        m=m, n=n, sparsity_p=args.p, magnitude_sigma=args.sigma, snr_db=args.snr,
        profile=args.profile, methods=methods, layers_train=args.layers_train,
        layers_test=layers_test, seed=args.seed, grid=load_grid(args),
        convention=args.convention, p_mode=args.p_mode, threads=args.threads, counts=counts)


def cmd_eval(args) -> int:
    setup = None
    if args.setup:
        setup = load_problem(args.setup).setup
        _require_built(setup, args.setup)
    config = _experiment_config(args, setup)
    if args.suite == "extrapolate" and config.layers_test < config.layers_train:
        raise UsageError("--layers must be at least --layers-train for extrapolation")
    data = prepare_data(config, setup, with_validation=args.suite == "standard")
    hp = load_hp(args.hp) if args.hp else None
    tuned = tune_methods(data.setup, data.train, config, hp=hp)
    runner = {"standard": run_standard, "adaptivity": run_adaptivity_suite,
              "extrapolate": run_extrapolation}[args.suite]
    curves, tuned = runner(data.setup, config, data=data, tuned=tuned)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for c in curves:
        name = f"{args.suite}_{c.config_label}_{c.meta['method']}.csv".replace("=", "")
        c.write_csv(out / name)
        outputs.append(out / name)
        log.info("%-40s %-12s final %.3f dB", c.method_label, c.config_label, c.final)
    payload = {"suite": args.suite, "config": config.to_dict(), "tuned": tuned.to_dict(),
               "curves": [c.to_dict() for c in curves]}
    if args.suite == "standard" and tuned.hp is not None and data.validation:
        run = run_batch(data.setup, data.validation, hp=tuned.hp, record=False,
                        on_nonfinite="zero")
        X = np.stack([i.x_star for i in data.validation])
        payload["validation_final_nmse_db_mean"] = float(np.mean(nmse_db(run.finals, X)))
    report = out / f"{args.suite}_report.json"
    write_report(report, payload)
    outputs.append(report)
    manifest = write_manifest(out / f"{args.suite}_manifest.json", args, outputs,
                              seeds=config.seeds)
    emit(*outputs, manifest)
    return 0


def cmd_superlinear(args) -> int:
    hp = None
    if args.hp:
        loaded = load_hp(args.hp)
        hp = (loaded.c1, loaded.c2)
    cfg = SuperlinearConfig(dictionary_seed=args.dict_seed, tuning_seed=args.tuning_seed,
                            test_seed=args.test_seed, test_count=args.count,
                            max_iterations=args.max_iterations, hp=hp, threads=args.threads)
    result = run_superlinear_experiment(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    single, mean = out / "superlinear_single.csv", out / "superlinear_mean.csv"
    result.single_curve.write_csv(single)
    result.mean_curve.write_csv(mean)
    report = out / "superlinear_report.json"
    write_report(report, {"config": cfg.to_dict(), **result.to_dict()})
    pre, post = result.single_rates()
    log.info("reach rate %.2f, ablation reached %d, single switch at %s (%.2f -> %.2f dB/step)",
             result.reach_rate, result.ablation_reached, result.single_switch, pre, post)
    manifest = write_manifest(out / "superlinear_manifest.json", args, [single, mean, report],
                              seeds={"dictionary": cfg.dictionary_seed,
                                     "tuning": cfg.tuning_seed, "test": cfg.test_seed})
    emit(single, mean, report, manifest)
    return 0


def cmd_trace(args) -> int:
    data = load_problem(args.setup)
    _require_built(data.setup, args.setup)
    if not 0 <= args.index < len(data.instances):
        raise DatasetError(f"instance index {args.index} outside [0, {len(data.instances)})")
    inst = data.instances[args.index]
    if args.hp:
        hp = load_hp(args.hp)
    else:
        if args.c1 is None:
            raise UsageError("trace needs --hp or --c1/--c2/--c3")
        hp = HyperParams(args.c1, args.c2, args.c3, p_mode=args.p_mode)
    cg = CgSwitchConfig(mode=args.cg, stability_window=args.window,
                        support_filter=args.support_filter)
    hp = hp.with_(layers=args.layers if args.layers is not None else hp.layers, cg=cg)
    trace = run_batch(data.setup, [inst], hp=hp).traces[0]
    db = nmse_db(trace.iterates, np.broadcast_to(inst.x_star, trace.iterates.shape))
    csv_path, json_path = args.out + ".csv", args.out + ".json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "nmse_db", "theta", "gamma", "beta", "p", "phase"])
        w.writerow([0, repr(float(db[0])), "", "", "", "", "init"])
        for k in range(1, trace.steps + 1):
            phase = trace.phase_labels[k - 1]
            if k <= len(trace.params):
                lp = trace.params[k - 1]
                row = [repr(lp.theta), repr(lp.gamma), repr(lp.beta), lp.p]
            else:
                row = ["", "", "", ""]
            w.writerow([k, repr(float(db[k])), *row, phase])
    payload = {
        "hp": hp.to_dict(), "index": args.index, "cg_switch_layer": trace.cg_switch_layer,
        "warnings": trace.warnings,
        "params": [[p.theta, p.gamma, p.beta, p.p] for p in trace.params],
        "phase_labels": trace.phase_labels, "nmse_db": [float(v) for v in db],
    }
    write_report(json_path, payload)
    manifest = write_manifest(args.out + ".manifest.json", args, [csv_path, json_path])
    emit(csv_path, json_path, manifest)
    return 0


# -- parser ---------------------------------------------------------------------------------

def _add_grid_flags(p):
    p.add_argument("--grid", default="default", help="'default' or a JSON GridSpec file")
    p.add_argument("--coarse-points", type=int)
    p.add_argument("--fine-points", type=int)
    p.add_argument("--minibatch", type=int, help="tuning minibatch size")
    for axis in ("c1", "c2", "c3"):
        p.add_argument(f"--{axis}-range", metavar="LO:HI")
    p.add_argument("--convention", choices=("ratio", "mean_db"), default="ratio",
                   help="NMSE averaging: dB of mean ratio, or mean of dB values")
    p.add_argument("--p-mode", choices=("fraction", "count"), default="fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperlista", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values (or a manifest)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for grid cells; 1 is fully serial")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--m", type=int, default=250)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--p", type=float, default=0.1, help="Bernoulli support probability")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--snr", type=float, help="SNR in dB (omit for noiseless)")
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--nonzero", default="gaussian", help="gaussian or constant:<value>")
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict-seed", type=int, help="override the derived dictionary seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dict", parents=[common], help="solve for W, D, G and mu")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    d = DictSolverConfig()
    p.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--zeta0", type=float, default=d.zeta0)
    p.add_argument("--alpha0", type=float, default=d.alpha0)
    p.add_argument("--shrink-factor", type=float, default=d.shrink_factor)
    p.add_argument("--inner-tol", type=float, default=d.inner_tol)
    p.add_argument("--outer-tol", type=float, default=d.outer_tol)
    p.add_argument("--history", help="CSV of f1/f2/alpha/zeta per iteration")
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("search", parents=[common], help="grid search over (c1, c2, c3)")
    p.add_argument("--setup")
    p.add_argument("--train", help="training dataset (defaults to the setup file)")
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--cg", choices=("off", "p_threshold", "support_stable"), default="off")
    p.add_argument("--out")
    p.add_argument("--csv", help="write every evaluation as CSV")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="run an experiment suite")
    p.add_argument("--suite", choices=("standard", "adaptivity", "extrapolate"),
                   default="standard")
    p.add_argument("--setup", help="built setup file; otherwise a dictionary is generated")
    p.add_argument("--hp", help="search report or HyperParams JSON; skips the search")
    p.add_argument("--m", type=int, default=250)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--snr", type=float)
    p.add_argument("--profile", choices=("quick", "full"), default="quick")
    p.add_argument("--counts", help="train,validation,test sizes overriding the profile")
    p.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--layers-train", type=int, default=16)
    p.add_argument("--layers", type=int, help="test depth (default: --layers-train)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("superlinear", parents=[common], help="CG hand-over experiment")
    s = SuperlinearConfig()
    p.add_argument("--dict-seed", type=int, default=s.dictionary_seed)
    p.add_argument("--tuning-seed", type=int, default=s.tuning_seed)
    p.add_argument("--test-seed", type=int, default=s.test_seed)
    p.add_argument("--count", type=int, default=s.test_count)
    p.add_argument("--max-iterations", type=int, default=s.max_iterations)
    p.add_argument("--hp", help="use these c1, c2 instead of searching")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_superlinear)

    p = sub.add_parser("trace", parents=[common], help="per-layer dump for one instance")
    p.add_argument("--setup")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--hp")
    p.add_argument("--c1", type=float)
    p.add_argument("--c2", type=float, default=0.0)
    p.add_argument("--c3", type=float, default=0.0)
    p.add_argument("--p-mode", choices=("fraction", "count"), default="fraction")
    p.add_argument("--layers", type=int)
    p.add_argument("--cg", choices=("off", "p_threshold", "support_stable"), default="off")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--support-filter", type=float, default=0.1)
    p.add_argument("--out", help="output prefix; writes <out>.csv and <out>.json")
    p.set_defaults(func=cmd_trace)
    return parser


def _apply_config_file(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {args.config}: {exc}")
    if "config" in values and "command" in values:  # a manifest
        values = values["config"]
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known - {"command", "func"})
    if unknown:
        parser.error(f"unknown keys in --config: {', '.join(unknown)}")
    sub.set_defaults(**{k: v for k, v in values.items() if k in known and k != "config"})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + ("in" if k == "input" else k.replace("_", "-")) for k in missing)
        parser.error(f"{args.command}: missing required {flags}")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hyperlista {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, DictionarySolverError, NonFiniteIterateError, ValueError,
            OSError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"hyperlista {args.command}: {code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
