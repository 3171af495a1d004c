"""Command-line entry points.

Subcommands:
    attack   run the configured attacks on one trial, print the result JSON
    bound    print the Cramer-Rao bound report for one trial
    dp-calc  Gaussian-mechanism (epsilon, delta, sigma^2, sensitivity) math
    sweep    run a grid of trials into results.csv / results.json
    report   aggregate a results.csv into per-defense scores

Configs are JSON files (schema: ExperimentConfig.from_dict, plus
{"base": ..., "grid": ...} for sweeps).  Worker count for sweeps comes
from the GRADLEAK_WORKERS environment variable unless --workers is given.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bounds as bnd
from .activations import make_activation
from .errors import GradleakError
from .harness import ExperimentConfig, aggregate_rows, read_results_csv, run_trial, sweep
from .network import sample_params
from .seeding import derive_seed


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _print_json(obj):
    json.dump(obj, sys.stdout, sort_keys=True, indent=2, default=str)
    sys.stdout.write("\n")


def _experiment_config(args) -> ExperimentConfig:
    spec = _load_config(args.config)
    if args.seed is not None:
        spec["base_seed"] = args.seed
    return ExperimentConfig.from_dict(spec)


def cmd_attack(args) -> int:
    config = _experiment_config(args)
    rec = run_trial(config, args.trial, keep_samples=True)
    _print_json(rec.to_dict())
    return 0


def cmd_bound(args) -> int:
    config = _experiment_config(args)
    rec = run_trial(config, args.trial)
    if rec.bound is None:
        print("bounds disabled in this config", file=sys.stderr)
        return 1
    _print_json(rec.bound)
    return 0


def cmd_dp_calc(args) -> int:
    sens = args.sensitivity
    out = {"epsilon": args.epsilon}
    if sens is None:
        if args.m is None:
            print("need --sensitivity or --m to sample one", file=sys.stderr)
            return 1
        activation = make_activation(args.activation)
        params = sample_params(args.d, args.m, derive_seed(args.seed, 0xD9), activation)
        est = bnd.estimate_sensitivity(params, trials=args.trials, seed=args.seed)
        sens = est.value
        out["sensitivity_sampled_from"] = {"d": args.d, "m": args.m, "trials": est.trials}
    out["sensitivity"] = sens
    if args.sigma2 is not None:
        out["sigma2"] = args.sigma2
        out["delta"] = bnd.dp_delta(args.epsilon, args.sigma2, sens)
    elif args.delta is not None:
        out["delta"] = args.delta
        out["sigma2"] = bnd.required_sigma(args.epsilon, args.delta, sens)
    else:
        print("need --sigma2 (forward) or --delta (inverse)", file=sys.stderr)
        return 1
    lam = bnd.dp_lambda_star(args.epsilon, out["sigma2"], sens)
    out["lambda_star"] = lam
    if lam < 1:
        out["flags"] = ["optimizing moment order below 1; closed form not valid here"]
    _print_json(out)
    return 0


def cmd_sweep(args) -> int:
    spec = _load_config(args.config)
    if args.seed is not None:
        spec.setdefault("base", {})["base_seed"] = args.seed
    res = sweep(spec, args.out, force=args.force, workers=args.workers)
    _print_json({k: str(v) for k, v in res.items()})
    return 0


def cmd_report(args) -> int:
    rows = read_results_csv(Path(args.csv))
    _print_json(aggregate_rows(rows, mode=args.mode, utility_tol=args.utility_tol))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradleak", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("attack", help="single attack trial, result as JSON")
    pa.add_argument("--config", required=True)
    pa.add_argument("--trial", type=int, default=0)
    pa.add_argument("--seed", type=int, default=None)
    pa.set_defaults(fn=cmd_attack)

    pb = sub.add_parser("bound", help="bound report for one trial, as JSON")
    pb.add_argument("--config", required=True)
    pb.add_argument("--trial", type=int, default=0)
    pb.add_argument("--seed", type=int, default=None)
    pb.set_defaults(fn=cmd_bound)

    pd = sub.add_parser("dp-calc", help="Gaussian-mechanism calculator")
    pd.add_argument("--epsilon", type=float, required=True)
    pd.add_argument("--delta", type=float, default=None)
    pd.add_argument("--sigma2", type=float, default=None)
    pd.add_argument("--sensitivity", type=float, default=None)
    pd.add_argument("--d", type=int, default=16)
    pd.add_argument("--m", type=int, default=None, help="sample sensitivity at this width")
    pd.add_argument("--trials", type=int, default=200)
    pd.add_argument("--activation", default="softplus")
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(fn=cmd_dp_calc)

    ps = sub.add_parser("sweep", help="run a config grid")
    ps.add_argument("--config", required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--force", action="store_true")
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--workers", type=int, default=None)
    ps.set_defaults(fn=cmd_sweep)

    pr = sub.add_parser("report", help="aggregate results.csv per defense")
    pr.add_argument("--csv", required=True)
    pr.add_argument("--mode", default="strongest-attack-min",
                    choices=["strongest-attack-min", "paper-eq3-max"])
    pr.add_argument("--utility-tol", type=float, default=None)
    pr.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GradleakError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
