"""Command-line entry point: ``run``, ``eval``, ``sizes``, ``report``, ``config``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .costate import LearnerConfig
from .ddpg import DdpgConfig
from .envgen import random_states
from .nn import load_nets, param_count


def _cmd_run(args) -> int:
    config = harness.RunConfig.load(args.config)
    overrides = {"n_trials": args.trials, "n_rolls": args.rolls, "master_seed": args.seed, "n_jobs": args.jobs}
    config = dataclasses.replace(config, **{k: v for k, v in overrides.items() if v is not None})
    out = args.output or config.output_dir
    report = harness.run_block(config, out)
    print(report.table_text())
    if out:
        print(f"\nwrote curves, checkpoints and summary.json to {out}")
    return 0


def _cmd_eval(args) -> int:
    nets, extra = load_nets(args.checkpoint)
    if args.net not in nets:
        raise SystemExit(f"checkpoint has no network {args.net!r}; found {sorted(nets)}")
    env = harness.env_from_extra(extra)
    rng = np.random.default_rng(args.seed)
    test = random_states(rng, env.n_s, args.n_test)
    noise = rng if env.spec.noise_sigma > 0 else None
    cost = harness.evaluate_policy(nets[args.net], env, test, noise)
    print(json.dumps({"checkpoint": str(args.checkpoint), "net": args.net, "n_test": args.n_test, "seed": args.seed, "mean_cost": cost}))
    return 0


def _cmd_sizes(args) -> int:
    sizes = harness.size_networks(args.n_mu, args.n_est, args.n_s, args.n_a, args.family, args.f_layers)
    out = {"policy": list(sizes.policy.layer_sizes), "n_mu": sizes.n_mu, "n_est": sizes.n_est}
    for name in ("f_hat", "cprime_hat", "critic"):
        spec = getattr(sizes, name)
        if spec is not None:
            out[name] = {"layers": list(spec.layer_sizes), "params": param_count(spec)}
    print(json.dumps(out, indent=2))
    return 0


def _cmd_report(args) -> int:
    rows = harness.rebuild_summary(args.directory)
    if not rows:
        raise SystemExit(f"no curve files under {args.directory}")
    print(f"{'Method':<10}{'trials':>7}{'C_min':>8}{'C_final':>9}")
    for r in rows:
        print(f"{r['method']:<10}{r['n_trials']:>7}{r['c_min']:>8.2f}{r['c_final']:>9.2f}")
    return 0


def _cmd_config(args) -> int:
    config = harness.RunConfig()
    # spell out every learner default so the file documents itself
    for mc in config.methods:
        if mc.method == "DDPG":
            full = dataclasses.asdict(DdpgConfig())
        else:
            full = dataclasses.asdict(LearnerConfig(method=mc.method))
            full.pop("method")
        mc.options = {**full, **mc.options}
    if args.path:
        config.dump(args.path)
    else:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="costate-rl", description="Costate learners, DDPG baseline and benchmark blocks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a block of trials from a JSON config")
    r.add_argument("config", type=Path)
    r.add_argument("-o", "--output", type=Path)
    r.add_argument("--trials", type=int)
    r.add_argument("--rolls", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int)
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpointed policy on its task")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--net", default="policy")
    e.add_argument("--n-test", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sizes", help="solve equal-width layer sizes for parameter targets")
    s.add_argument("--n-mu", type=int, required=True)
    s.add_argument("--n-est", type=int, required=True)
    s.add_argument("--n-s", type=int, required=True)
    s.add_argument("--n-a", type=int, required=True)
    s.add_argument("--family", choices=["costate", "vcf", "ddpg"], default="costate")
    s.add_argument("--f-layers", type=int, default=4)
    s.set_defaults(func=_cmd_sizes)

    rep = sub.add_parser("report", help="rebuild block means from exported curve files")
    rep.add_argument("directory", type=Path)
    rep.set_defaults(func=_cmd_report)

    c = sub.add_parser("config", help="write (or print) a config with every default filled in")
    c.add_argument("path", nargs="?", type=Path)
    c.set_defaults(func=_cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
