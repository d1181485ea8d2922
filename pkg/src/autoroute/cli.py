"""``autoroute`` command line: pretrain, run, sweep, ablate, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import gradsuite
from .harness import ExperimentConfig, ablate_ops, apply_overrides, load_config, load_source, parse_fractions, pretrain_source, run_experiment, sweep_samples


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    for key in ("mode", "seed", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if args.config:
        return load_config(args.config, **overrides)
    return apply_overrides(ExperimentConfig(), overrides)


def _source(cfg: ExperimentConfig):
    return None if cfg.mode == "scratch" else load_source(cfg.source_path)[0]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="autoroute", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out-dir", dest="out_dir", help="output root (default $AUTOROUTE_OUT or ./runs)")
        return p

    common(sub.add_parser("pretrain", help="train and freeze the source network"))
    p = common(sub.add_parser("run", help="one target training run"))
    p.add_argument("--mode", choices=["scratch", "fixed", "route", "full"])
    p.add_argument("--seed", type=int)
    p = common(sub.add_parser("sweep", help="training-set fraction sweep"))
    p.add_argument("--mode", choices=["scratch", "fixed", "route", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--fractions", default="0.1..1.0")
    p = common(sub.add_parser("ablate", help="route mode once per aggregation operator"))
    p.add_argument("--seed", type=int)
    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable path")
    p.add_argument("--seeds", type=int, default=20)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "gradcheck":
        worst = gradsuite.run_suite(range(args.seeds))
        failed = False
        for name, err in worst.items():
            ok = err < gradsuite.TOL
            failed |= not ok
            print(f"{'PASS' if ok else 'FAIL'} {name:32s} max rel err {err:.2e}")
        return 1 if failed else 0

    cfg = _config(args)
    if args.command == "pretrain":
        _, mse = pretrain_source(cfg)
        print(json.dumps({"checkpoint": str(cfg.source_path), "test_mse": mse}))
    elif args.command == "run":
        manifest = run_experiment(cfg, _source(cfg))
        print(json.dumps({"run_dir": str(cfg.run_dir), "final_test_mse": manifest["final_test_mse"]}))
    elif args.command == "sweep":
        manifests = sweep_samples(cfg, parse_fractions(args.fractions), _source(cfg))
        for m in manifests:
            print(json.dumps({"fraction": m["config"]["train_fraction"], "final_test_mse": m["final_test_mse"]}))
    elif args.command == "ablate":
        cfg = cfg.replace(mode="route")
        for m in ablate_ops(cfg, source=_source(cfg)):
            print(json.dumps({"op": m["op"], "status": m["status"], "final_test_mse": m["final_test_mse"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
