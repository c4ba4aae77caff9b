"""Command-line entry point: ``siba <verb> --config CFG --out-dir DIR``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, shipped_configs, validate_config
from .pipeline import Pipeline, StageFailed, run_ablation, run_transfer_grid

VERBS = ("synthesize", "poison", "train", "evaluate", "defend", "run", "ablate", "transfer")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="YAML config path or shipped config name (%s)" % ", ".join(shipped_configs()))
    common.add_argument("--out-dir", type=Path, default=None, help="run directory (default: runs/<experiment_id>)")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda")
    common.add_argument("--resume", action="store_true",
                        help="continue in an out-dir created by a different config, reusing matching stages")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="siba", description="Sparse invisible backdoor toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synthesize", parents=[common], help="train the surrogate and synthesize the trigger")
    p = sub.add_parser("poison", parents=[common], help="build the poisoned training set")
    p.add_argument("--export-images", action="store_true", help="also write class folders + manifest.csv")
    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--role", choices=("surrogate", "victim", "clean"), default="victim")
    sub.add_parser("evaluate", parents=[common], help="train the victim and write metrics.csv")
    p = sub.add_parser("defend", parents=[common], help="run defenses against the victim")
    p.add_argument("--defense", action="append", choices=("strip", "scale_up", "fine_prune", "neural_cleanse"),
                   help="defense to run (repeatable; default: config defenses.enabled)")
    sub.add_parser("run", parents=[common], help="full pipeline including enabled defenses")
    p = sub.add_parser("ablate", parents=[common], help="sweep the single axis declared under 'sweep'")
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("transfer", parents=[common], help="surrogate x victim architecture grid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--architectures", nargs="+", default=None)
    return parser


def _resolve_config(args):
    config = load_config(args.config)
    updates = {k: v for k, v in (("seed", args.seed), ("device", args.device)) if v is not None}
    if updates:
        config = validate_config({**config.to_dict(), **updates})
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = _resolve_config(args)
        out_dir = args.out_dir or Path("runs") / config.experiment_id
        if args.verb == "ablate":
            print(run_ablation(config, out_dir, jobs=args.jobs, resume=args.resume))
            return 0
        if args.verb == "transfer":
            print(run_transfer_grid(config, out_dir, args.architectures, jobs=args.jobs, resume=args.resume))
            return 0

        pipe = Pipeline(config, out_dir, resume=args.resume)
        pipe.prepare()
        if args.verb == "synthesize":
            print(pipe.trigger())
        elif args.verb == "poison":
            print(pipe.poison(export_images=args.export_images))
        elif args.verb == "train":
            print({"surrogate": pipe.surrogate, "victim": pipe.victim, "clean": pipe.clean_model}[args.role]())
        elif args.verb == "evaluate":
            pipe.evaluate()
            print(out_dir / "metrics.csv")
        elif args.verb == "defend":
            for name, path in pipe.defend(args.defense).items():
                print(f"{name}: {path}")
        else:
            pipe.run()
            print(out_dir / "metrics.csv")
        result = pipe.result
        print(f"stages: {result.cache_hits} cache hits, {result.computed} computed", file=sys.stderr)
        return 0
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
