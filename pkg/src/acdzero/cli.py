"""Command-line entry points: train, eval, ablate, curve.

Exit codes: 0 success, 2 usage or input error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, Variant, config_dict, config_diff, load_config, variant_config
from .evaluate import EvalReport, evaluate
from .metrics import EPISODE_CSV_HEADER, emit_learning_curve, episode_csv_rows
from .model import config_from_params
from .params import CheckpointError
from .sim import ConfigError as SimConfigError, SimConfig
from .trainer import TrainConfig, TrainingAborted, load_stores, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("acdzero")


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(d: dict) -> dict:
    return {k: (v if isinstance(v, (int, float, str, bool)) or v is None else str(v))
            for k, v in d.items()}


def _load(args) -> TrainConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.command != "eval" and args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "episodes", None) is not None:
        cfg = replace(cfg, episodes=args.episodes)
    return cfg.validate()


def _train(cfg: TrainConfig, out: Path, command: str, extra: dict | None = None) -> dict:
    res = train(cfg, out)
    last = res.metrics[-1] if res.metrics else None
    summary = {
        "schema_version": SCHEMA_VERSION, "command": command,
        "config": _jsonable(config_dict(cfg)),
        "rounds": len(res.metrics), "episodes": cfg.episodes, "searches": res.searches,
        "final_mean_reward": last["mean_reward"] if last else None,
        "checkpoints": [p.name for p in res.checkpoints],
        **(extra or {}),
    }
    _write_json(out / "summary.json", summary)
    return summary


def _write_eval(report: EvalReport, out: Path, meta: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_CSV_HEADER)
        w.writerows(episode_csv_rows(report.episodes, report.seeds))
    summary = {"schema_version": SCHEMA_VERSION, **meta, "searches": report.searches,
               "metrics": report.summary}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = _train(cfg, Path(args.out), "train")
    print(json.dumps({"rounds": summary["rounds"], "final_mean_reward": summary["final_mean_reward"]}))
    return EXIT_OK


def run_eval(checkpoint, episodes: int = 100, steps: int = 500, seed: int = 0,
             with_search: bool = False, out=None, sim: SimConfig | None = None,
             search=None, trace=None) -> dict:
    """Evaluate a checkpoint; the defaults follow the 100 x 500 protocol."""
    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    stores = load_stores(path)
    model_cfg = config_from_params(stores[0])
    for s in stores[1:]:
        config_from_params(s)
    kwargs = {} if search is None else {"search": search}
    replays = Path(out) / "replays" if out is not None else None
    report = evaluate(stores, model_cfg, sim or SimConfig(), episodes=episodes, steps=steps,
                      seed=seed, with_search=with_search, replay_dir=replays, trace_path=trace,
                      **kwargs)
    meta = {"command": "eval", "checkpoint": str(path), "episodes": episodes, "steps": steps,
            "seed": seed, "with_search": with_search}
    if out is None:
        return {"schema_version": SCHEMA_VERSION, **meta, "searches": report.searches,
                "metrics": report.summary}
    return _write_eval(report, Path(out), meta)


def cmd_eval(args) -> int:
    if args.trace and not args.with_search:
        raise UsageError("--trace requires --with-search")
    sim = _load(args).sim if args.config else None
    summary = run_eval(args.checkpoint, args.episodes, args.steps, args.seed, args.with_search,
                       args.out, sim, trace=args.trace)
    r = summary["metrics"]["reward"]
    print(json.dumps({"episodes": args.episodes, "reward_mean": r["mean"], "reward_std": r["std"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _load(args)
    cfg = variant_config(base, args.variant)
    out = Path(args.out)
    diff = {k: [a, b] for k, (a, b) in config_diff(base, cfg).items()}
    _train(cfg, out / "train", "ablate", {"variant": args.variant, "delta": diff})
    summary = run_eval(out / "train" / "final.ckpt", args.eval_episodes, args.eval_steps,
                       args.seed if args.seed is not None else cfg.seed, False, out / "eval",
                       cfg.sim)
    r = summary["metrics"]["reward"]
    print(json.dumps({"variant": args.variant, "reward_mean": r["mean"], "reward_std": r["std"]}))
    return EXIT_OK


def cmd_curve(args) -> int:
    if args.window < 1:
        raise UsageError("--window must be positive")
    paths = sorted(glob.glob(args.inputs))
    if not paths:
        raise UsageError(f"no metrics CSVs match {args.inputs}")
    rows = emit_learning_curve(paths, args.window, args.out)
    print(json.dumps({"runs": len(paths), "buckets": len(rows)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acdzero", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy and write checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--episodes", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--steps", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--with-search", action="store_true")
    e.add_argument("--config", help="optional INI file; only its [sim] section is used")
    e.add_argument("--trace", help="write every search simulation to this JSON-lines file")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    a.add_argument("--variant", required=True, choices=[v.value for v in Variant])
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--episodes", type=int)
    a.add_argument("--eval-episodes", type=int, default=100)
    a.add_argument("--eval-steps", type=int, default=500)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("curve", help="bucketed learning curve from metrics CSVs")
    c.add_argument("--in", dest="inputs", required=True, help="glob of metrics.csv files")
    c.add_argument("--window", type=int, default=10)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SimConfigError, CheckpointError) as exc:
        print(f"acdzero {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"acdzero {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
