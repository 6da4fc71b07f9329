"""Command-line entry point: ``ipp-fleet {train,eval,gp-bench,render,selftest}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .harness.config import PLANNERS, ConfigError, ExperimentConfig, load_config

PROG = "ipp-fleet"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value experiment file")
    common.add_argument("--seed", type=int, help="single seed (overrides 'seeds')")
    common.add_argument("--out", help="output directory")
    common.add_argument("--planner", choices=PLANNERS)
    common.add_argument("--agents", type=int, choices=(1, 2, 3))
    common.add_argument("--gt", choices=("wqp", "algae"))
    common.add_argument("--reward", choices=("mu", "sigma"))
    common.add_argument("--checkpoint", help="Q-network checkpoint (planner ddql)")
    common.add_argument("--episodes", type=int, help="episodes per seed (train: total)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog=PROG, description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the shared DDQL policy")
    sub.add_parser("eval", parents=[common], help="evaluate a planner over a seed grid")
    sub.add_parser("gp-bench", parents=[common], help="local vs global GP on RWPP missions")
    sub.add_parser("render", parents=[common], help="render one episode to PNG images")
    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {k: getattr(args, k) for k in ("out", "planner", "agents", "gt", "reward", "checkpoint")
            if getattr(args, k) is not None}
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.episodes is not None:
        over["train_episodes" if args.command == "train" else "episodes"] = args.episodes
    return dataclasses.replace(cfg, **over)


def _train(cfg: ExperimentConfig) -> str:
    from .learner.ddql import run_training
    out = Path(cfg.out)
    _, logs, _ = run_training(cfg.train_config(cfg.seeds[0]), out_dir=out)
    tail = np.mean([r.final_sor for r in logs[-min(20, len(logs)):]])
    return f"trained {len(logs)} episodes; last-20 mean final SoR {tail:.3f}; checkpoint {out / 'policy.ckpt'}"


def _eval(cfg: ExperimentConfig) -> str:
    from .harness.experiments import final_sors, run_eval
    res = run_eval(cfg)
    s = final_sors(res["records"])
    sep = min(r.min_separation for r in res["records"])
    return (f"{cfg.planner}: {len(s)} episodes, final SoR mean {s.mean():.4f} median "
            f"{np.median(s):.4f}, min separation {sep:.0f} m -> {res['files']['summary']}")


def _bench(cfg: ExperimentConfig) -> str:
    from .harness.experiments import gp_bench, improvement_beyond, timing_slopes
    rows = gp_bench(cfg)
    sl, sg = timing_slopes(rows)
    return (f"local vs global: SoR improvement beyond 40 samples {100 * improvement_beyond(rows):.1f}%, "
            f"time slopes local {sl:.2f} global {sg:.2f} -> {Path(cfg.out) / 'gp_bench.csv'}")


def _render(cfg: ExperimentConfig) -> str:
    from .harness.experiments import render_episode
    files = render_episode(cfg)
    return "rendered " + ", ".join(str(f) for f in files.values())


def _selftest(cfg: ExperimentConfig) -> str:
    from .harness.selftest import run_selftest
    if not run_selftest(cfg.seeds[0]):
        raise RuntimeError("selftest failed")
    return "selftest passed"


COMMANDS = {"train": _train, "eval": _eval, "gp-bench": _bench, "render": _render,
            "selftest": _selftest}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        print(COMMANDS[args.command](cfg))
        return 0
    except ConfigError as exc:
        print(f"{PROG}: config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(f"{PROG}: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
