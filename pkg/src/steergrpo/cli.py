"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import experiment
from .config import ConfigError, RunConfig, load_config
from .reward import VARIANTS

log = logging.getLogger("steergrpo")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _variants(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"variants must be drawn from {VARIANTS}, got {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (overrides the config's 'out')")
    common.add_argument("--workers", type=int, default=1, help="cap on worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="steergrpo", description="Safety-steered GRPO on a toy diffusion model")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one configuration")

    s = sub.add_parser("steer-sweep", parents=[common], help="prompt safety scores over an alpha grid")
    s.add_argument("--alphas", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])

    s = sub.add_parser("ablate-reward", parents=[common], help="train every reward variant from one seed")
    s.add_argument("--variants", type=_variants, default=list(VARIANTS))

    s = sub.add_parser("ablate-sampler", parents=[common], help="evaluate a checkpoint over sampler settings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--etas", type=_floats, default=[0.0, 0.5, 1.0])
    s.add_argument("--steps", type=_ints, default=[10, 20, 50])

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or the base model)")
    s.add_argument("--checkpoint", help="parameters to evaluate; the base model when omitted")
    return p


def _load(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = load_config(path)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    return cfg, Path(args.out if args.out else cfg.out)


def _write_csv(path: Path, comments: Sequence[str], rows: list[dict], columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_train(cfg: RunConfig, out: Path, args: argparse.Namespace) -> int:
    summary, _ = experiment.run_training(cfg, out)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_steer_sweep(cfg: RunConfig, out: Path, args: argparse.Namespace) -> int:
    if any(a < 0 for a in args.alphas):
        raise UsageError("alphas must be >= 0")
    rows = experiment.steer_sweep(experiment.build(cfg), args.alphas)
    path = out / "steer_sweep.csv"
    _write_csv(
        path,
        [
            "steer-sweep: prompt safety score s = z . v_safe before and after steering",
            "prompt_id: prompt name; label: ground-truth safe/unsafe; alpha: steering strength",
            "score_before: s of the prompt embedding; score_after: s of normalize(z + alpha v_safe)",
        ],
        rows,
        ["prompt_id", "label", "alpha", "score_before", "score_after"],
    )
    print(path)
    return EXIT_OK


def cmd_ablate_reward(cfg: RunConfig, out: Path, args: argparse.Namespace) -> int:
    rows = experiment.ablate_reward(cfg, args.variants, out, workers=args.workers)
    path = out / "ablate_reward.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema": {
            "variant": "reward variant trained",
            "unsafe_rate": "fraction of samples on unsafe prompts flagged by the oracle",
            "utility_score": "mean plain cosine of safe-prompt samples with their prompt",
        },
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "rows": rows,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(rows))
    return EXIT_OK


def cmd_ablate_sampler(cfg: RunConfig, out: Path, args: argparse.Namespace) -> int:
    if any(not 0 <= e <= 1 for e in args.etas) or any(t < 1 for t in args.steps):
        raise UsageError("etas must lie in [0, 1] and steps must be >= 1")
    setup = experiment.build(cfg)
    ck = experiment.load_params(setup, args.checkpoint)
    rows = experiment.ablate_sampler(setup, ck.params, args.etas, args.steps)
    path = out / "ablate_sampler.csv"
    _write_csv(
        path,
        [
            f"ablate-sampler: checkpoint {args.checkpoint} (step {ck.step})",
            "eta: DDIM stochasticity; T: number of sampling steps",
            "unsafe_rate: flagged fraction on unsafe prompts; utility_score: mean safe-prompt cosine",
        ],
        rows,
        ["eta", "T", "unsafe_rate", "utility_score"],
    )
    print(path)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args: argparse.Namespace) -> int:
    setup = experiment.build(cfg)
    if args.checkpoint:
        params = experiment.load_params(setup, args.checkpoint).params
    else:
        params = setup.base.params
    metrics = experiment.evaluate(setup, params)
    doc = {"checkpoint": args.checkpoint, "T": cfg.schedule.T, "eta": cfg.schedule.eta, **metrics}
    path = out / "eval.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(doc))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "steer-sweep": cmd_steer_sweep,
    "ablate-reward": cmd_ablate_reward,
    "ablate-sampler": cmd_ablate_sampler,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg, out = _load(args)
        return COMMANDS[args.command](cfg, out, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
