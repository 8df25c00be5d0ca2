"""Command-line entry point: ``cfalab <command> [--config F] [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 failed gradient gate, 2 validation error, 3 diverged run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import CfaLabError, DivergedRunError
from ..model import Checkpoint
from ..synthdata import SPLITS, dataset_digest, generate_dataset, load_dataset, save_dataset, split_records
from . import experiments
from .config import TrainConfig, load_config
from .gradcheck import gradcheck_all
from .report import params_text, render_report
from .train import evaluate, train

log = logging.getLogger("cfalab")

EXIT_OK, EXIT_GATE, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _dataset(args, cfg: TrainConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_dataset(cfg.data)


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    log.info("wrote %s", out / name)


def _seeds(args) -> list[int]:
    if args.seeds:
        return args.seeds
    start = args.seed if args.seed is not None else 0
    return list(range(start, start + args.n_seeds))


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    data = cfg.data if args.seed is None else cfg.data.__class__(**{**cfg.data.__dict__, "seed": args.seed})
    records = generate_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(records, out / "dataset.jsonl")
    rows = ["split,n_samples"] + [f"{s},{len(split_records(records, s))}" for s in SPLITS]
    _write(out, "dataset_summary.csv", "\n".join(rows) + f"\ndigest,{dataset_digest(records)}\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    ckpt, hist = train(cfg, _dataset(args, cfg))
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint.json")
    _write(out, "history.csv", hist.to_csv())
    _write(out, "report.csv", hist.reports_csv())
    _write(out, "params.txt", params_text(cfg))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _config(args)
    records = _dataset(args, cfg)
    splits = [args.split] if args.split else [s for s in SPLITS if split_records(records, s)]
    reports = [evaluate(ckpt, s, records) for s in splits]
    _write(Path(args.out), "report.csv", "".join(r.to_csv(header=i == 0) for i, r in enumerate(reports)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = experiments.ablate(cfg, _seeds(args), workers=args.workers, dataset=_dataset(args, cfg))
    out = Path(args.out)
    _write(out, "ablation.csv", table.to_csv())
    _write(out, "ablation_runs.csv", table.runs_csv())
    return EXIT_DIVERGED if len(table.failed()) == len(table.runs) else EXIT_OK


def cmd_data_eff(args) -> int:
    cfg = _config(args)
    table = experiments.data_efficiency(cfg, args.fractions, _seeds(args), workers=args.workers, dataset=_dataset(args, cfg))
    _write(Path(args.out), "data_eff.csv", table.to_csv())
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    table = experiments.sensitivity(cfg, args.grid, _seeds(args), workers=args.workers, dataset=_dataset(args, cfg))
    _write(Path(args.out), "sensitivity.csv", table.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    summary = gradcheck_all(seed=args.seed or 0)
    _write(Path(args.out), "gradcheck.csv", summary.to_csv())
    for objective, param, err in summary.failures():
        log.error("gradient mismatch in %s / %s: max rel err %.3e", objective, param, err)
    return EXIT_OK if summary.passed else EXIT_GATE


def cmd_report(args) -> int:
    out = Path(args.out)
    if not (out / "params.txt").exists():
        _write(out, "params.txt", params_text(_config(args)))
    _write(out, "report.md", render_report(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfalab", description="Calibrated focal-alignment training harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="training seed (gen-data: data seed)")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic dataset as JSON Lines")
    p = add("train", cmd_train, "train one arm")
    p.add_argument("--data", help="dataset.jsonl to train on instead of generating")
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--data")
    for name, fn, help_ in (
        ("ablate", cmd_ablate, "component ablation over seeds"),
        ("data-eff", cmd_data_eff, "frozen+LoRA vs full fine-tune at reduced data"),
        ("sensitivity", cmd_sensitivity, "generation-weight sweep"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--data")
        p.add_argument("--seeds", type=_ints, help="comma-separated seeds (default: --seed onwards)")
        p.add_argument("--n-seeds", type=int, default=5 if name == "ablate" else 3)
        p.add_argument("--workers", type=int, default=1)
        if name == "data-eff":
            p.add_argument("--fractions", type=_floats, default=[1.0, 0.12])
        if name == "sensitivity":
            p.add_argument("--grid", type=_floats, default=[0.1, 0.25, 0.5, 0.75, 1.0])
    add("gradcheck", cmd_gradcheck, "finite-difference gate over every objective")
    add("report", cmd_report, "write report.md from the artifacts in --out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivergedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CfaLabError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
