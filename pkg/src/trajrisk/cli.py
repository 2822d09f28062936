"""Command line entry point: ``trajrisk <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError
from .config import RunConfig, defaults_text
from .gradcheck import run_suite
from .metrics import auc, gini, ks, psi, swap_set_analysis

SUBCOMMANDS = ("generate", "preprocess", "train", "evaluate", "ablate", "gradcheck", "metrics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    epilog = ("Config file: a JSON object with an integer 'seed' and optional sections. "
              "Defaults:\n" + defaults_text())
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--data", metavar="PATH", help="input file or directory")
    common.add_argument("--ckpt", metavar="PATH", help="checkpoint (evaluate; resume for train)")
    common.add_argument("--grid", choices=("bins", "modules"), help="ablation grid")
    common.add_argument("--single-stage", action="store_true", help="skip sub-module pre-training")

    parser = _Parser(prog="trajrisk", description="Synthetic credit-risk trajectory pipeline.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    helps = {
        "generate": "write a synthetic raw dataset (--out DIR)",
        "preprocess": "fit tokenizer, split and write processed data (--data RAW --out DIR)",
        "train": "train and checkpoint (--data PREPROCESSED_DIR --out DIR [--ckpt RESUME])",
        "evaluate": "evaluate a checkpoint (--ckpt PATH --data PREPROCESSED_DIR|JSONL)",
        "ablate": "run an ablation grid (--grid bins|modules --data RAW)",
        "gradcheck": "finite-difference check of primitives and the full model",
        "metrics": "KS/AUC/Gini/PSI/swap on a CSV with score,label[,score_b][,segment]",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name],
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, seed=args.seed)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_score_csv(path) -> dict:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows or "score" not in rows[0] or "label" not in rows[0]:
        raise ValueError(f"{path} must have a header with 'score' and 'label' columns")
    cols = {"score": np.array([float(r["score"]) for r in rows]),
            "label": np.array([int(float(r["label"])) for r in rows])}
    if "score_b" in rows[0]:
        cols["score_b"] = np.array([float(r["score_b"]) for r in rows])
    if "segment" in rows[0]:
        cols["segment"] = np.array([r["segment"] for r in rows])
    return cols


def metrics_report(cols: dict, n_bins: int = 10) -> dict:
    s, y = cols["score"], cols["label"]
    out = {"n": int(y.size), "score": {"ks": ks(s, y), "auc": auc(s, y), "gini": gini(s, y)}}
    if "score_b" in cols:
        b = cols["score_b"]
        out["score_b"] = {"ks": ks(b, y), "auc": auc(b, y), "gini": gini(b, y)}
        out["psi_score_vs_score_b"] = psi(s, b, n_bins=n_bins)
        out["swap"] = swap_set_analysis(s, b, y, n_bins=n_bins)
    if "segment" in cols:
        seg = cols["segment"]
        names = sorted(set(seg.tolist()))
        ref = names[0]
        out["psi_by_segment"] = {"reference": ref,
                                 "psi": {n: psi(s[seg == ref], s[seg == n], n_bins=n_bins) for n in names[1:]}}
    return out


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    from . import pipeline

    if args.command == "gradcheck":
        res = run_suite()
        _emit(res)
        print(f"max rel. error {res['max_rel_error']:.3e} ({'pass' if res['passed'] else 'FAIL'})",
              file=sys.stderr)
        return 0 if res["passed"] else 1
    if args.command == "metrics":
        _need(args, "data")
        n_bins = _config(args).build("eval").psi_bins if (args.config or args.seed is not None) else 10
        report = metrics_report(_read_score_csv(args.data), n_bins)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _emit(report)
        return 0

    cfg = _config(args)
    if args.command == "generate":
        _need(args, "out")
        path = pipeline.run_generate(cfg, args.out)
        _emit({"raw": str(path)})
    elif args.command == "preprocess":
        _need(args, "data", "out")
        tok, train, valid = pipeline.run_preprocess(cfg, args.data, args.out)
        _emit({"n_train": len(train), "n_valid": len(valid), "lengths": tok.artifacts_.lengths})
    elif args.command == "train":
        _need(args, "data", "out")
        res = pipeline.run_train(cfg, args.data, args.out, single_stage=args.single_stage, resume=args.ckpt)
        _emit({"best_epoch": res.best_epoch, "best_val_ks": res.best_ks,
               "checkpoint": str(res.best_path) if res.best_path else None})
    elif args.command == "evaluate":
        _need(args, "ckpt", "data")
        report = pipeline.run_evaluate(cfg, args.ckpt, args.data, args.out)
        _emit(report.to_dict())
    elif args.command == "ablate":
        _need(args, "grid", "data")
        rows = pipeline.run_ablation(cfg, args.data, args.grid, args.out)
        sys.stdout.write(pipeline.format_table(rows))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        _error(exc, "usage")
        return 2
    except CheckpointError as exc:
        _error(exc, "checkpoint")
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        _error(exc, type(exc).__name__)
        return 1


def _error(exc: BaseException, kind: str) -> None:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    sys.stderr.write(json.dumps({"error": str(msg), "type": kind}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
