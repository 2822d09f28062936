"""End-to-end stages shared by the command line and the estimator."""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .checkpoint import CheckpointError
from .config import RunConfig
from .datagen import read_dataset, write_dataset
from .metrics import EvaluationReport
from .model.network import ModelShapes, TrajectoryNet
from .preprocess import (
    PreprocessArtifacts, ProcessedSample, TrajectoryTokenizer, read_processed, train_validation_split,
    write_processed,
)
from .train import TrainResult, evaluate, fit, load_model

__all__ = ["ARTIFACTS", "TRAIN_FILE", "VALID_FILE", "RAW_FILE", "MODULE_GRID", "BIN_GRID",
           "run_generate", "run_preprocess", "load_processed", "run_train", "run_evaluate",
           "run_ablation", "format_table"]

RAW_FILE = "users.jsonl"
ARTIFACTS = "artifacts.json"
TRAIN_FILE = "train.jsonl"
VALID_FILE = "valid.jsonl"

# (feature CLS, summary CLS, multi-head, dependency, label) in the order of the module ablation
MODULE_GRID = (
    (True, True, True, True, "full"),
    (True, False, True, True, "no_summary_cls"),
    (False, False, True, True, "transformer"),
    (False, True, True, True, "no_feature_cls"),
    (True, True, True, False, "no_dependency"),
    (True, True, False, False, "single_head"),
)
BIN_GRID = (8, 16, 32, 64)


def run_generate(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / RAW_FILE
    write_dataset(cfg.build("generator"), path)
    cfg.echo(out_dir)
    return path


def _raw_path(data) -> Path:
    p = Path(data)
    return p / RAW_FILE if p.is_dir() else p


def split_and_fit(cfg: RunConfig, pairs: Sequence, n_bins: Optional[int] = None):
    pre = cfg.build("preprocess")
    train, valid = train_validation_split(pairs, pre.validation_fraction, cfg.seed)
    tok = TrajectoryTokenizer(n_bins=pre.n_bins if n_bins is None else n_bins,
                              length_quantile=pre.length_quantile, length_caps=pre.length_caps)
    tok.fit(train)
    return tok, tok.transform(train), tok.transform(valid)


def run_preprocess(cfg: RunConfig, data, out_dir) -> Tuple[TrajectoryTokenizer, list, list]:
    path = _raw_path(data)
    if not path.exists():
        raise FileNotFoundError(f"raw dataset not found: {path}")
    pairs = list(read_dataset(path))
    tok, train, valid = split_and_fit(cfg, pairs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tok.save(out_dir / ARTIFACTS)
    write_processed(train, out_dir / TRAIN_FILE)
    write_processed(valid, out_dir / VALID_FILE)
    cfg.echo(out_dir)
    return tok, train, valid


def load_processed(data) -> Tuple[PreprocessArtifacts, List[ProcessedSample], List[ProcessedSample]]:
    d = Path(data)
    if not d.is_dir():
        raise FileNotFoundError(f"preprocessed directory not found: {d}")
    for name in (ARTIFACTS, TRAIN_FILE, VALID_FILE):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing {d / name}; run the preprocess step first")
    return PreprocessArtifacts.load(d / ARTIFACTS), read_processed(d / TRAIN_FILE), read_processed(d / VALID_FILE)


def build_net(cfg: RunConfig, artifacts: PreprocessArtifacts, **model_overrides) -> TrajectoryNet:
    return TrajectoryNet(cfg.build("model", **model_overrides), ModelShapes.from_artifacts(artifacts),
                         seed=cfg.seed)


def train_samples(cfg: RunConfig, artifacts, train, valid, out_dir=None, single_stage: bool = False,
                  resume=None, model_overrides: Optional[dict] = None,
                  train_overrides: Optional[dict] = None) -> TrainResult:
    tcfg = cfg.build("train", **(train_overrides or {}))
    if single_stage:
        tcfg.single_stage = True
    net = build_net(cfg, artifacts, **(model_overrides or {}))
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return fit(net, train, valid, tcfg, cfg.build("loss"), out_dir=out_dir, artifacts=artifacts,
               resume=resume, log_path=log_path)


def run_train(cfg: RunConfig, data, out_dir, single_stage: bool = False, resume=None) -> TrainResult:
    artifacts, train, valid = load_processed(data)
    result = train_samples(cfg, artifacts, train, valid, out_dir, single_stage, resume)
    summary = {"best_epoch": result.best_epoch, "best_val_ks": result.best_ks,
               "checkpoint": result.best_path.name if result.best_path else None,
               "report": result.report.to_dict() if result.report else None}
    (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    cfg.echo(out_dir)
    return result


def run_evaluate(cfg: RunConfig, ckpt, data, out_dir=None) -> EvaluationReport:
    net, meta, rest = load_model(ckpt)
    d = Path(data)
    if d.is_dir():
        artifacts, _, samples = load_processed(d)
        fp = meta.get("artifacts_fingerprint")
        if fp is not None and fp != artifacts.fingerprint():
            raise CheckpointError(f"checkpoint {ckpt} was trained on different preprocessing artifacts")
    else:
        samples = read_processed(d)
    ev = cfg.build("eval")
    report, _ = evaluate(net, samples, reference_scores=rest.get("ref/scores"), n_bins=ev.psi_bins)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        cfg.echo(out)
    return report


def _row(report: Optional[EvaluationReport]) -> dict:
    m = report.heads.get(report.reference_head) if report else None
    if m is None:
        return {"ks": None, "auc": None, "gini": None}
    return {"ks": m["ks"], "auc": m["auc"], "gini": m["gini"]}


def run_ablation(cfg: RunConfig, data, grid: str, out_dir=None) -> List[dict]:
    """Bin-count grid (re-preprocesses per count) or the six-row module toggle grid."""
    path = _raw_path(data)
    if not path.exists():
        raise FileNotFoundError(f"raw dataset not found: {path}")
    pairs = list(read_dataset(path))
    rows = []
    lr = cfg.build("train").lr
    if grid == "bins":
        for n_bins in BIN_GRID:
            tok, train, valid = split_and_fit(cfg, pairs, n_bins=n_bins)
            res = train_samples(cfg, tok.artifacts_, train, valid)
            rows.append({"config": f"bins={n_bins}", "n_bins": n_bins, "lr": lr, **_row(res.report)})
    elif grid == "modules":
        tok, train, valid = split_and_fit(cfg, pairs)
        for fcls, scls, mh, dep, label in MODULE_GRID:
            overrides = {"feature_cls": fcls, "summary_cls": scls, "multi_head": mh, "dependency": dep,
                         "hierarchical": label != "transformer"}
            res = train_samples(cfg, tok.artifacts_, train, valid, model_overrides=overrides)
            rows.append({"config": label, "feature_cls": fcls, "summary_cls": scls, "multi_head": mh,
                         "dependency": dep, **_row(res.report)})
    else:
        raise ValueError(f"unknown grid '{grid}' (expected 'bins' or 'modules')")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{grid}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        (out / f"ablation_{grid}.txt").write_text(format_table(rows), encoding="utf-8")
        cfg.echo(out)
    return rows


def format_table(rows: List[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(v):
        if v is None:
            return "n/a"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [cols] + [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n"
