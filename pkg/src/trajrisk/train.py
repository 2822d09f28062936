"""AdamW optimisation, two-stage training loop, evaluation and checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .augment import augment_sample
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import HEADS
from .losses import LossConfig, total_loss
from .metrics import EvaluationReport, bin_table, head_metrics, psi
from .model.layers import Dropout, glorot
from .model.network import REFERENCE_HEAD, ModelConfig, ModelShapes, TrajectoryNet
from .preprocess import Batch, PreprocessArtifacts, ProcessedSample, collate

__all__ = ["TrainConfig", "AdamW", "clip_grad_norm", "epoch_order", "train_epoch", "pretrain_epoch",
           "predict_samples", "evaluate", "fit", "save_model", "load_model", "TrainResult"]

REF_INDEX = HEADS.index(REFERENCE_HEAD)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 12
    batch_size: int = 64
    grad_clip_norm: float = 5.0
    seed: int = 0
    pretrain_epochs: int = 1
    single_stage: bool = False
    p_aug: float = 0.3
    aug_fraction: float = 0.15

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if not 0.0 <= self.p_aug <= 1.0:
            raise ValueError("p_aug must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class AdamW:
    """Adam with decoupled weight decay; updates parameter arrays in place."""

    def __init__(self, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise FloatingPointError(f"non-finite gradient in {sorted(bad)[:5]}; step aborted")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * params[k]
            params[k] -= self.lr * update

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        self.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before clipping)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(epoch)])).permutation(n)


def _batch_rngs(seed: int, stage: int, epoch: int, index: int):
    ss = np.random.SeedSequence([int(seed), 4, stage, int(epoch), int(index)])
    a, d = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(d)


def _iter_batches(samples: Sequence[ProcessedSample], cfg: TrainConfig, stage: int, epoch: int):
    order = epoch_order(len(samples), cfg.seed, epoch + 1000 * stage)
    for b, start in enumerate(range(0, len(samples), cfg.batch_size)):
        aug_rng, drop_rng = _batch_rngs(cfg.seed, stage, epoch, b)
        chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
        if cfg.p_aug > 0:
            chunk = [augment_sample(s, aug_rng, cfg.p_aug, cfg.aug_fraction) for s in chunk]
        yield b, collate(chunk), drop_rng


def _loss_mask(net: TrajectoryNet, batch: Batch) -> np.ndarray:
    if net.config.multi_head:
        return batch.mask
    only_ref = np.zeros_like(batch.mask)
    only_ref[:, REF_INDEX] = batch.mask[:, REF_INDEX]
    return only_ref


def _optimise(tape: Tape, loss, bound: Dict[str, ad.Tensor], params: Dict[str, np.ndarray],
              optimizer: AdamW, cfg: TrainConfig) -> float:
    raw = ad.backward(tape, loss)
    grads = {k: raw[t.node_id] for k, t in bound.items() if t.requires_grad}
    grads, norm = clip_grad_norm(grads, cfg.grad_clip_norm)
    optimizer.step(params, grads)
    return norm


LogFn = Callable[[dict], None]


def _epoch_summary(records: List[dict]) -> dict:
    used = [r for r in records if not r["skipped"]]
    return {"mean_loss": float(np.mean([r["loss"] for r in used])) if used else None,
            "n_batches": len(records), "n_skipped": len(records) - len(used)}


def train_epoch(net: TrajectoryNet, samples: Sequence[ProcessedSample], cfg: TrainConfig,
                loss_cfg: LossConfig, optimizer: AdamW, epoch: int,
                log: Optional[LogFn] = None) -> dict:
    """One pass of augment -> forward -> loss -> backward -> clip -> AdamW."""
    records = []
    for b, batch, drop_rng in _iter_batches(samples, cfg, 1, epoch):
        tape = Tape()
        bound = net.bind(tape)
        out = net.forward(batch, tape=tape, rng=drop_rng, P=bound)
        loss, rep = total_loss(out.probs, batch.y, _loss_mask(net, batch), out.fusion, tape, loss_cfg)
        rec = {"kind": "batch", "stage": "B", "epoch": epoch, "batch": b, "skipped": rep.skipped,
               "loss": rep.total, "loss_dice": rep.loss_dice, "loss_ft": rep.loss_ft,
               "omega": list(rep.omega), "empty_heads": list(rep.empty_heads)}
        if loss is not None:
            rec["grad_norm"] = _optimise(tape, loss, bound, net.params, optimizer, cfg)
            net.update_running_stats(out.bn_stats)
        records.append(rec)
        if log:
            log(rec)
    return _epoch_summary(records)


def init_pretrain_heads(net: TrajectoryNet, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    E = net.config.embed_dim
    n_seq = E * len(net.shapes.channel_sizes)
    return {"pre.ns.w": glorot(rng, E, 1), "pre.ns.b": np.zeros(1),
            "pre.seq.w": glorot(rng, n_seq, 1), "pre.seq.b": np.zeros(1)}


def pretrain_epoch(net: TrajectoryNet, heads: Dict[str, np.ndarray], samples: Sequence[ProcessedSample],
                   cfg: TrainConfig, loss_cfg: LossConfig, optimizer: AdamW, epoch: int,
                   log: Optional[LogFn] = None) -> dict:
    """Stage A: each sub-module trained through its own temporary linear head on the reference head."""
    records = []
    for b, batch, drop_rng in _iter_batches(samples, cfg, 0, epoch):
        tape = Tape()
        bound = net.bind(tape)
        for k in list(bound):
            if k.startswith("heads."):
                bound[k] = ad.Tensor(net.params[k])
        hb = {k: tape.watch(v, k) for k, v in heads.items()}
        drop = Dropout(net.config.dropout, drop_rng)
        bn_stats: dict = {}
        f_ns = net.deepfm_forward(bound, batch.static, drop, True, bn_stats)
        f_seq = net.sequential_forward(bound, batch, drop)
        y = batch.y[:, REF_INDEX:REF_INDEX + 1]
        m = batch.mask[:, REF_INDEX:REF_INDEX + 1]
        p_ns = ad.sigmoid(ad.matmul(f_ns, hb["pre.ns.w"]) + hb["pre.ns.b"])
        p_seq = ad.sigmoid(ad.matmul(f_seq, hb["pre.seq.w"]) + hb["pre.seq.b"])
        l_ns, r_ns = total_loss(p_ns, y, m, f_ns, tape, loss_cfg)
        l_seq, r_seq = total_loss(p_seq, y, m, f_seq, tape, loss_cfg)
        rec = {"kind": "batch", "stage": "A", "epoch": epoch, "batch": b, "skipped": r_ns.skipped,
               "loss": r_ns.total + r_seq.total, "omega_ns": list(r_ns.omega),
               "omega_seq": list(r_seq.omega)}
        if l_ns is not None:
            merged = dict(bound)
            merged.update(hb)
            store = {**net.params, **heads}  # same arrays, updated in place
            rec["grad_norm"] = _optimise(tape, l_ns + l_seq, merged, store, optimizer, cfg)
            net.update_running_stats(bn_stats)
        records.append(rec)
        if log:
            log(rec)
    return _epoch_summary(records)


def predict_samples(net: TrajectoryNet, samples: Sequence[ProcessedSample],
                    batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities, shape (N, 7) in head order."""
    if not samples:
        return np.zeros((0, len(HEADS)))
    parts = [net.predict_proba(collate(samples[i:i + batch_size]))
             for i in range(0, len(samples), batch_size)]
    return np.concatenate(parts, axis=0)


def evaluate(net: TrajectoryNet, samples: Sequence[ProcessedSample],
             reference_scores: Optional[np.ndarray] = None, n_bins: int = 10,
             probs: Optional[np.ndarray] = None) -> Tuple[EvaluationReport, np.ndarray]:
    """Per-head KS/AUC/Gini on observed labels, PSI against reference scores, bin table."""
    probs = predict_samples(net, samples) if probs is None else probs
    batch = collate(samples)
    heads = {}
    for i, h in enumerate(HEADS):
        obs = batch.mask[:, i] > 0
        heads[h] = head_metrics(probs[obs, i], batch.y[obs, i]) if obs.any() else None
    psis = {}
    if reference_scores is not None and len(reference_scores):
        for i, h in enumerate(HEADS):
            psis[h] = psi(reference_scores[:, i], probs[:, i], n_bins=n_bins)
    obs = batch.mask[:, REF_INDEX] > 0
    table = []
    ys = batch.y[obs, REF_INDEX]
    if obs.any() and 0 < ys.sum() < ys.size:
        table = bin_table(probs[obs, REF_INDEX], ys, n_bins=n_bins)
    return EvaluationReport(heads, psis, table, REFERENCE_HEAD), probs


# -- checkpoints -------------------------------------------------------------

def save_model(path, net: TrajectoryNet, meta: Optional[dict] = None,
               optimizer: Optional[AdamW] = None,
               reference_scores: Optional[np.ndarray] = None) -> Path:
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in net.buffers.items()})
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    if reference_scores is not None:
        arrays["ref/scores"] = reference_scores
    header = {"model_config": net.config.to_dict(), "shapes": net.shapes.to_dict(),
              "dag": [list(e) for e in net.config.edges], "head_order": net.order,
              "adam_t": optimizer.t if optimizer else 0}
    header.update(meta or {})
    return save_checkpoint(path, arrays, header)


def load_model(path) -> Tuple[TrajectoryNet, dict, Dict[str, np.ndarray]]:
    """Returns (net, header meta, remaining arrays such as optimizer state)."""
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    net = TrajectoryNet(cfg, ModelShapes(**meta["shapes"]))
    for k in list(net.params):
        src = arrays.get(f"param/{k}")
        if src is None or src.shape != net.params[k].shape:
            raise ValueError(f"checkpoint {path} lacks parameter {k} with shape {net.params[k].shape}")
        net.params[k] = src.copy()
    for k in list(net.buffers):
        net.buffers[k] = arrays[f"buffer/{k}"].copy()
    rest = {k: v for k, v in arrays.items() if not k.startswith(("param/", "buffer/"))}
    return net, meta, rest


@dataclass
class TrainResult:
    net: TrajectoryNet
    best_epoch: int
    best_ks: Optional[float]
    history: List[dict]
    best_path: Optional[Path] = None
    report: Optional[EvaluationReport] = None
    validation_scores: Optional[np.ndarray] = None


def _snapshot(net: TrajectoryNet):
    return ({k: v.copy() for k, v in net.params.items()}, {k: v.copy() for k, v in net.buffers.items()})


def _key(ks: Optional[float]) -> float:
    return -np.inf if ks is None else ks


def fit(net: TrajectoryNet, train: Sequence[ProcessedSample], valid: Sequence[ProcessedSample],
        cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None, out_dir=None,
        artifacts: Optional[PreprocessArtifacts] = None, resume=None,
        log_path=None, extra_meta: Optional[dict] = None) -> TrainResult:
    """Two-stage training with per-epoch checkpoints and best-by-validation-KS selection.

    With ``out_dir`` set, writes ``epoch_XXX.ckpt`` per epoch plus ``best.ckpt``;
    ``resume`` continues from a checkpoint's epoch up to ``cfg.epochs``.
    """
    loss_cfg = loss_cfg or LossConfig()
    if not train:
        raise ValueError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
    history: List[dict] = []

    def log(rec):
        if log_file:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    meta_base = {"train_config": cfg.to_dict(), "loss_config": loss_cfg.to_dict(),
                 "artifacts_fingerprint": artifacts.fingerprint() if artifacts else None}
    meta_base.update(extra_meta or {})
    optimizer = AdamW.from_config(cfg)
    start, best_epoch, best_ks = 0, 0, None
    best_scores, snapshot = None, None
    try:
        if resume is not None:
            rnet, meta, rest = load_model(resume)
            net.params, net.buffers = rnet.params, rnet.buffers
            optimizer.load_state(rest, meta.get("adam_t", 0))
            start = int(meta["epoch"])
            best_epoch, best_ks = int(meta["best_epoch"]), meta["best_ks"]
            history = list(meta.get("history", []))
            best_scores = rest.get("ref/scores")
            snapshot = _snapshot(net)
            best_file = Path(resume).with_name("best.ckpt")
            if best_epoch != start and best_file.exists():
                bnet, _, brest = load_model(best_file)
                snapshot, best_scores = _snapshot(bnet), brest.get("ref/scores")
        elif not cfg.single_stage and cfg.pretrain_epochs > 0:
            heads = init_pretrain_heads(net, cfg.seed)
            pre_opt = AdamW.from_config(cfg)
            for e in range(cfg.pretrain_epochs):
                summary = pretrain_epoch(net, heads, train, cfg, loss_cfg, pre_opt, e, log)
                rec = {"kind": "epoch", "stage": "A", "epoch": e, **summary}
                history.append(rec)
                log(rec)

        for epoch in range(start + 1, cfg.epochs + 1):
            summary = train_epoch(net, train, cfg, loss_cfg, optimizer, epoch, log)
            report, scores = evaluate(net, valid) if valid else (None, None)
            ks = report.ks_of() if report else None
            rec = {"kind": "epoch", "stage": "B", "epoch": epoch, "val_ks": ks, **summary}
            history.append(rec)
            log(rec)
            improved = best_epoch == 0 or _key(ks) > _key(best_ks)
            if improved:
                best_epoch, best_ks, best_scores = epoch, ks, scores
                snapshot = _snapshot(net)
            if out_dir is not None:
                meta = dict(meta_base, epoch=epoch, best_epoch=best_epoch, best_ks=best_ks,
                            history=history)
                save_model(out_dir / f"epoch_{epoch:03d}.ckpt", net, meta, optimizer, scores)
                if improved:
                    save_model(out_dir / "best.ckpt", net, meta, optimizer, scores)
    finally:
        if log_file:
            log_file.close()

    if snapshot is not None:
        net.params, net.buffers = snapshot
    report = evaluate(net, valid, probs=best_scores)[0] if valid and best_scores is not None else None
    return TrainResult(net, best_epoch, best_ks, history,
                       out_dir / "best.ckpt" if out_dir is not None and best_epoch else None,
                       report, best_scores)
