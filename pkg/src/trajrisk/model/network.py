"""Hierarchical sequence encoder + DeepFM + dependent multi-head classifier."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor
from ..datagen import CHANNELS, HEADS
from ..preprocess import Batch, PreprocessArtifacts
from .layers import (
    Dropout, batch_norm, encoder, glorot, init_encoder, init_layer_norm, init_linear, linear,
    sinusoidal_table,
)

__all__ = ["ModelConfig", "ModelShapes", "TrajectoryNet", "ForwardOutput", "default_dag",
           "topological_order", "REFERENCE_HEAD"]

REFERENCE_HEAD = "dob90dpd7"


def default_dag() -> List[Tuple[str, str]]:
    """Edges along increasing dob at fixed dpd, plus dpd7 -> dpd30 at fixed dob."""
    edges = [("dob45dpd7", "dob90dpd7"), ("dob90dpd7", "dob120dpd7"), ("dob120dpd7", "dob180dpd7"),
             ("dob90dpd30", "dob120dpd30"), ("dob120dpd30", "dob180dpd30")]
    edges += [(f"dob{d}dpd7", f"dob{d}dpd30") for d in (90, 120, 180)]
    return edges


def topological_order(heads: Sequence[str], edges: Sequence[Tuple[str, str]]) -> List[str]:
    """Kahn's algorithm, ties broken by position in ``heads``; raises on cycles."""
    known = set(heads)
    for a, b in edges:
        if a not in known or b not in known:
            raise ValueError(f"dependency edge ({a}, {b}) names an unknown head")
        if a == b:
            raise ValueError(f"self-dependency on {a}")
    indeg = {h: 0 for h in heads}
    for _, b in edges:
        indeg[b] += 1
    order: List[str] = []
    ready = [h for h in heads if indeg[h] == 0]
    while ready:
        h = ready.pop(0)
        order.append(h)
        for a, b in edges:
            if a == h:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
                    ready.sort(key=list(heads).index)
    if len(order) != len(heads):
        raise ValueError("dependency graph has a cycle")
    return order


@dataclass
class ModelConfig:
    embed_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    head_hidden: int = 32
    dnn_hidden: Tuple[int, int] = (64, 32)
    feature_cls: bool = True
    summary_cls: bool = True
    hierarchical: bool = True
    multi_head: bool = True
    dependency: bool = True
    freeze_dependency: bool = False
    bn_momentum: float = 0.1
    dag: Optional[List[Tuple[str, str]]] = None

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.dnn_hidden = tuple(int(h) for h in self.dnn_hidden)
        if self.dag is not None:
            self.dag = [tuple(e) for e in self.dag]
        topological_order(HEADS, self.edges)

    @property
    def edges(self) -> List[Tuple[str, str]]:
        if not (self.multi_head and self.dependency):
            return []
        return list(default_dag() if self.dag is None else self.dag)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dnn_hidden"] = list(self.dnn_hidden)
        d["dag"] = None if self.dag is None else [list(e) for e in self.dag]
        return d


@dataclass
class ModelShapes:
    """Vocabulary sizes and sequence lengths taken from preprocessing artifacts."""

    static_sizes: List[int]
    channel_sizes: Dict[str, List[int]]
    channel_lengths: Dict[str, int]

    @classmethod
    def from_artifacts(cls, art: PreprocessArtifacts) -> "ModelShapes":
        return cls(art.sizes("static"), {c: art.sizes(c) for c in CHANNELS},
                   {c: art.lengths[c] for c in CHANNELS})

    def to_dict(self) -> dict:
        return asdict(self)


def _offsets(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, H) post-dependency logits
    probs: Tensor  # (B, H)
    fusion: Tensor  # (B, E + C*E), the shared representation
    f_ns: Tensor
    f_seq: Tensor
    bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


class TrajectoryNet:
    """Owns parameters (name -> float64 array) and builds the forward graph.

    ``forward`` is a pure function of parameters, batch and dropout RNG;
    passing a tape records the graph for ``backward``.
    """

    def __init__(self, config: ModelConfig, shapes: ModelShapes, seed: int = 0):
        self.config = config
        self.shapes = shapes
        self.order = topological_order(HEADS, config.edges)
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._init(np.random.default_rng(np.random.SeedSequence([int(seed), 1])))
        t_max = max(shapes.channel_lengths.values()) + 1
        self.positional = sinusoidal_table(t_max, config.embed_dim)

    # -- construction ------------------------------------------------------
    def _init(self, rng: np.random.Generator) -> None:
        cfg, E = self.config, self.config.embed_dim
        P = self.params
        for c in CHANNELS:
            sizes = self.shapes.channel_sizes[c]
            P[f"seq.{c}.tok"] = rng.normal(0.0, 0.1, size=(sum(sizes), E))
            P[f"seq.{c}.cls_feature"] = rng.normal(0.0, 0.1, size=(len(sizes), E))
            P[f"seq.{c}.cls_summary"] = rng.normal(0.0, 0.1, size=(E,))
            init_encoder(P, f"seq.{c}.l1", rng, E, cfg.n_layers, cfg.ffn_mult)
            init_encoder(P, f"seq.{c}.l2", rng, E, cfg.n_layers, cfg.ffn_mult)

        L, K = len(self.shapes.static_sizes), E
        n_tok = sum(self.shapes.static_sizes)
        P["fm.first"] = rng.normal(0.0, 0.1, size=(n_tok, K))
        P["fm.embed"] = rng.normal(0.0, 0.1, size=(n_tok, K))
        h1, h2 = cfg.dnn_hidden
        init_linear(P, "fm.dnn1", rng, L * K, h1)
        init_layer_norm(P, "fm.bn1", h1)
        init_linear(P, "fm.dnn2", rng, h1, h2)
        init_layer_norm(P, "fm.bn2", h2)
        for name, dim in (("fm.bn1", h1), ("fm.bn2", h2)):
            self.buffers[f"{name}.running_mean"] = np.zeros(dim)
            self.buffers[f"{name}.running_var"] = np.ones(dim)
        init_linear(P, "fm.fuse", rng, 2 * K + h2, E)
        init_linear(P, "fm.mlp", rng, E, E)

        F = E + len(CHANNELS) * E
        H = len(HEADS) if cfg.multi_head else 1
        init_linear(P, "heads.hidden", rng, F, H * cfg.head_hidden)
        P["heads.out.w"] = glorot(rng, cfg.head_hidden, H).T.copy()  # (H, hidden)
        P["heads.out.b"] = np.zeros(H)
        if cfg.edges:
            P["heads.dep"] = np.zeros(len(cfg.edges))

    @property
    def trainable(self) -> List[str]:
        names = sorted(self.params)
        if self.config.freeze_dependency:
            names = [n for n in names if n != "heads.dep"]
        return names

    def bind(self, tape: Optional[Tape]) -> Dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        trainable = set(self.trainable)
        return {k: tape.watch(v, k) if k in trainable else Tensor(v) for k, v in self.params.items()}

    # -- sub-modules -------------------------------------------------------
    def encode_channel(self, P, channel: str, tokens: np.ndarray, valid_len: np.ndarray,
                       drop: Dropout) -> Tensor:
        """(B, M, T) tokens -> (B, E) channel vector H_final."""
        cfg, E = self.config, self.config.embed_dim
        B, M, T = tokens.shape
        ids = tokens + _offsets(self.shapes.channel_sizes[channel])[None, :, None]
        time_ok = np.arange(T)[None, :] < valid_len[:, None]  # (B, T)
        pfx = f"seq.{channel}"

        if not cfg.hierarchical:
            x = ad.sum_(ad.embedding_lookup(P[f"{pfx}.tok"], ids), axis=1)  # (B, T, E)
            x = x + self.positional[:T]
            h = encoder(P, f"{pfx}.l1", x, time_ok, cfg.n_layers, cfg.n_heads, drop)
            return ad.relu(drop(_masked_mean(h, time_ok)))

        if cfg.feature_cls:
            n_tok = P[f"{pfx}.tok"].shape[0]
            cls_ids = np.broadcast_to((n_tok + np.arange(M))[None, :, None], (B, M, 1))
            table = ad.concat([P[f"{pfx}.tok"], P[f"{pfx}.cls_feature"]], axis=0)
            x = ad.embedding_lookup(table, np.concatenate([cls_ids, ids], axis=2))  # (B, M, T+1, E)
            x = ad.reshape(x, (B * M, T + 1, E)) + self.positional[:T + 1]
            key_ok = np.concatenate([np.ones((B, 1), bool), time_ok], axis=1)
            key_ok = np.repeat(key_ok, M, axis=0)
            u = encoder(P, f"{pfx}.l1", x, key_ok, cfg.n_layers, cfg.n_heads, drop, first_only=True)
        else:
            x = ad.embedding_lookup(P[f"{pfx}.tok"], ids)
            x = ad.reshape(x, (B * M, T, E)) + self.positional[:T]
            key_ok = np.repeat(time_ok, M, axis=0)
            h = encoder(P, f"{pfx}.l1", x, key_ok, cfg.n_layers, cfg.n_heads, drop)
            u = _masked_mean(h, key_ok)
        u = ad.reshape(u, (B, M, E))

        if cfg.summary_cls:
            cls = ad.broadcast_to(ad.reshape(P[f"{pfx}.cls_summary"], (1, E)), (B, 1, E))
            doc = ad.concat([cls, u], axis=1)  # (B, M+1, E)
            h = encoder(P, f"{pfx}.l2", doc, None, cfg.n_layers, cfg.n_heads, drop, first_only=True)
            h = ad.reshape(h, (B, E))
        else:
            h = ad.mean(encoder(P, f"{pfx}.l2", u, None, cfg.n_layers, cfg.n_heads, drop), axis=1)
        return ad.relu(drop(h))

    def sequential_forward(self, P, batch: Batch, drop: Dropout) -> Tensor:
        missing = [c for c in CHANNELS if c not in batch.tokens]
        if missing:
            raise KeyError(f"batch lacks channels {missing}")
        parts = [self.encode_channel(P, c, batch.tokens[c], batch.valid_len[c], drop) for c in CHANNELS]
        return ad.concat(parts, axis=-1)

    def _static_rows(self, P, name: str, static: np.ndarray) -> Tensor:
        sizes = self.shapes.static_sizes
        if (static < 0).any() or (static >= np.asarray(sizes)[None, :]).any():
            raise IndexError("static token out of range")
        return ad.embedding_lookup(P[name], static + _offsets(sizes)[None, :])  # (B, L, K)

    def fm_first_order(self, P, static: np.ndarray) -> Tensor:
        return ad.sum_(self._static_rows(P, "fm.first", static), axis=1)

    def fm_second_order(self, P, static: np.ndarray) -> Tensor:
        v = self._static_rows(P, "fm.embed", static)
        return fm_pairwise(v)

    def deepfm_forward(self, P, static: np.ndarray, drop: Dropout, training: bool,
                       bn_stats: Dict[str, tuple]) -> Tensor:
        B = static.shape[0]
        first = self.fm_first_order(P, static)
        v = self._static_rows(P, "fm.embed", static)
        second = fm_pairwise(v)
        h = ad.reshape(v, (B, v.shape[1] * v.shape[2]))
        for i in (1, 2):
            h = linear(P, f"fm.dnn{i}", h)
            h, stats = batch_norm(P, f"fm.bn{i}", h, self.buffers, training)
            if stats is not None:
                bn_stats[f"fm.bn{i}"] = stats
            h = drop(ad.relu(h))
        fused = linear(P, "fm.fuse", ad.concat([first, second, h], axis=-1))
        return linear(P, "fm.mlp", ad.relu(fused))

    def head_base_logits(self, P, fusion: Tensor) -> Tensor:
        """c_i(f) for every head: one relu hidden layer per head, evaluated side by side."""
        B = fusion.shape[0]
        n_out = P["heads.out.b"].shape[0]
        hid = ad.relu(linear(P, "heads.hidden", fusion))
        hid = ad.reshape(hid, (B, n_out, self.config.head_hidden))
        return ad.sum_(hid * P["heads.out.w"], axis=-1) + P["heads.out.b"]  # (B, n_out)

    def multihead_forward(self, P, fusion: Tensor) -> Tensor:
        """Per-head MLP logits plus weighted parent logits, in topological order."""
        cfg = self.config
        B = fusion.shape[0]
        c = self.head_base_logits(P, fusion)
        if not cfg.multi_head:
            return ad.matmul(c, np.ones((1, len(HEADS))))
        edges = cfg.edges
        if not edges:
            return c
        idx = {h: i for i, h in enumerate(HEADS)}
        z: Dict[str, Tensor] = {}
        for head in self.order:
            zi = c[:, idx[head]]
            for e, (src, dst) in enumerate(edges):
                if dst == head:
                    zi = zi + P["heads.dep"][e] * z[src]
            z[head] = zi
        return ad.concat([ad.reshape(z[h], (B, 1)) for h in HEADS], axis=1)

    # -- full model --------------------------------------------------------
    def forward(self, batch: Batch, tape: Optional[Tape] = None,
                rng: Optional[np.random.Generator] = None, training: Optional[bool] = None,
                P: Optional[Dict[str, Tensor]] = None) -> ForwardOutput:
        """``rng`` drives dropout; ``training`` (default: rng given) selects batch-stat BN."""
        training = rng is not None if training is None else training
        P = self.bind(tape) if P is None else P
        drop = Dropout(self.config.dropout, rng)
        bn_stats: Dict[str, tuple] = {}
        f_ns = self.deepfm_forward(P, batch.static, drop, training, bn_stats)
        f_seq = self.sequential_forward(P, batch, drop)
        fusion = ad.concat([f_ns, f_seq], axis=-1)
        logits = self.multihead_forward(P, fusion)
        return ForwardOutput(logits, ad.sigmoid(logits), fusion, f_ns, f_seq, bn_stats)

    def update_running_stats(self, bn_stats: Dict[str, tuple]) -> None:
        mom = self.config.bn_momentum
        for name, (mu, var) in bn_stats.items():
            self.buffers[f"{name}.running_mean"] = (1 - mom) * self.buffers[f"{name}.running_mean"] + mom * mu
            self.buffers[f"{name}.running_var"] = (1 - mom) * self.buffers[f"{name}.running_var"] + mom * var

    def predict_proba(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, tape=None, rng=None, training=False).probs.data

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def fm_pairwise(v: Tensor) -> Tensor:
    """0.5 * ((sum_l v_l)^2 - sum_l v_l^2) per embedding dimension; v is (B, L, K)."""
    s = ad.sum_(v, axis=1)
    return (s * s - ad.sum_(v * v, axis=1)) * 0.5


def _masked_mean(h: Tensor, ok: np.ndarray) -> Tensor:
    """Mean over valid positions of (N, S, E); rows with no valid position give zeros."""
    counts = ok.sum(axis=1, keepdims=True)
    w = np.where(ok, 1.0 / np.maximum(counts, 1), 0.0)[:, None, :]  # (N, 1, S)
    n, _, e = h.shape
    return ad.reshape(ad.matmul(w, h), (n, e))
