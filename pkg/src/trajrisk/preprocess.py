"""Tokenization of raw trajectories into fixed-shape integer matrices.

Categorical values map through frequency-ordered vocabularies, numeric values
through equal-frequency bins; both reserve 0 for padding and 1 for
missing/unseen values. Each channel is cut to the 95th percentile of
training lengths (bounded by a per-channel cap), keeping the newest events.
"""
from __future__ import annotations

import hashlib
import json
import numbers
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .datagen import CHANNELS, HEADS, LabelSet, RawUser
from .validation import check_fitted

__all__ = [
    "PAD",
    "OOV",
    "DEFAULT_CAPS",
    "Vocab",
    "BinSpec",
    "PreprocessArtifacts",
    "ProcessedSample",
    "Batch",
    "train_validation_split",
    "TrajectoryTokenizer",
    "collate",
    "sample_to_record",
    "record_to_sample",
    "write_processed",
    "read_processed",
]

PAD = 0
OOV = 1
DEFAULT_CAPS = {"credit_report": 120, "credit_inquiry": 60, "loan_behavior": 120}
ARTIFACT_VERSION = 1


@dataclass
class Vocab:
    token_of: Dict[str, int]

    @classmethod
    def fit(cls, values: Iterable) -> "Vocab":
        counts = Counter(str(v) for v in values if v is not None)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls({k: i + 2 for i, (k, _) in enumerate(ordered)})

    @property
    def size(self) -> int:
        return len(self.token_of) + 2

    def encode(self, value) -> int:
        if value is None:
            return OOV
        return self.token_of.get(str(value), OOV)


@dataclass
class BinSpec:
    edges: np.ndarray
    n_bins: int = 8

    @classmethod
    def fit(cls, values: Sequence[float], n_bins: int = 8) -> "BinSpec":
        v = np.asarray([x for x in values if x is not None], dtype=np.float64)
        if v.size == 0 or n_bins < 2:
            return cls(np.array([]), n_bins)
        edges = np.unique(np.quantile(v, np.arange(1, n_bins) / n_bins))
        # an edge at the maximum would leave an empty top bin
        return cls(edges[edges < v.max()], n_bins)

    @property
    def size(self) -> int:
        return self.edges.size + 3  # bins + PAD + OOV

    def encode(self, value) -> int:
        if value is None:
            return OOV
        x = float(value)
        if not np.isfinite(x):
            return OOV
        # edges are inclusive upper bounds
        return int(np.searchsorted(self.edges, x, side="left")) + 2

    def encode_many(self, values: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.edges, values, side="left") + 2


def _is_numeric(values) -> bool:
    seen = False
    for v in values:
        if v is None:
            continue
        if isinstance(v, bool) or not isinstance(v, numbers.Real):
            return False
        seen = True
    return seen


@dataclass
class PreprocessArtifacts:
    """Everything needed to tokenize a user deterministically."""

    features: Dict[str, List[str]]  # "static" and each channel -> ordered feature names
    vocabs: Dict[str, Vocab]  # "<group>.<feature>" -> vocab, categorical features only
    bins: Dict[str, BinSpec]  # "<group>.<feature>" -> bins, numeric features only
    lengths: Dict[str, int]
    caps: Dict[str, int]
    n_bins: int = 8
    version: int = ARTIFACT_VERSION

    def encoder(self, group: str, name: str):
        key = f"{group}.{name}"
        if key in self.vocabs:
            return self.vocabs[key]
        return self.bins[key]

    def sizes(self, group: str) -> List[int]:
        return [self.encoder(group, f).size for f in self.features[group]]

    def to_dict(self) -> dict:
        return {
            "bins": {k: [float(e) for e in b.edges] for k, b in sorted(self.bins.items())},
            "caps": dict(sorted(self.caps.items())),
            "features": {k: list(v) for k, v in sorted(self.features.items())},
            "lengths": dict(sorted(self.lengths.items())),
            "n_bins": self.n_bins,
            "version": self.version,
            "vocabs": {k: dict(sorted(v.token_of.items(), key=lambda kv: kv[1]))
                       for k, v in sorted(self.vocabs.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessArtifacts":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported artifacts version {d.get('version')!r}")
        n_bins = int(d["n_bins"])
        return cls(
            features={k: list(v) for k, v in d["features"].items()},
            vocabs={k: Vocab({str(t): int(i) for t, i in v.items()}) for k, v in d["vocabs"].items()},
            bins={k: BinSpec(np.asarray(v, dtype=np.float64), n_bins) for k, v in d["bins"].items()},
            lengths={k: int(v) for k, v in d["lengths"].items()},
            caps={k: int(v) for k, v in d["caps"].items()},
            n_bins=n_bins,
            version=int(d["version"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PreprocessArtifacts":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ProcessedSample:
    user_id: str
    static_tokens: np.ndarray  # (L,)
    channel_tokens: Dict[str, np.ndarray]  # channel -> (M, T_c)
    valid_len: Dict[str, int]
    labels: Optional[LabelSet] = None

    def replace_channel(self, channel: str, tokens: np.ndarray, valid_len: int) -> "ProcessedSample":
        ct = dict(self.channel_tokens)
        vl = dict(self.valid_len)
        ct[channel] = tokens
        vl[channel] = int(valid_len)
        return ProcessedSample(self.user_id, self.static_tokens, ct, vl, self.labels)


def _split_user(item) -> Tuple[RawUser, Optional[LabelSet]]:
    if isinstance(item, RawUser):
        return item, None
    user, labels = item
    return user, labels


class TrajectoryTokenizer(TransformerMixin, BaseEstimator):
    """Fit vocabularies, bin edges and length cutoffs; transform users to tokens.

    Parameters
    ----------
    n_bins : int, default=8
        Equal-frequency bins per numeric feature.
    length_quantile : float, default=0.95
        Quantile of training channel lengths used as the cutoff.
    length_caps : dict, optional
        Upper bound on each channel's cutoff; defaults to 120/60/120.

    ``fit`` and ``transform`` accept ``RawUser`` objects or ``(RawUser, LabelSet)``
    pairs, as produced by :func:`trajrisk.datagen.read_dataset`.
    """

    def __init__(self, n_bins: int = 8, length_quantile: float = 0.95,
                 length_caps: Optional[Dict[str, int]] = None):
        self.n_bins = n_bins
        self.length_quantile = length_quantile
        self.length_caps = length_caps

    def fit(self, X, y=None):
        users = [_split_user(item)[0] for item in X]
        if not users:
            raise ValueError("cannot fit on an empty training stream")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        caps = dict(DEFAULT_CAPS if self.length_caps is None else self.length_caps)

        features: Dict[str, List[str]] = {"static": sorted({k for u in users for k in u.static_features})}
        for c in CHANNELS:
            features[c] = sorted({k for u in users for ev in u.channels.get(c, []) for k in ev
                                  if k != "event_date"})

        vocabs: Dict[str, Vocab] = {}
        bins: Dict[str, BinSpec] = {}
        for group, names in features.items():
            for name in names:
                if group == "static":
                    values = [u.static_features.get(name) for u in users]
                else:
                    values = [ev.get(name) for u in users for ev in u.channels.get(group, [])]
                key = f"{group}.{name}"
                if _is_numeric(values):
                    bins[key] = BinSpec.fit(values, self.n_bins)
                else:
                    vocabs[key] = Vocab.fit(values)

        lengths = {}
        for c in CHANNELS:
            lens = np.array([len(u.channels.get(c, [])) for u in users], dtype=np.float64)
            cut = int(np.ceil(np.quantile(lens, self.length_quantile)))
            lengths[c] = int(min(max(cut, 1), caps[c]))

        self.artifacts_ = PreprocessArtifacts(features, vocabs, bins, lengths, caps, self.n_bins)
        return self

    @classmethod
    def from_artifacts(cls, artifacts: PreprocessArtifacts) -> "TrajectoryTokenizer":
        tok = cls(n_bins=artifacts.n_bins, length_caps=dict(artifacts.caps))
        tok.artifacts_ = artifacts
        return tok

    def transform_one(self, user: RawUser, labels: Optional[LabelSet] = None) -> ProcessedSample:
        check_fitted(self, ["artifacts_"])
        art = self.artifacts_
        static_names = art.features["static"]
        unknown = set(user.static_features) - set(static_names)
        if unknown:
            raise KeyError(f"unknown static features {sorted(unknown)}")
        static = np.array([art.encoder("static", n).encode(user.static_features.get(n))
                           for n in static_names], dtype=np.int64)

        channel_tokens, valid = {}, {}
        for c in CHANNELS:
            names = art.features[c]
            T = art.lengths[c]
            events = user.channels.get(c, [])
            if events:
                extra = set(events[0]) - set(names) - {"event_date"}
                if extra:
                    raise KeyError(f"unknown features {sorted(extra)} in channel {c}")
            kept = events[-T:]  # newest events, chronological order preserved
            mat = np.zeros((len(names), T), dtype=np.int64)
            for m, name in enumerate(names):
                enc = art.encoder(c, name)
                for t, ev in enumerate(kept):
                    mat[m, t] = enc.encode(ev.get(name))
            channel_tokens[c] = mat
            valid[c] = len(kept)
        return ProcessedSample(user.user_id, static, channel_tokens, valid, labels)

    def transform(self, X) -> List[ProcessedSample]:
        check_fitted(self, ["artifacts_"])
        return [self.transform_one(*_split_user(item)) for item in X]

    def save(self, path) -> None:
        check_fitted(self, ["artifacts_"])
        self.artifacts_.save(path)

    @classmethod
    def load(cls, path) -> "TrajectoryTokenizer":
        return cls.from_artifacts(PreprocessArtifacts.load(path))


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    static: np.ndarray  # (B, L)
    tokens: Dict[str, np.ndarray]  # (B, M, T)
    valid_len: Dict[str, np.ndarray]  # (B,)
    y: np.ndarray  # (B, H) label values
    mask: np.ndarray  # (B, H) observed flags
    user_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.static.shape[0]


def collate(samples: Sequence[ProcessedSample]) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    static = np.stack([s.static_tokens for s in samples])
    tokens = {c: np.stack([s.channel_tokens[c] for s in samples]) for c in samples[0].channel_tokens}
    valid = {c: np.array([s.valid_len[c] for s in samples], dtype=np.int64) for c in tokens}
    ys, ms = [], []
    for s in samples:
        if s.labels is None:
            ys.append(np.zeros(len(HEADS)))
            ms.append(np.zeros(len(HEADS)))
        else:
            v, m = s.labels.arrays()
            ys.append(v)
            ms.append(m)
    return Batch(static, tokens, valid, np.stack(ys), np.stack(ms), [s.user_id for s in samples])


# -- processed JSON Lines ----------------------------------------------------

def sample_to_record(s: ProcessedSample) -> dict:
    return {
        "channels": {c: {"tokens": s.channel_tokens[c].tolist(), "valid_len": int(s.valid_len[c])}
                     for c in sorted(s.channel_tokens)},
        "labels": None if s.labels is None else s.labels.labels,
        "static": s.static_tokens.tolist(),
        "user_id": s.user_id,
    }


def record_to_sample(rec: dict) -> ProcessedSample:
    return ProcessedSample(
        user_id=rec["user_id"],
        static_tokens=np.asarray(rec["static"], dtype=np.int64),
        channel_tokens={c: np.asarray(v["tokens"], dtype=np.int64).reshape(len(v["tokens"]), -1)
                        for c, v in rec["channels"].items()},
        valid_len={c: int(v["valid_len"]) for c, v in rec["channels"].items()},
        labels=None if rec.get("labels") is None else LabelSet(rec["labels"]),
    )


def write_processed(samples: Iterable[ProcessedSample], path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_processed(path) -> List[ProcessedSample]:
    with Path(path).open(encoding="utf-8") as fh:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]


def train_validation_split(items: Sequence, validation_fraction: float = 0.2,
                           seed: int = 0) -> Tuple[list, list]:
    """Seeded random split; order inside each part follows the input order."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    items = list(items)
    n_val = int(round(validation_fraction * len(items)))
    if n_val < 1 or n_val >= len(items):
        raise ValueError(f"cannot split {len(items)} items with fraction {validation_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    is_val = np.zeros(len(items), dtype=bool)
    is_val[rng.permutation(len(items))[:n_val]] = True
    train = [x for x, v in zip(items, is_val) if not v]
    val = [x for x, v in zip(items, is_val) if v]
    return train, val
