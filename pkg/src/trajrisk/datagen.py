"""Synthetic borrower trajectories with a planted latent risk.

Each user gets a latent risk ``r`` in [0, 1]. Delinquency episodes are drawn
from a Poisson process whose rate rises with ``r``; observed features are
noisy functions of ``r`` with signal-to-noise set by ``signal_strength``
(zero makes every feature independent of ``r``). Labels follow from the
episodes, so cross-label consistency holds by construction.
"""
from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
from scipy.special import expit

__all__ = [
    "HEADS",
    "HEAD_WINDOWS",
    "CHANNELS",
    "STATIC_FEATURES",
    "FeatureSpec",
    "ChannelSpec",
    "GeneratorConfig",
    "RawUser",
    "LabelSet",
    "generate_user",
    "derive_labels",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "user_to_record",
    "record_to_user",
]

HEADS = ("dob45dpd7", "dob90dpd7", "dob90dpd30", "dob120dpd7", "dob120dpd30", "dob180dpd7",
         "dob180dpd30")
HEAD_WINDOWS = {h: (int(h[3:h.index("dpd")]), int(h[h.index("dpd") + 3:])) for h in HEADS}
CHANNELS = ("credit_report", "credit_inquiry", "loan_behavior")

HORIZON_DAYS = 365
HISTORY_DAYS = 720
MISSING_RATE = 0.02


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "num" or "cat"
    categories: Tuple[str, ...] = ()
    loading: float = 1.0  # how strongly the feature follows latent risk


STATIC_FEATURES = (
    FeatureSpec("age", "num", loading=-0.8),
    FeatureSpec("gender", "cat", ("F", "M"), loading=0.0),
    FeatureSpec("address_region", "cat", tuple(f"R{i}" for i in range(10)), loading=0.5),
    FeatureSpec("education", "cat", ("primary", "secondary", "vocational", "bachelor", "graduate"),
                loading=-0.8),
    FeatureSpec("income", "num", loading=-1.0),
)

_DEFAULT_FEATURES = {
    "credit_report": (
        FeatureSpec("account_type", "cat", ("revolving", "installment", "mortgage", "auto", "personal"), 0.4),
        FeatureSpec("credit_limit", "num", loading=-0.6),
        FeatureSpec("balance", "num", loading=0.6),
        FeatureSpec("overdue_status", "cat", ("0", "1", "2", "3", "4+"), 1.2),
        FeatureSpec("installments_paid", "num", loading=-0.5),
        FeatureSpec("account_age", "num", loading=-0.4),
    ),
    "credit_inquiry": (
        FeatureSpec("inquiry_type", "cat", ("card", "loan", "mortgage", "review"), 0.6),
        FeatureSpec("inquiry_org", "cat", ("bank", "fintech", "retail", "telco", "microlender"), 0.8),
        FeatureSpec("inquiry_responsibility", "cat", ("individual", "joint", "guarantor"), 0.3),
        FeatureSpec("inquiry_amount", "num", loading=0.5),
        FeatureSpec("inquiry_days_ago", "num", loading=-0.6),
    ),
    "loan_behavior": (
        FeatureSpec("limit_usage_rate", "num", loading=1.0),
        FeatureSpec("repayment_amount", "num", loading=-0.7),
        FeatureSpec("borrowed_amount", "num", loading=0.5),
        FeatureSpec("days_since_overdue", "num", loading=-1.0),
        FeatureSpec("overdue_days", "num", loading=1.0),
        FeatureSpec("outstanding_balance", "num", loading=0.6),
        FeatureSpec("action", "cat", ("borrow", "repay", "extend", "prepay"), 0.6),
        FeatureSpec("channel", "cat", ("app", "web", "agent"), 0.2),
    ),
}


@dataclass(frozen=True)
class ChannelSpec:
    """Feature list plus a negative-binomial length distribution (mean, gamma shape)."""

    features: Tuple[FeatureSpec, ...]
    length_mean: float
    length_shape: float = 4.0
    max_length: int = 400

    @property
    def n_features(self) -> int:
        return len(self.features)


def default_channel_spec() -> Dict[str, ChannelSpec]:
    return {
        "credit_report": ChannelSpec(_DEFAULT_FEATURES["credit_report"], length_mean=7.0),
        "credit_inquiry": ChannelSpec(_DEFAULT_FEATURES["credit_inquiry"], length_mean=5.0),
        "loan_behavior": ChannelSpec(_DEFAULT_FEATURES["loan_behavior"], length_mean=8.0),
    }


@dataclass
class GeneratorConfig:
    n_users: int = 5000
    base_positive_rate: float = 0.10
    signal_strength: float = 1.0
    risk_sensitivity: float = 5.0
    seed: int = 0
    channel_spec: Dict[str, ChannelSpec] = field(default_factory=default_channel_spec)

    def __post_init__(self):
        if not 0.0 < self.base_positive_rate < 1.0:
            raise ValueError("base_positive_rate must lie in (0, 1)")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.n_users < 0:
            raise ValueError("n_users must be >= 0")
        missing = set(CHANNELS) - set(self.channel_spec)
        if missing:
            raise ValueError(f"channel_spec lacks channels {sorted(missing)}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "channel_spec"}
        d["channel_lengths"] = {c: s.length_mean for c, s in self.channel_spec.items()}
        return d


@dataclass
class RawUser:
    user_id: str
    static_features: Dict[str, object]
    channels: Dict[str, List[dict]]
    episodes: List[Tuple[int, int]]
    observation_days: int


@dataclass
class LabelSet:
    labels: Dict[str, Dict[str, object]]

    def value(self, head: str) -> int:
        return int(self.labels[head]["value"])

    def observed(self, head: str) -> bool:
        return bool(self.labels[head]["observed"])

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(values, observed) as float arrays in HEADS order."""
        v = np.array([self.labels[h]["value"] for h in HEADS], dtype=np.float64)
        m = np.array([self.labels[h]["observed"] for h in HEADS], dtype=np.float64)
        return v, m


# -- latent risk to episode rate ---------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)
_R_NODES = 0.5 * (_GL_X + 1.0)
_R_WEIGHTS = 0.5 * _GL_W


def _severity_scale(r: float) -> float:
    return 8.0 + 50.0 * r


@lru_cache(maxsize=64)
def _calibrated_offset(base_rate: float, sensitivity: float) -> float:
    """Offset b so that E_r[sigmoid(b + k(r - 1/2))] = base_rate for r ~ U(0, 1)."""
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        rate = float(np.sum(_R_WEIGHTS * expit(mid + sensitivity * (_R_NODES - 0.5))))
        lo, hi = (mid, hi) if rate < base_rate else (lo, mid)
    return 0.5 * (lo + hi)


def _episode_rate(r: float, offset: float, sensitivity: float) -> float:
    """Expected episodes per horizon so that P(dob90dpd7 | r) = sigmoid(offset + k(r - 1/2))."""
    target = float(expit(offset + sensitivity * (r - 0.5)))
    window, dpd = HEAD_WINDOWS["dob90dpd7"]
    p_start = (window - dpd + 1) / HORIZON_DAYS
    p_severe = math.exp(-(dpd - 1) / _severity_scale(r))
    return -math.log1p(-target) / (p_start * p_severe)


# -- feature rendering -------------------------------------------------------

def _latent(rng, r: float, loading: float, signal: float) -> float:
    return signal * loading * 2.0 * (r - 0.5) + rng.standard_normal()


def _render(spec: FeatureSpec, z: float):
    if spec.kind == "cat":
        k = len(spec.categories)
        # ordered buckets of a standard normal
        idx = int(np.clip(np.floor(expit(z * 1.2) * k), 0, k - 1))
        return spec.categories[idx]
    name = spec.name
    if name == "age":
        return int(np.clip(round(40 + 10 * z), 18, 80))
    if name in ("income", "credit_limit", "repayment_amount", "borrowed_amount", "inquiry_amount",
                "balance", "outstanding_balance"):
        return round(float(math.exp(8.0 + 0.6 * z)), 2)
    if name == "limit_usage_rate":
        return round(float(expit(z)), 4)
    if name in ("days_since_overdue", "inquiry_days_ago", "account_age"):
        return int(round(math.exp(4.5 + 0.7 * z)))
    if name == "overdue_days":
        return int(max(0.0, round(6.0 * z)))
    if name == "installments_paid":
        return int(max(0.0, round(12 + 6 * z)))
    return round(float(z), 4)


def _maybe_missing(rng, value):
    return None if rng.uniform() < MISSING_RATE else value


def _user_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def generate_user(config: GeneratorConfig, user_index: int) -> RawUser:
    """Deterministic in (config.seed, user_index)."""
    rng = _user_rng(config.seed, user_index)
    s = config.signal_strength
    r = float(rng.uniform())

    static = {}
    for spec in STATIC_FEATURES:
        static[spec.name] = _maybe_missing(rng, _render(spec, _latent(rng, r, spec.loading, s)))

    channels: Dict[str, List[dict]] = {}
    for name in CHANNELS:
        cspec = config.channel_spec[name]
        lam = rng.gamma(cspec.length_shape, cspec.length_mean / cspec.length_shape)
        n_events = int(min(rng.poisson(lam), cspec.max_length))
        dates = np.sort(rng.integers(0, HISTORY_DAYS, size=n_events))
        events = []
        for t in range(n_events):
            ev = {f.name: _maybe_missing(rng, _render(f, _latent(rng, r, f.loading, s)))
                  for f in cspec.features}
            ev["event_date"] = int(dates[t])
            events.append(ev)
        channels[name] = events

    offset = _calibrated_offset(config.base_positive_rate, config.risk_sensitivity)
    n_episodes = int(rng.poisson(_episode_rate(r, offset, config.risk_sensitivity)))
    starts = np.sort(rng.integers(0, HORIZON_DAYS, size=n_episodes))
    peaks = np.floor(rng.exponential(_severity_scale(r), size=n_episodes)).astype(int) + 1
    episodes = [(int(a), int(b)) for a, b in zip(starts, peaks)]

    if rng.uniform() < 0.85:
        observation = int(rng.integers(180, 401))
    else:
        observation = int(rng.integers(30, 180))

    return RawUser(
        user_id=f"u{user_index:07d}",
        static_features=static,
        channels=channels,
        episodes=episodes,
        observation_days=observation,
    )


def derive_labels(user: RawUser) -> LabelSet:
    """dobDdpdP = 1 iff an episode has start + P <= D and peak >= P; observed iff obs >= D."""
    labels = {}
    for head, (window, dpd) in HEAD_WINDOWS.items():
        observed = user.observation_days >= window
        hit = any(start + dpd <= window and peak >= dpd for start, peak in user.episodes)
        labels[head] = {"value": int(hit and observed), "observed": bool(observed)}
    return LabelSet(labels)


def generate_dataset(config: GeneratorConfig) -> Iterator[Tuple[RawUser, LabelSet]]:
    for i in range(config.n_users):
        user = generate_user(config, i)
        yield user, derive_labels(user)


# -- JSON Lines --------------------------------------------------------------

def user_to_record(user: RawUser, labels: LabelSet) -> dict:
    return {
        "channels": user.channels,
        "episodes": [list(e) for e in user.episodes],
        "labels": labels.labels,
        "observation_days": user.observation_days,
        "static": user.static_features,
        "user_id": user.user_id,
    }


def record_to_user(rec: dict) -> Tuple[RawUser, LabelSet]:
    user = RawUser(
        user_id=rec["user_id"],
        static_features=dict(rec["static"]),
        channels={k: list(v) for k, v in rec["channels"].items()},
        episodes=[tuple(e) for e in rec.get("episodes", [])],
        observation_days=int(rec["observation_days"]),
    )
    return user, LabelSet(rec["labels"])


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_dataset(config: GeneratorConfig, path) -> int:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            n = 0
            for user, labels in generate_dataset(config):
                fh.write(dumps_record(user_to_record(user, labels)) + "\n")
                n += 1
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return n


def read_dataset(path) -> Iterator[Tuple[RawUser, LabelSet]]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield record_to_user(json.loads(line))
