"""Scorecard metrics: KS, AUC, Gini, PSI, bin tables and swap-set comparison."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import rankdata

from .validation import check_scored

__all__ = [
    "auc",
    "ks",
    "gini",
    "psi",
    "frequency_bin_edges",
    "format_interval",
    "bin_table",
    "swap_set_analysis",
    "head_metrics",
    "EvaluationReport",
]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks, so tied pairs count one half."""
    s, y = check_scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ks(scores, labels) -> float:
    """Max gap between positive and negative score CDFs at observed thresholds."""
    s, y = check_scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    pos_cum = np.cumsum(y_sorted)
    neg_cum = np.cumsum(1 - y_sorted)
    # evaluate only at the last index of each run of tied scores
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    gaps = np.abs(pos_cum[last] / n_pos - neg_cum[last] / n_neg)
    return float(gaps.max())


def gini(scores, labels) -> float:
    return 2.0 * auc(scores, labels) - 1.0


def frequency_bin_edges(values, n_bins: int) -> np.ndarray:
    """Interior cut points at the k/n_bins quantiles, duplicates removed."""
    v = np.asarray(values, dtype=np.float64)
    qs = np.arange(1, n_bins) / n_bins
    return np.unique(np.quantile(v, qs)) if qs.size else np.array([])


def _assign(values, edges) -> np.ndarray:
    # (lo, hi] intervals: a value equal to an edge falls in the left bin
    return np.searchsorted(edges, values, side="left")


def psi(expected, actual, n_bins: int = 10, floor: float = 1e-6) -> float:
    """Population stability index over deciles of the expected sample.

    PSI = sum_i (a_i - e_i) * ln(a_i / e_i), proportions floored at ``floor``.
    """
    e = np.asarray(expected, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if e.size == 0 or a.size == 0:
        raise ValueError("psi needs non-empty samples")
    edges = frequency_bin_edges(e, n_bins)
    k = edges.size + 1
    e_prop = np.bincount(_assign(e, edges), minlength=k) / e.size
    a_prop = np.bincount(_assign(a, edges), minlength=k) / a.size
    e_prop = np.maximum(e_prop, floor)
    a_prop = np.maximum(a_prop, floor)
    return float(np.sum((a_prop - e_prop) * np.log(a_prop / e_prop)))


def format_interval(lo: float, hi: float) -> str:
    def fmt(x):
        if np.isinf(x):
            return "-inf" if x < 0 else "inf"
        return repr(float(round(x, 6)))
    return f"({fmt(lo)}, {fmt(hi)}]"


def bin_table(scores, labels, n_bins: int = 10) -> List[dict]:
    """Equal-frequency bins of ``scores`` with per-bin count and positive rate."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    edges = frequency_bin_edges(s, n_bins)
    if edges.size + 1 < n_bins:
        warnings.warn(f"only {edges.size + 1} distinct bins for {n_bins} requested; bins merged")
    bounds = np.r_[-np.inf, edges, np.inf]
    idx = _assign(s, edges)
    rows = []
    for b in range(edges.size + 1):
        sel = idx == b
        n = int(sel.sum())
        rows.append({
            "bin": b,
            "interval": format_interval(bounds[b], bounds[b + 1]),
            "count": n,
            "share": n / s.size if s.size else 0.0,
            "positive_rate": float(y[sel].mean()) if n else None,
        })
    return rows


def swap_set_analysis(scores_a, scores_b, labels, n_bins: int = 10) -> List[dict]:
    """Compare two models bin by bin after frequency binning each one's scores.

    Bin ranks are matched; ``relative_delta`` is (rate_b - rate_a) / rate_a.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if not (a.shape == b.shape == y.shape):
        raise ValueError("scores_a, scores_b and labels must be aligned")
    table_a = bin_table(a, y, n_bins)
    table_b = bin_table(b, y, n_bins)
    rows = []
    for rank in range(max(len(table_a), len(table_b))):
        ra = table_a[rank] if rank < len(table_a) else None
        rb = table_b[rank] if rank < len(table_b) else None
        rate_a = ra["positive_rate"] if ra else None
        rate_b = rb["positive_rate"] if rb else None
        if rate_a is None or rate_b is None:
            delta = None
        elif rate_a == 0:
            delta = 0.0 if rate_b == 0 else float("inf")
        else:
            delta = (rate_b - rate_a) / rate_a
        rows.append({
            "rank": rank,
            "interval_a": ra["interval"] if ra else None,
            "interval_b": rb["interval"] if rb else None,
            "share_a": ra["share"] if ra else None,
            "share_b": rb["share"] if rb else None,
            "rate_a": rate_a,
            "rate_b": rate_b,
            "relative_delta": delta,
        })
    return rows


def head_metrics(scores, labels) -> Optional[dict]:
    """KS/AUC/Gini for one head, or None when a class is missing."""
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    a = auc(scores, labels)
    return {"ks": ks(scores, labels), "auc": a, "gini": 2.0 * a - 1.0,
            "n_pos": n_pos, "n_neg": n_neg}


@dataclass
class EvaluationReport:
    heads: Dict[str, Optional[dict]]
    psi: Dict[str, float] = field(default_factory=dict)
    bin_table: List[dict] = field(default_factory=list)
    reference_head: str = "dob90dpd7"

    def to_dict(self) -> dict:
        return {
            "heads": {h: (m if m is not None else "n/a") for h, m in self.heads.items()},
            "psi": self.psi,
            "bin_table": self.bin_table,
            "reference_head": self.reference_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        heads = {h: (None if m == "n/a" else m) for h, m in d["heads"].items()}
        return cls(heads=heads, psi=d.get("psi", {}), bin_table=d.get("bin_table", []),
                   reference_head=d.get("reference_head", "dob90dpd7"))

    def ks_of(self, head: Optional[str] = None) -> Optional[float]:
        m = self.heads.get(head or self.reference_head)
        return None if m is None else m["ks"]
