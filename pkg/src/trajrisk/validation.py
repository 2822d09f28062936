"""Input validation helpers shared by the estimators and metric functions."""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from sklearn.exceptions import NotFittedError

__all__ = ["check_scored", "check_binary", "check_fitted", "NotFittedError"]


def check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {y.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def check_scored(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Validate a (scores, labels) pair for rank metrics.

    Requires equal lengths, finite scores and both classes present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = check_binary(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("need at least one positive and one negative label")
    return s, y


def check_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first (missing {missing})")
