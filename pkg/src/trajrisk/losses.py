"""Imbalance-aware losses and gradient-norm loss weighting.

All loss functions treat axis 0 as the sample axis and reduce over it, so a
(N,) input gives a scalar and an (N, H) input gives one value per head.
Masked-out entries contribute nothing to values or gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = ["LossConfig", "dice_bce", "dice_term", "focal_tversky", "dwa_weights", "total_loss",
           "LossReport"]

P_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha_tversky: float = 0.5
    beta_tversky: float = 0.5
    gamma_focal: float = 1.0
    epsilon: float = 1.0
    alpha_dwa: float = 0.5

    def __post_init__(self):
        if self.alpha_tversky <= 0 or self.beta_tversky <= 0:
            raise ValueError("alpha_tversky and beta_tversky must be > 0")
        if self.gamma_focal < 1:
            raise ValueError("gamma_focal must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha_dwa < 0:
            raise ValueError("alpha_dwa must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _prep(p, g, mask):
    p = ad.as_tensor(p)
    g = np.asarray(g, dtype=np.float64)
    m = np.ones_like(g) if mask is None else np.asarray(mask, dtype=np.float64)
    if g.shape != p.shape or m.shape != p.shape:
        raise ValueError(f"p, g and mask shapes differ: {p.shape}, {g.shape}, {m.shape}")
    return ad.clip(p, P_CLAMP, 1.0 - P_CLAMP), g, m


def _sums(p: Tensor, g, m):
    pm = ad.mul(p, m)
    tp = ad.sum_(ad.mul(pm, g), axis=0)
    sum_p = ad.sum_(pm, axis=0)
    sum_g = (g * m).sum(axis=0)
    return tp, sum_p, sum_g


def dice_term(p, g, mask=None, epsilon: float = 1.0) -> Tensor:
    """1 - (2*TP + eps) / (sum p + sum g + eps) over masked entries."""
    p, g, m = _prep(p, g, mask)
    tp, sum_p, sum_g = _sums(p, g, m)
    return 1.0 - (tp * 2.0 + epsilon) / (sum_p + (sum_g + epsilon))


def dice_bce(p, g, mask=None, epsilon: float = 1.0) -> Tensor:
    """Masked mean binary cross-entropy plus the smoothed Dice term.

    An all-masked column evaluates to exactly 0.
    """
    pc, g, m = _prep(p, g, mask)
    bce = -(ad.log(pc) * g + ad.log(1.0 - pc) * (1.0 - g))
    count = np.maximum(m.sum(axis=0), 1.0)
    bce_mean = ad.sum_(ad.mul(bce, m), axis=0) / count
    tp, sum_p, sum_g = _sums(pc, g, m)
    dice = 1.0 - (tp * 2.0 + epsilon) / (sum_p + (sum_g + epsilon))
    return bce_mean + dice


def focal_tversky(p, g, mask=None, config: Optional[LossConfig] = None) -> Tensor:
    """(1 - TI) ** gamma with TI = (TP + eps/2) / (TP + a*FN + b*FP + eps/2).

    Half smoothing keeps TI identical to the Dice coefficient when a = b = 1/2.
    """
    cfg = config or LossConfig()
    pc, g, m = _prep(p, g, mask)
    tp, sum_p, sum_g = _sums(pc, g, m)
    fn = sum_g - tp  # sum (1-p) g m
    fp = sum_p - tp  # sum p (1-g) m
    half = cfg.epsilon / 2.0
    ti = (tp + half) / (tp + fn * cfg.alpha_tversky + fp * cfg.beta_tversky + half)
    base = ad.clip(1.0 - ti, 0.0, 1.0)
    return base if cfg.gamma_focal == 1.0 else ad.pow_(base, cfg.gamma_focal)


def dwa_weights(grad_norms: Sequence[float], alpha_dwa: float = 0.5) -> np.ndarray:
    """omega_r = n_r**alpha / sum_b n_b**alpha; equal weights when every norm is zero."""
    n = np.asarray(grad_norms, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("need at least one gradient norm")
    if (n < 0).any() or not np.isfinite(n).all():
        raise ValueError("gradient norms must be finite and non-negative")
    if not (n > 0).any():
        return np.full(n.size, 1.0 / n.size)
    powered = np.where(n > 0, n ** alpha_dwa, 0.0)
    return powered / powered.sum()


@dataclass
class LossReport:
    omega: Tuple[float, float]
    loss_dice: float
    loss_ft: float
    total: float
    empty_heads: Tuple[int, ...]
    skipped: bool = False


def total_loss(probs: Tensor, labels, mask, shared: Tensor, tape: Optional[Tape],
               config: Optional[LossConfig] = None) -> Tuple[Optional[Tensor], LossReport]:
    """Gradient-norm weighted sum of the head-averaged DiceBCE and FocalTversky losses.

    The weights come from each loss's gradient norm w.r.t. ``shared`` and are
    treated as constants. Returns ``(None, report)`` when every head is masked.
    """
    cfg = config or LossConfig()
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    active = mask.sum(axis=0) > 0
    empty = tuple(int(i) for i in np.flatnonzero(~active))
    if not active.any():
        return None, LossReport((0.5, 0.5), 0.0, 0.0, 0.0, empty, skipped=True)

    n_active = float(active.sum())
    loss_dice = ad.sum_(dice_bce(probs, labels, mask, cfg.epsilon)) / n_active
    loss_ft = ad.sum_(focal_tversky(probs, labels, mask, cfg)) / n_active

    norms = []
    for loss in (loss_dice, loss_ft):
        if tape is not None and loss.requires_grad and shared.requires_grad:
            g = ad.backward(tape, loss, wrt=[shared])[shared.node_id]
            norms.append(float(np.sqrt(np.sum(g * g))))
        else:
            norms.append(0.0)
    omega = dwa_weights(norms, cfg.alpha_dwa)
    total = loss_dice * float(omega[0]) + loss_ft * float(omega[1])
    report = LossReport((float(omega[0]), float(omega[1])), float(loss_dice.data),
                        float(loss_ft.data), float(total.data), empty)
    return total, report
