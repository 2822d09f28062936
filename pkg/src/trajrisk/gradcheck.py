"""Finite-difference verification of every primitive and of the full model loss."""
from __future__ import annotations

import zlib
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .datagen import CHANNELS, ChannelSpec, FeatureSpec, GeneratorConfig, generate_dataset
from .losses import LossConfig, dice_bce, focal_tversky
from .model.network import ModelConfig, ModelShapes, TrajectoryNet
from .preprocess import Batch, TrajectoryTokenizer, collate

__all__ = ["ELEMENTWISE", "STRUCTURED", "ELEMENTWISE_TOL", "STRUCTURED_TOL", "MODEL_TOL",
           "check_primitive", "check_primitives", "micro_model", "flat_loss", "check_model", "run_suite"]

ELEMENTWISE_TOL = 1e-6
STRUCTURED_TOL = 1e-4
MODEL_TOL = 1e-4
SHAPE = (3, 4)

Case = Callable[[Tensor, Tensor], Tensor]

ELEMENTWISE: Dict[str, Case] = {
    "add": lambda x, w: ad.add(x, w),
    "sub": lambda x, w: ad.sub(w, x),
    "mul": lambda x, w: ad.mul(x, w),
    "div": lambda x, w: ad.div(w, ad.add(ad.mul(x, x), 1.0)),
    "pow": lambda x, w: ad.pow_(ad.add(ad.mul(x, x), 0.5), 1.5),
    "sqrt": lambda x, w: ad.sqrt(ad.add(ad.mul(x, x), 0.5)),
    "exp": lambda x, w: ad.exp(x),
    "log": lambda x, w: ad.log(ad.add(ad.mul(x, x), 0.5)),
    "sigmoid": lambda x, w: ad.sigmoid(x),
    "relu": lambda x, w: ad.relu(x),
    "clip": lambda x, w: ad.clip(x, -0.7, 0.9),
    "dropout": lambda x, w: ad.dropout(x, np.where(np.arange(12).reshape(SHAPE) % 3, 1.25, 0.0)),
    "sum": lambda x, w: ad.sum_(x, axis=0),
    "mean": lambda x, w: ad.mean(x, axis=-1, keepdims=True),
    "transpose": lambda x, w: ad.transpose(x),
    "reshape": lambda x, w: ad.reshape(x, (2, 6)),
    "slice": lambda x, w: x[1:, ::2],
    "concat": lambda x, w: ad.concat([x, ad.mul(x, 2.0)], axis=1),
    "broadcast_to": lambda x, w: ad.broadcast_to(x, (2,) + SHAPE),
    "embedding_lookup": lambda x, w: ad.embedding_lookup(x, np.array([[0, 2], [2, 1]])),
}

STRUCTURED: Dict[str, Case] = {
    "matmul": lambda x, w: ad.matmul(ad.matmul(x, ad.transpose(x)), x),
    "batched_matmul": lambda x, w: ad.matmul(ad.reshape(x, (3, 2, 2)), ad.reshape(x, (3, 2, 2))),
    "softmax": lambda x, w: ad.softmax(ad.mul(x, 2.0)),
    "masked_softmax": lambda x, w: ad.softmax(x, mask=np.array([True, False, True, True])),
    "layer_norm": lambda x, w: ad.layer_norm(x, ad.add(x[0], 1.0), x[1]),
}


def _away_from_kinks(name: str, x: np.ndarray) -> np.ndarray:
    # central differences are meaningless within h of a non-differentiable point
    if name == "relu":
        return np.where(np.abs(x) < 1e-3, 0.5, x)
    if name == "clip":
        return np.where(np.minimum(abs(x + 0.7), abs(x - 0.9)) < 1e-3, 0.1, x)
    return x


def check_primitive(name: str, n_points: int = 10) -> float:
    """Worst relative error of one case over ``n_points`` random inputs."""
    fn = ELEMENTWISE.get(name) or STRUCTURED[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(n_points):
        x0 = _away_from_kinks(name, rng.normal(size=SHAPE))
        w0 = Tensor(rng.normal(size=SHAPE))
        weights = Tensor(rng.normal(size=fn(Tensor(x0), w0).shape))
        worst = max(worst, grad_check(lambda t: ad.sum_(ad.mul(fn(t, w0), weights)), x0))
    return worst


def check_primitives(n_points: int = 10) -> Dict[str, Tuple[float, float]]:
    """name -> (worst error, tolerance)."""
    out = {n: (check_primitive(n, n_points), ELEMENTWISE_TOL) for n in ELEMENTWISE}
    out.update({n: (check_primitive(n, n_points), STRUCTURED_TOL) for n in STRUCTURED})
    return out


def _micro_spec() -> Dict[str, ChannelSpec]:
    spec = {}
    for c in CHANNELS:
        feats = (FeatureSpec(f"{c[:3]}_num", "num", loading=1.0),
                 FeatureSpec(f"{c[:3]}_cat", "cat", ("x", "y", "z"), loading=0.5))
        spec[c] = ChannelSpec(feats, length_mean=3.0, max_length=5)
    return spec


def micro_model(n_users: int = 2, seed: int = 1, **model_overrides) -> Tuple[TrajectoryNet, Batch]:
    """A tiny-dimension model and a batch of ``n_users`` generated users."""
    gen = GeneratorConfig(n_users=n_users, base_positive_rate=0.5, seed=seed, channel_spec=_micro_spec())
    pairs = list(generate_dataset(gen))
    tok = TrajectoryTokenizer(n_bins=3).fit(pairs)
    kw = dict(embed_dim=4, n_layers=1, n_heads=2, ffn_mult=2, head_hidden=3, dnn_hidden=(5, 4))
    kw.update(model_overrides)
    net = TrajectoryNet(ModelConfig(**kw), ModelShapes.from_artifacts(tok.artifacts_), seed=seed)
    for k, v in net.params.items():
        # break symmetry of the zero/one initialised entries so every path is exercised
        rng = np.random.default_rng(zlib.crc32(k.encode()) + seed)
        net.params[k] = v + rng.normal(0.0, 0.3, size=v.shape)
    return net, collate(tok.transform(pairs))


def flat_loss(net: TrajectoryNet, batch: Batch, dropout_seed: Optional[int] = 0,
              omega=(0.5, 0.5)) -> Tuple[Callable[[Tensor], Tensor], np.ndarray, List[Tuple[str, int, int]]]:
    """Loss as a function of one flat parameter vector, with the loss weights held fixed."""
    names = sorted(net.params)
    layout, offset = [], 0
    for k in names:
        size = net.params[k].size
        layout.append((k, offset, size))
        offset += size
    x0 = np.concatenate([net.params[k].reshape(-1) for k in names])
    cfg = LossConfig()

    def f(x: Tensor) -> Tensor:
        P = {k: ad.reshape(x[o:o + s], net.params[k].shape) for k, o, s in layout}
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        out = net.forward(batch, rng=rng, training=True, P=P)
        l1 = ad.sum_(dice_bce(out.probs, batch.y, batch.mask, cfg.epsilon))
        l2 = ad.sum_(focal_tversky(out.probs, batch.y, batch.mask, cfg))
        return l1 * omega[0] + l2 * omega[1]

    return f, x0, layout


def check_model(n_users: int = 2, seed: int = 1, per_array: int = 3, **overrides) -> float:
    """Worst relative error over a few coordinates of every parameter array."""
    net, batch = micro_model(n_users, seed, **overrides)
    f, x0, layout = flat_loss(net, batch)
    rng = np.random.default_rng(seed)
    coords = []
    for _, o, s in layout:
        coords.extend(int(i) for i in o + rng.choice(s, size=min(per_array, s), replace=False))
    return grad_check(f, x0, coords=coords)


def run_suite(n_points: int = 10) -> dict:
    prim = check_primitives(n_points)
    model_err = check_model()
    variants = {name: check_model(**kw) for name, kw in (
        ("no_feature_cls", {"feature_cls": False}),
        ("no_summary_cls", {"summary_cls": False}),
        ("flat_transformer", {"hierarchical": False, "feature_cls": False, "summary_cls": False}),
        ("single_head", {"multi_head": False, "dependency": False}),
    )}
    ok = all(e < tol for e, tol in prim.values()) and model_err < MODEL_TOL \
        and all(e < MODEL_TOL for e in variants.values())
    worst = max([e for e, _ in prim.values()] + [model_err] + list(variants.values()))
    return {"primitives": {k: {"max_rel_error": e, "tol": t} for k, (e, t) in prim.items()},
            "model": {"max_rel_error": model_err, "tol": MODEL_TOL},
            "model_variants": {k: {"max_rel_error": e, "tol": MODEL_TOL} for k, e in variants.items()},
            "max_rel_error": worst, "passed": bool(ok)}
