"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from trajrisk.augment import STRATEGIES, apply_plan, draw_augmentation
from trajrisk.cli import main
from trajrisk.config import RunConfig
from trajrisk.datagen import CHANNELS, HEAD_WINDOWS, GeneratorConfig, generate_dataset
from trajrisk.gradcheck import run_suite
from trajrisk.losses import LossConfig, dice_term, dwa_weights, focal_tversky
from trajrisk.metrics import auc, gini, ks
from trajrisk.model import ModelConfig, ModelShapes, TrajectoryNet
from trajrisk.pipeline import MODULE_GRID, run_ablation, split_and_fit, train_samples
from trajrisk.preprocess import collate
from trajrisk.train import fit, predict_samples

SMALL = dict(embed_dim=8, n_layers=1, n_heads=2, ffn_mult=2, head_hidden=4, dnn_hidden=(8, 6))


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


# -- 1 -------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    res = run_suite()
    elapsed = time.perf_counter() - t0
    prim_ok = all(v["max_rel_error"] < v["tol"] for v in res["primitives"].values())
    model_ok = res["model"]["max_rel_error"] < 1e-4
    worst_prim = max(v["max_rel_error"] for v in res["primitives"].values())
    verdict(1, prim_ok and model_ok and elapsed < 120,
            f"{len(res['primitives'])} primitive checks worst {worst_prim:.2e}, "
            f"2-user model {res['model']['max_rel_error']:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


# -- 2 -------------------------------------------------------------------------------

def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _brute_ks(s, y):
    best = 0.0
    for t in np.concatenate([[-np.inf], np.unique(s)]):
        tpr = np.mean(s[y == 1] <= t)
        fpr = np.mean(s[y == 0] <= t)
        best = max(best, abs(tpr - fpr))
    return best


def test_criterion_2_metric_oracles(verdict):
    rng = np.random.default_rng(2)
    worst_auc = worst_gini = 0.0
    ks_mismatch = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, max(2, n // 3), n) / 4.0  # coarse grid forces ties
        a = auc(s, y)
        worst_auc = max(worst_auc, abs(a - _brute_auc(s, y)))
        worst_gini = max(worst_gini, abs(gini(s, y) - (2 * a - 1)))
        ks_mismatch += ks(s, y) != _brute_ks(s, y)
    verdict(2, worst_auc <= 1e-12 and worst_gini <= 1e-12 and ks_mismatch == 0,
            f"1000 instances: max |AUC - brute| {worst_auc:.1e}, KS mismatches {ks_mismatch}, "
            f"max |Gini - (2AUC-1)| {worst_gini:.1e}")


# -- 3 -------------------------------------------------------------------------------

# published per-label (AUC, Gini) for each model: LSTM, GRU, stacked GRU, GRU+attention,
# Transformer, proposed model
PUBLISHED = {
    "dob45dpd7": [(0.7780, 0.5560), (0.7756, 0.5513), (0.7647, 0.5294), (0.7745, 0.5491),
                  (0.7725, 0.5450), (0.7765, 0.5529)],
    "dob90dpd7": [(0.7273, 0.4546), (0.7259, 0.4518), (0.7233, 0.4466), (0.7262, 0.4523),
                  (0.7254, 0.4508), (0.7299, 0.4598)],
    "dob90dpd30": [(0.7610, 0.5221), (0.7568, 0.5136), (0.7580, 0.5160), (0.7610, 0.5221),
                   (0.7595, 0.5191), (0.7635, 0.5269)],
    "dob120dpd7": [(0.7101, 0.4203), (0.7093, 0.4185), (0.7071, 0.4142), (0.7088, 0.4176),
                   (0.7097, 0.4194), (0.7140, 0.4279)],
    "dob120dpd30": [(0.7362, 0.4725), (0.7337, 0.4674), (0.7348, 0.4697), (0.7367, 0.4735),
                    (0.7376, 0.4752), (0.7413, 0.4826)],
    "dob180dpd7": [(0.6927, 0.3854), (0.6906, 0.3813), (0.6893, 0.3785), (0.6914, 0.3828),
                   (0.6930, 0.3859), (0.6971, 0.3942)],
    "dob180dpd30": [(0.7098, 0.4196), (0.7062, 0.4123), (0.7062, 0.4124), (0.7098, 0.4195),
                    (0.7119, 0.4238), (0.7157, 0.4313)],
}


def test_criterion_3_gini_identity_on_published_rows(verdict):
    a, g = PUBLISHED["dob90dpd7"][5]
    headline = abs((2 * a - 1) - g) <= 0.0005
    others = [(h, m) for h, rows in PUBLISHED.items() for m, (a2, g2) in enumerate(rows)
              if (h, m) != ("dob90dpd7", 5) and abs((2 * a2 - 1) - g2) <= 0.0005]
    total = sum(len(r) for r in PUBLISHED.values()) - 1
    verdict(3, headline and len(others) >= 3,
            f"2*{a} - 1 = {2 * a - 1:.4f} vs {g} (within 5e-4: {headline}); "
            f"identity holds on {len(others)}/{total} other cells (need >= 3)")


# -- 4 -------------------------------------------------------------------------------

def test_criterion_4_loss_identities(verdict):
    rng = np.random.default_rng(4)
    cfg = LossConfig(alpha_tversky=0.5, beta_tversky=0.5, gamma_focal=1.0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p = rng.uniform(0.01, 0.99, n)
        g = rng.integers(0, 2, n).astype(float)
        worst = max(worst, abs(float(focal_tversky(p, g, config=cfg).data) - float(dice_term(p, g).data)))

    sums = [dwa_weights(rng.uniform(0, 10, 2)).sum() for _ in range(1000)]
    sym = [dwa_weights([x, x]) for x in rng.uniform(0.01, 10, 100)]
    # omega from a real training run, one entry per batch
    pairs = list(generate_dataset(GeneratorConfig(n_users=200, seed=4)))
    rc = RunConfig.from_dict({"seed": 4, "model": dict(SMALL, dnn_hidden=[8, 6]), "train": {"epochs": 2}})
    tok, train, valid = split_and_fit(rc, pairs)
    res_log = []
    net = TrajectoryNet(rc.build("model"), ModelShapes.from_artifacts(tok.artifacts_), seed=4)
    from trajrisk.train import AdamW, train_epoch
    tcfg = rc.build("train")
    opt = AdamW.from_config(tcfg)
    for e in (1, 2):
        train_epoch(net, train, tcfg, rc.build("loss"), opt, e, log=res_log.append)
    omegas = [sum(r["omega"]) for r in res_log if not r["skipped"]]
    dwa_ok = (max(abs(s - 1) for s in sums + omegas) <= 1e-12
              and all(np.allclose(w, 0.5, atol=1e-15, rtol=0) for w in sym))
    verdict(4, worst <= 1e-12 and dwa_ok,
            f"max |FT - Dice| over 1000 pairs {worst:.1e}; DWA sums to 1 on {len(omegas)} training "
            f"batches and 1000 draws, symmetric -> 1/2: {dwa_ok}")


# -- 5 -------------------------------------------------------------------------------

def _shuffled(pairs, seed):
    perm = np.random.default_rng(seed).permutation(len(pairs))
    return [(u, pairs[j][1]) for (u, _), j in zip(pairs, perm)]


def _end_to_end(pairs, seed):
    rc = RunConfig.from_dict({"seed": seed})
    tok, train, valid = split_and_fit(rc, pairs)
    res = train_samples(rc, tok.artifacts_, train, valid)
    return res.report.ks_of("dob90dpd7")


def test_criterion_5_end_to_end_learning(verdict):
    t0 = time.perf_counter()
    pairs = list(generate_dataset(GeneratorConfig(n_users=5000, seed=42)))
    ks_real = _end_to_end(pairs, 42)
    t_real = time.perf_counter() - t0
    t1 = time.perf_counter()
    ks_null = _end_to_end(_shuffled(pairs, 42), 42)
    t_null = time.perf_counter() - t1
    total = t_real + t_null
    ok_real, ok_null, ok_time = ks_real >= 0.25, ks_null <= 0.05, total < 600
    verdict(5, ok_real and ok_null and ok_time,
            f"validation KS dob90dpd7 {ks_real:.4f} (>= 0.25: {ok_real}); shuffled-label control KS "
            f"{ks_null:.4f} (<= 0.05: {ok_null}); total {total / 60:.1f} min (< 10: {ok_time}; "
            f"training {t_real / 60:.1f}, control {t_null / 60:.1f})")


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_dependency_ablation(verdict, tmp_path):
    pairs = list(generate_dataset(GeneratorConfig(n_users=240, seed=6)))
    rc = RunConfig.from_dict({"seed": 6, "model": dict(SMALL, dnn_hidden=[8, 6]), "train": {"epochs": 1}})
    tok, train, valid = split_and_fit(rc, pairs)
    shapes = ModelShapes.from_artifacts(tok.artifacts_)
    frozen = TrajectoryNet(rc.build("model", freeze_dependency=True), shapes, seed=6)
    plain = TrajectoryNet(rc.build("model", dependency=False), shapes, seed=6)
    identical_init = np.array_equal(predict_samples(frozen, valid), predict_samples(plain, valid))
    fit(frozen, train, [], rc.build("train"))
    fit(plain, train, [], rc.build("train"))
    identical = identical_init and np.array_equal(predict_samples(frozen, valid), predict_samples(plain, valid))

    from trajrisk.datagen import write_dataset
    raw = tmp_path / "users.jsonl"
    write_dataset(rc.build("generator", n_users=240), raw)
    rows = run_ablation(rc, raw, "modules", tmp_path / "abl")
    emitted = (tmp_path / "abl" / "ablation_modules.txt").read_text().strip().splitlines()
    flags = [(r["feature_cls"], r["summary_cls"], r["multi_head"], r["dependency"]) for r in rows]
    grid_ok = len(rows) == 6 and len(emitted) == 7 and flags == [g[:4] for g in MODULE_GRID] \
        and all(r["ks"] is not None for r in rows)
    verdict(6, identical and grid_ok,
            f"frozen-zero dependency vs no-dependency outputs bit-identical: {identical}; "
            f"module grid emitted {len(rows)}/6 configurations")


# -- 7 -------------------------------------------------------------------------------

def _contract_violations(user, labels):
    bad = 0
    for h, (dob, dpd) in HEAD_WINDOWS.items():
        observed = labels.observed(h)
        bad += observed != (user.observation_days >= dob)
        bad += (not observed) and labels.value(h) != 0
    for h, (dob, dpd) in HEAD_WINDOWS.items():
        for h2, (dob2, dpd2) in HEAD_WINDOWS.items():
            if labels.observed(h) and labels.observed(h2) and dob2 >= dob and dpd2 <= dpd:
                bad += labels.value(h2) < labels.value(h)
    return bad


def test_criterion_7_data_contracts(verdict, small_tokenized):
    pairs = list(generate_dataset(GeneratorConfig(n_users=5000, seed=42)))
    users_bad = sum(_contract_violations(u, l) > 0 for u, l in pairs)

    tok, samples = small_tokenized
    rng = np.random.default_rng(7)
    length_bad, n_aug = 0, 0
    for s in samples:
        for strategy in STRATEGIES:
            for _ in range(3):
                plan = None
                while plan is None or plan.strategy != strategy:
                    plan = draw_augmentation(s, rng, p_aug=1.0)
                out = apply_plan(s, plan)
                n_aug += 1
                for c in CHANNELS:
                    t = out.channel_tokens[c]
                    length_bad += t.shape != s.channel_tokens[c].shape
                    length_bad += bool((t[:, out.valid_len[c]:] != 0).any())

    net = TrajectoryNet(ModelConfig(**SMALL), ModelShapes.from_artifacts(tok.artifacts_), seed=7)
    pad_bad = 0
    for i in range(0, len(samples), 30):
        batch = collate(samples[i:i + 30])
        base = net.forward(batch).logits.data
        for c in CHANNELS:
            t = batch.tokens[c]
            pad = np.broadcast_to(np.arange(t.shape[-1])[None, None] >= batch.valid_len[c][:, None, None], t.shape)
            t[pad] = rng.integers(0, 5, size=int(pad.sum()))
        pad_bad += not np.array_equal(base, net.forward(batch).logits.data)
    verdict(7, users_bad == 0 and length_bad == 0 and pad_bad == 0,
            f"{len(pairs) - users_bad}/{len(pairs)} users satisfy label monotonicity and censoring; "
            f"{n_aug} augmentations, {length_bad} length violations; {pad_bad} PAD-perturbation output changes")


# -- 8 -------------------------------------------------------------------------------

def _cli_run(root, cfg_path):
    cfg = str(cfg_path)
    assert main(["generate", "--config", cfg, "--out", str(root / "raw")]) == 0
    assert main(["preprocess", "--config", cfg, "--data", str(root / "raw"), "--out", str(root / "proc")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "proc"), "--out", str(root / "run")]) == 0
    assert main(["evaluate", "--config", cfg, "--ckpt", str(root / "run" / "best.ckpt"),
                 "--data", str(root / "proc"), "--out", str(root / "ev")]) == 0
    return json.loads((root / "ev" / "report.json").read_text())


def _max_diff(a, b):
    if isinstance(a, dict):
        assert a.keys() == b.keys()
        return max([_max_diff(a[k], b[k]) for k in a] or [0.0])
    if isinstance(a, list):
        assert len(a) == len(b)
        return max([_max_diff(x, y) for x, y in zip(a, b)] or [0.0])
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return abs(a - b)
    assert a == b
    return 0.0


def test_criterion_8_determinism(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 8, "generator": {"n_users": 400},
                               "model": dict(SMALL, dnn_hidden=[8, 6]), "train": {"epochs": 2}}))
    r1 = _cli_run(tmp_path / "a", cfg)
    r2 = _cli_run(tmp_path / "b", cfg)
    files = ["raw/users.jsonl", "proc/artifacts.json", "proc/train.jsonl", "proc/valid.jsonl",
             "run/best.ckpt", "run/epoch_002.ckpt", "run/train_log.jsonl"]
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    diff = _max_diff(r1, r2)
    verdict(8, diff <= 1e-9 and len(same) == len(files),
            f"report max difference {diff:.1e} (<= 1e-9); {len(same)}/{len(files)} dataset, artifact, "
            f"checkpoint and log files byte-identical")
