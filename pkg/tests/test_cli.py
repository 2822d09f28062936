import csv
import json

import numpy as np
import pytest

from trajrisk.cli import main, metrics_report
from trajrisk.config import ConfigError, RunConfig
from trajrisk.metrics import ks

TINY = {"seed": 5, "generator": {"n_users": 120},
        "model": {"embed_dim": 8, "n_heads": 2, "n_layers": 1, "dnn_hidden": [8, 6]},
        "train": {"epochs": 1}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    cfg = str(d / "cfg.json")
    assert main(["generate", "--config", cfg, "--out", str(d / "raw")]) == 0
    assert main(["preprocess", "--config", cfg, "--data", str(d / "raw" / "users.jsonl"),
                 "--out", str(d / "proc")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "proc"), "--out", str(d / "run")]) == 0
    return d


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"seed": 1, "trian": {}})
    with pytest.raises(ConfigError, match="unknown keys in section 'model'"):
        RunConfig.from_dict({"seed": 1, "model": {"embed": 3}})
    with pytest.raises(ConfigError, match="seed is mandatory"):
        RunConfig.from_dict({})
    with pytest.raises(ConfigError, match="invalid 'train'"):
        RunConfig.from_dict({"seed": 1, "train": {"lr": -1}})


def test_seed_flag_overrides_and_echo_round_trips(tmp_path):
    cfg = RunConfig.from_dict(TINY, seed=9)
    assert cfg.seed == 9 and cfg.build("train").seed == 9
    cfg.echo(tmp_path)
    again = RunConfig.load(tmp_path / "config.json")
    assert again.effective() == cfg.effective()
    assert again.effective()["train"]["lr"] == 5e-4


def test_pipeline_outputs_and_config_echo(workdir):
    for sub in ("raw", "proc", "run"):
        echoed = json.loads((workdir / sub / "config.json").read_text())
        assert echoed["seed"] == 5 and echoed["generator"]["n_users"] == 120
    assert sorted(p.name for p in (workdir / "run").glob("*.ckpt")) == ["best.ckpt", "epoch_001.ckpt"]
    assert (workdir / "run" / "train_log.jsonl").exists()


def test_generate_and_preprocess_are_idempotent(workdir, tmp_path):
    cfg = str(workdir / "cfg.json")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "raw")]) == 0
    assert (tmp_path / "raw" / "users.jsonl").read_bytes() == (workdir / "raw" / "users.jsonl").read_bytes()
    assert main(["preprocess", "--config", cfg, "--data", str(tmp_path / "raw"), "--out", str(tmp_path / "p")]) == 0
    for name in ("artifacts.json", "train.jsonl", "valid.jsonl"):
        assert (tmp_path / "p" / name).read_bytes() == (workdir / "proc" / name).read_bytes()


def test_evaluate_writes_report(workdir, capsys):
    out = workdir / "ev"
    rc = main(["evaluate", "--config", str(workdir / "cfg.json"), "--ckpt", str(workdir / "run" / "best.ckpt"),
               "--data", str(workdir / "proc"), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["heads"]) >= {"dob90dpd7"}
    assert report["reference_head"] == "dob90dpd7"
    # evaluated on the validation split the checkpoint was scored on, so PSI is zero
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in report["psi"].values())


def test_corrupted_checkpoint_magic_exits_2(workdir, tmp_path, capsys):
    blob = bytearray((workdir / "run" / "best.ckpt").read_bytes())
    blob[:5] = b"NOPE!"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    rc = main(["evaluate", "--config", str(workdir / "cfg.json"), "--ckpt", str(bad), "--data", str(workdir / "proc")])
    assert rc == 2
    assert _err(capsys)["error"] == "bad checkpoint header"


def test_errors_are_json_with_nonzero_exit(tmp_path, capsys):
    assert main(["train", "--seed", "1", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "not found" in _err(capsys)["error"]
    assert main(["train", "--data", "x", "--out", "y"]) == 1
    assert "seed is mandatory" in _err(capsys)["error"]
    assert main(["nonsense"]) == 2
    assert _err(capsys)["type"] == "usage"
    (tmp_path / "c.json").write_text('{"seed": 1, "bogus": 2}')
    assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1
    assert "bogus" in _err(capsys)["error"]


def test_help_lists_every_default(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    defaults = RunConfig.from_dict({"seed": 0}).effective()
    for section, values in defaults.items():
        if section == "seed":
            continue
        for key in values:
            assert f'"{key}"' in text, key
    assert '"lr": 0.0005' in text and '"epochs": 12' in text


def test_metrics_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 60)
    s = y * 0.5 + rng.uniform(size=60)
    b = rng.uniform(size=60)
    seg = np.where(np.arange(60) < 30, "jan", "feb")
    path = tmp_path / "scores.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["score", "label", "score_b", "segment"])
        w.writerows(zip(s, y, b, seg))
    assert main(["metrics", "--data", str(path), "--out", str(tmp_path / "m")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["score"]["ks"] == pytest.approx(ks(s, y), abs=1e-12)
    assert out["score"]["gini"] == pytest.approx(2 * out["score"]["auc"] - 1, abs=1e-12)
    assert len(out["swap"]) > 0 and out["psi_by_segment"]["reference"] == "feb" and "jan" in out["psi_by_segment"]["psi"]
    assert (tmp_path / "m" / "metrics.json").exists()


def test_metrics_report_minimal():
    rep = metrics_report({"score": np.array([0.1, 0.9, 0.4]), "label": np.array([0, 1, 0])})
    assert rep["score"]["ks"] == 1.0 and "swap" not in rep


def test_ablate_rejects_unknown_grid(capsys):
    assert main(["ablate", "--seed", "1", "--grid", "layers", "--data", "x"]) == 2
