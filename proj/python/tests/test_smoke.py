import json
import os
import subprocess

import numpy as np
import pytest

import forecast_peft as fp


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = {
        "model": {"C": 8, "enc_layers": 1, "dec_layers": 1, "heads": 2, "ffn_mult": 2, "K": 2, "H": 10, "T": 12,
                  "P": 20, "traj_hidden": 8, "lane_hidden": 8},
        "peft": {"n_prompt": 2, "adapter_rank": 2, "lora_rank": 2},
        "train": {"epochs": 1, "batch_size": 4, "seed": 3, "threads": 1},
        "data": {"n_train": 6, "n_val": 3, "seed": 1},
        "train_data": str(root / "data" / "train.fpsc"),
        "val_data": str(root / "data" / "val.fpsc"),
        "pretrained": str(root / "pre" / "checkpoint.fpck"),
        "ablation": {"axis": "prompt_length", "values": [0, 2]},
    }
    path = root / "tiny.json"
    path.write_text(json.dumps(cfg))
    fp.gen_data(config=path, out=root / "data")
    fp.pretrain(config=path, out=root / "pre")
    return root, path


def test_params_default_config(tmp_path):
    r = fp.params(out=tmp_path, mode="peft_a")
    assert r["counts"]["trainable"] == r["additive_total"] > 0
    assert json.loads((tmp_path / "metrics.json").read_text()) == r


def test_config_errors_map_to_config_error(tmp_path):
    with pytest.raises(fp.ConfigError):
        fp.params(out=tmp_path, mode="sideways")
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"C": -1}}')
    with pytest.raises(fp.ConfigError):
        fp.params(config=bad, out=tmp_path)


def test_scenes_round_trip(tiny):
    root, _ = tiny
    scenes = fp.read_scenes(str(root / "data" / "train.fpsc"))
    assert len(scenes) == 6
    a = scenes[0]["agents"][0]
    assert a["history"].shape == (10, 2) and a["future"].shape == (12, 2)
    assert a["history_valid"][-1]


def test_finetune_plugin_and_eval(tiny, tmp_path):
    root, cfg = tiny
    ft = fp.finetune(config=cfg, out=tmp_path / "ft", mode="peft")
    assert ft["plugin"]["trainable"] == ft["params"]["trainable"]
    ev = fp.evaluate(config=cfg, out=tmp_path / "ev", plugin=tmp_path / "ft" / "plugin.fppl")
    assert ev["metrics"] == ft["val"]
    m = ev["metrics"]
    assert m["minADE"] <= m["minFDE"] + 1e-12
    preds = fp.read_predictions(ev["predictions"])
    assert len(preds) == 3
    assert np.allclose(preds[0]["conf"].sum(axis=1), 1.0, atol=1e-5)
    half = fp.evaluate(config=cfg, out=tmp_path / "half", plugin=tmp_path / "ft" / "plugin.fppl", horizon=6)
    assert half["metrics"]["horizon"] == 6
    with pytest.raises(fp.ConfigError):
        fp.evaluate(config=cfg, out=tmp_path / "long", horizon=13)


def test_plugin_on_wrong_backbone_is_a_data_error(tiny, tmp_path):
    root, cfg = tiny
    fp.finetune(config=cfg, out=tmp_path / "ft", mode="peft_a")
    other = fp.pretrain(config=cfg, out=tmp_path / "pre2", seed=99)
    with pytest.raises(fp.DataError):
        fp.evaluate(config=cfg, out=tmp_path / "ev", plugin=tmp_path / "ft" / "plugin.fppl",
                    checkpoint=other["checkpoint"])


def test_ablation_outputs(tiny, tmp_path):
    _, cfg = tiny
    r = fp.ablate(config=cfg, out=tmp_path)
    assert [row["value"] for row in r["rows"]] == [0, 2]
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 3
    assert (tmp_path / "ablation_minADE.svg").read_text().startswith("<svg")


def test_metrics_identities():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(5, 12, 2)).astype(np.float32)
    traj = np.repeat(gt[:, None], 3, axis=1)
    conf = np.full((5, 3), 1 / 3, dtype=np.float32)
    m = fp.metrics(traj, conf, gt)
    assert m["minADE"] == 0 and m["minFDE"] == 0 and m["MR"] == 0
    conf1 = np.zeros((5, 3), dtype=np.float32)
    conf1[:, 0] = 1
    m = fp.metrics(traj + 0.5, conf1, gt)
    assert m["b-minFDE"] == m["minFDE"]


def test_cosine_lr_endpoints():
    assert fp.cosine_lr(1e-3, 0, 10) == 1e-3
    assert fp.cosine_lr(1e-3, 10, 10) == 0.0


@pytest.mark.skipif("FPEFT_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_exit_codes(tiny, tmp_path):
    root, cfg = tiny
    cli = os.environ["FPEFT_CLI"]
    ok = subprocess.run([cli, "params", "--out", str(tmp_path)], capture_output=True, text=True)
    assert ok.returncode == 0 and json.loads(ok.stdout)["command"] == "params"
    bad = subprocess.run([cli, "params", "--mode", "nope"], capture_output=True)
    assert bad.returncode == 2
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({**json.loads(cfg.read_text()), "val_data": str(tmp_path / "missing.fpsc")}))
    missing = subprocess.run([cli, "eval", "--config", str(broken), "--out", str(tmp_path)], capture_output=True)
    assert missing.returncode == 3
    env = dict(os.environ, FP_THREADS="0")
    capped = subprocess.run([cli, "eval", "--config", str(cfg), "--out", str(tmp_path)], capture_output=True, env=env)
    assert capped.returncode == 2
