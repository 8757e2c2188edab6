#!/usr/bin/env python3
"""End-to-end tests for booster_cli.py, run as a subprocess like a user would."""

import json
import os
import subprocess
import sys

import pytest

REPO_ROOT = os.path.join(os.path.dirname(__file__), '..')


def _tiny_config(output_dir, variant="r-llm", epochs=2):
    return {
        "model": {
            "preset": "vit-tiny",
            "backbone": {"d_model": 16, "depth": 1, "n_heads": 2, "patch": [7]},
            "variant": variant,
            "llm": {"preset": "desk", "d_llm": 8, "n_heads": 2, "d_ffn": 12},
        },
        "train": {"epochs": epochs, "batch_size": 8, "lr": 0.001, "seed": 1},
        "data": {"kind": "synthetic", "generator": "blobs2d", "n_per_class": 10, "n_classes": 2, "seed": 0},
        "output_dir": str(output_dir),
    }


def _write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run_cli(*args, timeout=300):
    env = dict(os.environ, FB_THREADS="2", FB_LOG_LEVEL="INFO")
    env.pop("FB_LOG_FILE", None)
    return subprocess.run(
        [sys.executable, "booster_cli.py", *args],
        cwd=REPO_ROOT,
        capture_output=True,
        text=True,
        timeout=timeout,
        env=env,
    )


def test_help():
    result = run_cli("--help")
    assert result.returncode == 0
    for command in ("train", "eval", "params", "gradcam", "gen-fixture", "sweep"):
        assert command in result.stdout


def test_params_table_and_json(tmp_path):
    config = _write_config(tmp_path, _tiny_config(tmp_path / "run"))
    table = run_cli("params", config)
    assert table.returncode == 0, table.stderr
    assert "llm_block" in table.stdout
    assert "TOTAL" in table.stdout

    as_json = run_cli("params", config, "--json", "--set", "model.variant=baseline")
    assert as_json.returncode == 0, as_json.stderr
    accounting = json.loads(as_json.stdout)
    assert accounting["variant"] == "baseline"
    assert accounting["frozen"] == 0
    assert accounting["total"] == accounting["trainable"]


def test_params_for_the_full_size_block(tmp_path):
    doc = _tiny_config(tmp_path / "run")
    doc["model"]["llm"] = {"preset": "llama-7b"}
    result = run_cli("params", _write_config(tmp_path, doc), "--json")
    assert result.returncode == 0, result.stderr
    assert json.loads(result.stdout)["frozen"] == 202383360


def test_invalid_variant_exits_2(tmp_path):
    config = _write_config(tmp_path, _tiny_config(tmp_path / "run", variant="r-llm-plus"))
    result = run_cli("params", config)
    assert result.returncode == 2
    for variant in ("baseline", "r-llm", "out-r-llm", "hybrid-r-llm", "mlp-control"):
        assert variant in result.stderr


def test_malformed_json_exits_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"model": {"variant": "r-llm",}}')
    result = run_cli("params", str(path))
    assert result.returncode == 2
    assert "line 1" in result.stderr


def test_unknown_key_exits_2(tmp_path):
    doc = _tiny_config(tmp_path / "run")
    doc["train"]["learnin_rate"] = 0.1
    result = run_cli("params", _write_config(tmp_path, doc))
    assert result.returncode == 2
    assert "train.learnin_rate" in result.stderr


def test_missing_dataset_exits_1(tmp_path):
    doc = _tiny_config(tmp_path / "run")
    doc["data"] = {"kind": "npz", "path": str(tmp_path / "absent.npz")}
    result = run_cli("train", _write_config(tmp_path, doc))
    assert result.returncode == 1
    assert "train failed" in result.stderr


def test_gen_fixture_is_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        result = run_cli("gen-fixture", "--kind", "blobs2d", "--seed", "3", "--n-per-class", "10",
                         "--n-classes", "2", "--out", str(tmp_path / name))
        assert result.returncode == 0, result.stderr
        payload = json.loads(result.stdout)
        assert payload["sizes"] == {"train": 14, "val": 2, "test": 4}
        with open(payload["npz"], "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]
    assert os.path.exists(tmp_path / "a" / "blobs2d_seed3" / "train_images.npy")


def test_train_eval_and_gradcam(tmp_path):
    run_dir = tmp_path / "run"
    config = _write_config(tmp_path, _tiny_config(run_dir))

    trained = run_cli("train", config)
    assert trained.returncode == 0, trained.stderr
    summary = json.loads(trained.stdout)
    assert summary["variant"] == "r-llm"
    assert summary["final_epoch"]["epoch"] == 2
    for name in ("ckpt_best.rlbk", "ckpt_last.rlbk", "metrics.json", "resolved_config.json", "run.log",
                 os.path.join("heatmaps", "test_0.pgm"), os.path.join("heatmaps", "test_0_overlay.ppm")):
        assert os.path.exists(run_dir / name), name

    metrics = json.loads((run_dir / "metrics.json").read_text())
    resolved = json.loads((run_dir / "resolved_config.json").read_text())
    assert metrics["config"] == resolved
    assert resolved["train"]["lr"] == 0.001
    assert metrics["param_counts"]["frozen"] > 0

    evaluated = run_cli("eval", config, "--checkpoint", str(run_dir / "ckpt_best.rlbk"),
                        "--output", str(tmp_path / "eval.json"))
    assert evaluated.returncode == 0, evaluated.stderr
    scores = json.loads(evaluated.stdout)
    assert scores["acc"] == pytest.approx(metrics["test"]["acc"])
    assert scores["auc"] == pytest.approx(metrics["test"]["auc"])
    assert json.loads((tmp_path / "eval.json").read_text()) == scores

    training_metrics = (run_dir / "metrics.json").read_bytes()
    default_eval = run_cli("eval", config, "--checkpoint", str(run_dir / "ckpt_best.rlbk"), "--split", "val")
    assert default_eval.returncode == 0, default_eval.stderr
    assert json.loads((run_dir / "eval_val_metrics.json").read_text()) == json.loads(default_eval.stdout)
    assert (run_dir / "metrics.json").read_bytes() == training_metrics

    cam = run_cli("gradcam", config, "--checkpoint", str(run_dir / "ckpt_best.rlbk"), "--index", "1",
                  "--split", "val", "--out", str(tmp_path / "cams"))
    assert cam.returncode == 0, cam.stderr
    result = json.loads(cam.stdout)
    assert result["layer"] == "backbone.blocks.0"
    assert os.path.exists(result["files"]["heatmap"])
    assert os.path.exists(result["files"]["overlay"])

    out_of_range = run_cli("gradcam", config, "--checkpoint", str(run_dir / "ckpt_best.rlbk"), "--index", "99")
    assert out_of_range.returncode == 1


def test_eval_rejects_checkpoint_of_another_model(tmp_path):
    baseline_dir = tmp_path / "baseline"
    baseline = _write_config(tmp_path, _tiny_config(baseline_dir, variant="baseline", epochs=1), "baseline.json")
    assert run_cli("train", baseline).returncode == 0

    booster = _write_config(tmp_path, _tiny_config(tmp_path / "booster"), "booster.json")
    result = run_cli("eval", booster, "--checkpoint", str(baseline_dir / "ckpt_best.rlbk"))
    assert result.returncode == 1
    assert "lacks" in result.stderr


def test_sweep_writes_summary(tmp_path):
    run_dir = tmp_path / "sweep"
    config = _write_config(tmp_path, _tiny_config(run_dir, epochs=1))
    result = run_cli("sweep", config, "--variants", "baseline,r-llm,mlp-control")
    assert result.returncode == 0, result.stderr
    summary = json.loads((run_dir / "summary.json").read_text())
    assert list(summary) == ["baseline", "r-llm", "mlp-control"]
    assert summary["baseline"]["frozen"] == 0
    assert summary["r-llm"]["frozen"] > 0
    assert summary["mlp-control"]["trainable"] == summary["r-llm"]["trainable"]
    for variant in summary:
        assert os.path.exists(run_dir / variant / "metrics.json")


def test_sweep_rejects_unknown_variant(tmp_path):
    config = _write_config(tmp_path, _tiny_config(tmp_path / "sweep", epochs=1))
    result = run_cli("sweep", config, "--variants", "baseline,turbo")
    assert result.returncode == 2
    assert "--variants" in result.stderr
