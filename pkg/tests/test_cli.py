import json
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from raydraft.cli import main

from synth import make_dataset, read_json, synthetic_image, write_png


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """prepare -> train tiny classifier -> train decoder roles; one shared
    models directory for the downstream commands."""
    root = tmp_path_factory.mktemp("cliflow")
    manifest = make_dataset(root / "data", per_disease=3, normals=6, seed=1)
    out = root / "prepared"
    models = root / "models"
    assert run("prepare", manifest, "--out", out, "--seed", 3, "--ratios", "0.6,0.2,0.2") == 0

    common = ["--data", out, "--models", models, "--epochs", 3, "--patience", 5,
              "--input-size", 32, "--seed", 0]
    assert run("train", "--component", "classifier", "--backbone", "tiny",
               "--feature-channels", 16, *common) == 0
    decoder_dims = ["--encoder", "tiny", "--encoder-dim", 32, "--encoder-spatial", 4,
                    "--hidden-dim", 16, "--embed-dim", 16, "--attention-dim", 16, "--max-len", 12]
    for role in ("normal", "shared"):
        assert run("train", "--component", f"decoder:{role}", *decoder_dims, *common) == 0
    return {"root": root, "manifest": manifest, "prepared": out, "models": models}


class TestPrepare:
    def test_outputs_and_ratio(self, tmp_path):
        manifest = make_dataset(tmp_path / "d", per_disease=2, normals=6, seed=2)
        out = tmp_path / "prep"
        assert run("prepare", manifest, "--out", out, "--seed", 7) == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "prepare.json"):
            assert (out / name).exists()
        summary = read_json(out / "prepare.json")
        sizes = summary["sizes"]
        assert sum(sizes.values()) == 10
        assert abs(sizes["train"] - 7) <= 1
        assert "provenance" in summary and summary["provenance"]["seed"] == 7

    def test_seed_determinism(self, tmp_path):
        manifest = make_dataset(tmp_path / "d", per_disease=2, normals=4, seed=3)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("prepare", manifest, "--out", a, "--seed", 7) == 0
        assert run("prepare", manifest, "--out", b, "--seed", 7) == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
            assert (a / name).read_text() == (b / name).read_text()

    def test_duplicate_patient_errors(self, tmp_path, capsys):
        manifest = tmp_path / "m.jsonl"
        rec = {"patient_id": "p1", "image": "a.png", "impression": "x.", "findings": "", "mesh": ["normal"]}
        manifest.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        assert run("prepare", manifest, "--out", tmp_path / "o") == 1
        assert "one study per patient" in capsys.readouterr().err

    def test_bad_ratios_error(self, tmp_path):
        manifest = make_dataset(tmp_path / "d", per_disease=1, normals=3)
        assert run("prepare", manifest, "--out", tmp_path / "o", "--ratios", "0.5,0.5") == 1


class TestTrain:
    def test_classifier_artifacts(self, prepared):
        models = prepared["models"]
        assert (models / "classifier.pt").exists()
        log_lines = (models / "classifier_log.jsonl").read_text().strip().splitlines()
        entries = [json.loads(line) for line in log_lines]
        assert all({"epoch", "train_loss", "val_auroc"} <= set(e) for e in entries)

    def test_decoder_registered(self, prepared):
        registry = read_json(prepared["models"] / "decoders" / "registry.json")
        assert {"normal", "shared"} <= set(registry["roles"])
        assert registry["vocab_hash"]
        assert registry["train_counts"]

    def test_unknown_role_lists_valid(self, prepared, capsys):
        code = run("train", "--component", "decoder:bogus",
                   "--data", prepared["prepared"], "--models", prepared["models"])
        assert code == 1
        err = capsys.readouterr().err
        assert "normal" in err and "shared" in err

    def test_unknown_component(self, prepared):
        assert run("train", "--component", "transmogrifier",
                   "--data", prepared["prepared"], "--models", prepared["models"]) == 1


class TestInterpret:
    def test_normal_image(self, prepared, tmp_path):
        img = tmp_path / "normal.png"
        write_png(img, synthetic_image(None, np.random.default_rng(0)))
        out = tmp_path / "out"
        assert run("interpret", img, "--models", prepared["models"], "--out", out) == 0
        doc = read_json(out / "result.json")
        assert doc["is_normal"] is True
        assert doc["provenance"]["config"]["threshold"] == 0.8
        assert doc["provenance"]["model_hashes"]

    def test_low_threshold_produces_artifacts(self, prepared, tmp_path):
        img = tmp_path / "sick.png"
        write_png(img, synthetic_image("Cardiomegaly", np.random.default_rng(1)))
        out = tmp_path / "out2"
        assert run("interpret", img, "--models", prepared["models"],
                   "--out", out, "--threshold", 0.05) == 0
        doc = read_json(out / "result.json")
        assert not doc["is_normal"]
        for entry in doc["findings"]:
            assert (out / entry["heatmap_png"]).exists()
            assert (out / entry["crop_png"]).exists()
            assert (out / entry["heatmap_npy"]).exists()

    def test_missing_models_dir(self, prepared, tmp_path, capsys):
        img = tmp_path / "x.png"
        write_png(img, synthetic_image(None, np.random.default_rng(2)))
        assert run("interpret", img, "--models", tmp_path / "nomodels", "--out", tmp_path / "o") == 1
        assert "does not exist" in capsys.readouterr().err

    def test_invalid_threshold(self, prepared, tmp_path):
        img = tmp_path / "x.png"
        write_png(img, synthetic_image(None, np.random.default_rng(3)))
        assert run("interpret", img, "--models", prepared["models"],
                   "--out", tmp_path / "o", "--threshold", 1.7) == 1


class TestEvaluate:
    def test_writes_metric_file(self, prepared, tmp_path):
        out = tmp_path / "eval.json"
        assert run("evaluate", prepared["prepared"] / "test.jsonl",
                   "--models", prepared["models"], "--out", out) == 0
        doc = read_json(out)
        assert len(doc["bleu"]) == 4
        assert 0.0 <= doc["rouge_l"] <= 1.0
        assert doc["cider"] >= 0.0
        assert doc["n_pairs"] >= 1
        assert "auroc" in doc and "mean" in doc["auroc"]
        assert doc["provenance"]["model_hashes"]

    def test_empty_manifest_errors(self, prepared, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert run("evaluate", empty, "--models", prepared["models"], "--out", tmp_path / "e.json") == 1


class TestExitCodes:
    def test_unknown_subcommand_is_user_error(self):
        assert run("frobnicate") == 1

    def test_missing_required_flag_is_user_error(self):
        assert run("train", "--component", "classifier") == 1

    def test_version(self, capsys):
        assert run("--version") == 0
        assert "raydraft" in capsys.readouterr().out


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestServe:
    def test_healthz_roundtrip(self, prepared, tmp_path):
        port = free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "raydraft.cli", "serve", "--port", str(port),
             "--models", str(prepared["models"]), "--storage", str(tmp_path / "st")],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        )
        try:
            import httpx

            deadline = time.time() + 30
            last = None
            while time.time() < deadline:
                try:
                    r = httpx.get(f"http://127.0.0.1:{port}/healthz", timeout=1.0)
                    last = r.status_code
                    break
                except Exception:
                    time.sleep(0.3)
            assert last == 200
        finally:
            proc.terminate()
            proc.wait(timeout=10)

    def test_missing_models_fails_fast(self, tmp_path):
        assert run("serve", "--port", free_port(), "--models", tmp_path / "none",
                   "--storage", tmp_path / "st") == 1

    def test_port_in_use_fails(self, prepared, tmp_path):
        with socket.socket() as blocker:
            blocker.bind(("127.0.0.1", 0))
            blocker.listen(1)
            port = blocker.getsockname()[1]
            code = run("serve", "--port", port, "--models", prepared["models"],
                       "--storage", tmp_path / "st2")
            assert code == 1
