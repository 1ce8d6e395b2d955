import hashlib
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

from molan import __version__, cli

from conftest import TINY_SHAPES

TINY = dict(TINY_SHAPES, model_dim=8, shared_dim=5, n_train=16, n_val=6, n_test=8,
            epochs=2, batch_size=8, seeds=1)


def _write(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = _write(root / "tiny.json", TINY)
    assert _run("gen-data", "--config", config, "--out", root / "data") == 0
    assert _run("train", "--config", config, "--data", root / "data", "--out", root / "run") == 0
    ckpt = next((root / "run").glob("model-*.ckpt"))
    return root, config, ckpt


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.json", {"model_dim": 8, "learning_rate": 0.1})
    assert _run("train", "--config", cfg, "--out", tmp_path) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_values_and_json_are_config_errors(tmp_path):
    assert _run("gen-data", "--config", _write(tmp_path / "a.json", {"theta": 4}), "--out", tmp_path) == 2
    (tmp_path / "b.json").write_text("{not json", encoding="utf-8")
    assert _run("gen-data", "--config", tmp_path / "b.json", "--out", tmp_path) == 2
    assert _run("gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    assert _run("mask-sweep", "--checkpoint", "x", "--data", tmp_path, "--ratios", "0,abc") == 2


def test_runtime_errors_exit_3(tmp_path, workspace):
    root, _, ckpt = workspace
    assert _run("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", root / "data") == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert _run("eval", "--checkpoint", bad, "--data", root / "data") == 3
    assert _run("eval", "--checkpoint", ckpt, "--data", tmp_path) == 3


def test_grad_check_command(tmp_path, capsys, monkeypatch):
    cfg = _write(tmp_path / "g.json", dict(TINY_SHAPES, model_dim=8, shared_dim=5))
    assert _run("grad-check", "--config", cfg) == 0
    out = capsys.readouterr().out
    assert out.startswith("max_relative_error ") and float(out.split()[1]) < 1e-5
    monkeypatch.setattr(cli, "GRAD_TOLERANCE", 0.0)
    assert _run("grad-check", "--config", cfg) == 3


def test_gen_data_manifest(workspace):
    root, _, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["version"] == __version__
    assert manifest["config"]["n_train"] == 16
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((root / "data" / f"{name}.jsonl").read_bytes()).hexdigest() == digest


def test_outputs_embed_config_and_version(workspace, tmp_path):
    root, _, ckpt = workspace
    run = json.loads(next((root / "run").glob("run-*.json")).read_text())
    assert run["version"] == __version__ and run["config"]["model_dim"] == 8
    assert _run("eval", "--checkpoint", ckpt, "--data", root / "data", "--out", tmp_path / "e.json") == 0
    ev = json.loads((tmp_path / "e.json").read_text())
    assert ev["version"] == __version__ and ev["config"]["model_dim"] == 8
    assert _run("sigma-map", "--checkpoint", ckpt, "--data", root / "data", "--out", tmp_path / "s.csv") == 0
    head = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert head.startswith(f"# molan {__version__} config=") and '"model_dim":8' in head


def test_eval_is_byte_identical(workspace, capsys):
    root, _, ckpt = workspace
    outs = []
    for _ in range(2):
        assert _run("eval", "--checkpoint", ckpt, "--data", root / "data") == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["metrics"]["n"] == 8


def test_commands_repeat_byte_identically(workspace, tmp_path):
    root, config, ckpt = workspace
    out = tmp_path / "out"
    snapshots = []
    for _ in range(2):
        assert _run("train", "--config", config, "--data", root / "data", "--out", out) == 0
        assert _run("mask-sweep", "--checkpoint", ckpt, "--data", root / "data", "--ratios", "0,0.3",
                    "--repeats", "2", "--out", out / "mask.csv") == 0
        assert _run("sigma-map", "--checkpoint", ckpt, "--data", root / "data", "--out", out / "sigma.csv") == 0
        assert _run("ablate", "--config", config, "--data", root / "data", "--out", out) == 0
        assert _run("block-sweep", "--config", config, "--data", root / "data", "--sizes", "visual:4x3",
                    "audio:9", "--out", out / "blocks.csv") == 0
        snapshots.append(_tree_digest(out))
        shutil.rmtree(out)
    assert snapshots[0] == snapshots[1]
    assert len(snapshots[0]) == 6


def test_commands_never_mutate_inputs(workspace, tmp_path):
    root, config, ckpt = workspace
    before = _tree_digest(root / "data"), config.read_bytes(), ckpt.read_bytes()
    _run("train", "--config", config, "--data", root / "data", "--out", tmp_path)
    _run("eval", "--checkpoint", ckpt, "--data", root / "data", "--out", tmp_path / "e.json")
    _run("mask-sweep", "--checkpoint", ckpt, "--data", root / "data", "--out", tmp_path / "m.csv")
    assert (_tree_digest(root / "data"), config.read_bytes(), ckpt.read_bytes()) == before


def test_end_to_end_defaults_under_three_minutes(tmp_path):
    exe = shutil.which("molan")
    cmd = [exe] if exe else [sys.executable, "-m", "molan.cli"]
    start = time.perf_counter()
    subprocess.run(cmd + ["gen-data", "--out", str(tmp_path / "data")], check=True, capture_output=True)
    subprocess.run(cmd + ["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run")],
                   check=True, capture_output=True)
    ckpt = next((tmp_path / "run").glob("model-*.ckpt"))
    res = subprocess.run(cmd + ["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "data")],
                         check=True, capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    assert json.loads(res.stdout)["metrics"]["n"] == 200
    assert elapsed < 180, elapsed
