import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from egs.cli import main
from egs.retrieval import read_embeddings, write_embeddings
from egs.trainer import Checkpoint, load_checkpoint

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = {"model": {"widths": [4, 4, 4]},
         "train": {"batch_size": 4, "image_side": 32, "max_steps": 4, "checkpoint_every": 2, "seed": 0}}


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny synth -> train -> embed run shared by the read-only checks below."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["synth", "--out", str(data), "--classes", "6", "--side", "32", "--drone-train", "2",
                 "--drone-test", "1"]) == 0
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return root, data, run, cfg


# --- synth ------------------------------------------------------------------

def test_synth_refuses_nonempty_dir(tmp_path, capsys):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["synth", "--out", str(tmp_path), "--classes", "2", "--side", "16"]) == 1
    assert "--force" in capsys.readouterr().err
    assert (tmp_path / "keep.txt").exists()
    assert main(["synth", "--out", str(tmp_path), "--classes", "2", "--side", "16", "--force"]) == 0
    assert not (tmp_path / "keep.txt").exists()


def test_synth_zero_classes(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--classes", "0"]) == 0
    assert (tmp_path / "d" / "spec.json").exists()
    assert not list((tmp_path / "d").rglob("*.png"))


def test_synth_is_bitwise_deterministic(tmp_path):
    args = ["--classes", "3", "--side", "24", "--seed", "11"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b


def test_synth_bad_value_is_validation_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--classes", "-1"]) == 1


# --- usage / config errors ----------------------------------------------------

def test_bad_flags_exit_1(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["eval", "--query-emb", "q", "--gallery-emb", "g", "--out", "o", "--direction", "up"]) == 1


def test_unknown_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "train": {\n    "batch_sise": 8\n  }\n}\n')
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "batch_sise" in err and "line 3" in err


def test_missing_data_is_runtime_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--max-steps", "1"]) == 2


def test_threads_env_validated(monkeypatch, tmp_path):
    monkeypatch.setenv("EGS_THREADS", "zero")
    assert main(["synth", "--out", str(tmp_path / "d"), "--classes", "0"]) == 1
    monkeypatch.setenv("EGS_THREADS", "1")
    assert main(["synth", "--out", str(tmp_path / "d"), "--classes", "0"]) == 0


# --- train ------------------------------------------------------------------

def test_train_outputs(workspace):
    _, _, run, _ = workspace
    names = {p.name for p in run.iterdir()}
    assert {"ckpt_2.egsc", "ckpt_4.egsc", "loss.log", "config.json", "loss_curve.png"} <= names
    assert (run / "loss_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = (run / "loss.log").read_text().splitlines()
    assert len(rows) == 1 + 4
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["train"]["batch_size"] == 4 and echoed["model"]["widths"] == [4, 4, 4]


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    _, data, run, cfg = workspace
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--max-steps", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--resume"]) == 0
    assert (out / "loss.log").read_bytes() == (run / "loss.log").read_bytes()
    assert (out / "ckpt_4.egsc").read_bytes() == (run / "ckpt_4.egsc").read_bytes()


# --- embed ------------------------------------------------------------------

def test_embed_count_norm_and_determinism(workspace):
    root, data, run, _ = workspace
    a, b = root / "a.egse", root / "b.egse"
    for out in (a, b):
        assert main(["embed", "--ckpt", str(run / "ckpt_4.egsc"), "--data", str(data),
                     "--view", "drone", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ids, E = read_embeddings(a)
    assert len(ids) == len(list((data / "test" / "drone").rglob("*.png"))) == 6
    assert np.all(np.abs(np.linalg.norm(E.astype(np.float64), axis=1) - 1) <= 1e-6)
    echo = json.loads((root / "a.egse.config.json").read_text())
    assert echo["command"] == "embed" and echo["count"] == 6


def test_embed_rejects_mismatched_checkpoint(workspace, tmp_path):
    _, data, run, _ = workspace
    ckpt = load_checkpoint(run / "ckpt_4.egsc")
    ckpt.tensors["gnn.layer0.weight"] = ckpt.tensors["gnn.layer0.weight"][:, :-1]
    bad = tmp_path / "bad.egsc"
    bad.write_bytes(Checkpoint(ckpt.tensors, ckpt.step, ckpt.config, ckpt.extra).to_bytes())
    assert main(["embed", "--ckpt", str(bad), "--data", str(data), "--view", "drone",
                 "--out", str(tmp_path / "e.egse")]) == 2


# --- eval -------------------------------------------------------------------

def test_eval_self_retrieval(tmp_path, capsys, rng):
    E = rng.standard_normal((10, 6))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    path = tmp_path / "e.egse"
    write_embeddings(path, np.arange(10), E)
    out = tmp_path / "m.json"
    assert main(["eval", "--query-emb", str(path), "--gallery-emb", str(path), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert all(v == 1.0 for v in report["means"].values())
    assert (tmp_path / "m_recall.png").exists()
    header, line = capsys.readouterr().out.strip().splitlines()
    assert header.split("\t")[:3] == ["direction", "queries", "gallery"]
    assert line.split("\t")[3:] == ["1.0000"] * 5


def test_eval_chance_fixture(tmp_path):
    r1 = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        G = rng.standard_normal((32, 16))
        Q = rng.standard_normal((32, 16))
        write_embeddings(tmp_path / "g.egse", np.arange(32), G / np.linalg.norm(G, axis=1, keepdims=True))
        write_embeddings(tmp_path / "q.egse", np.arange(32), Q / np.linalg.norm(Q, axis=1, keepdims=True))
        assert main(["eval", "--query-emb", str(tmp_path / "q.egse"), "--gallery-emb", str(tmp_path / "g.egse"),
                     "--out", str(tmp_path / "m.json"), "--no-plot"]) == 0
        r1.append(json.loads((tmp_path / "m.json").read_text())["means"]["R@1"])
    assert 0.0 <= np.mean(r1) <= 0.15


def test_eval_matches_bundled_oracle(tmp_path):
    out = tmp_path / "m.json"
    assert main(["eval", "--query-emb", str(FIXTURES / "query.egse"), "--gallery-emb", str(FIXTURES / "gallery.egse"),
                 "--out", str(out), "--direction", "satellite->drone", "--no-plot"]) == 0
    got = json.loads(out.read_text())
    want = json.loads((FIXTURES / "expected_metrics.json").read_text())
    assert got["query_ids"] == want["query_ids"]
    assert got["per_query"] == want["per_query"]
    assert got["means"] == want["means"]


def test_eval_missing_file_exit_2(tmp_path):
    assert main(["eval", "--query-emb", str(tmp_path / "q"), "--gallery-emb", str(tmp_path / "g"),
                 "--out", str(tmp_path / "m.json")]) == 2


def test_eval_id_mismatch_exit_2(tmp_path, rng):
    E = rng.standard_normal((3, 4))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    write_embeddings(tmp_path / "q.egse", [0, 1, 9], E)
    write_embeddings(tmp_path / "g.egse", [0, 1, 2], E)
    assert main(["eval", "--query-emb", str(tmp_path / "q.egse"), "--gallery-emb", str(tmp_path / "g.egse"),
                 "--out", str(tmp_path / "m.json"), "--no-plot"]) == 2


# --- selfcheck ----------------------------------------------------------------

def run_cli(*args):
    env = dict(os.environ, EGS_THREADS="1")
    return subprocess.run([sys.executable, "-m", "egs.cli", *args], capture_output=True, text=True, env=env)


def test_selfcheck_passes():
    proc = run_cli("selfcheck")
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert lines and all(ln.startswith("PASS") for ln in lines)
    suites = {ln.split("\t")[1] for ln in lines}
    assert {"numerics", "equivariance", "patch_graph", "objectives", "retrieval", "data", "trainer"} <= suites


def test_selfcheck_detects_broken_rotation():
    proc = run_cli("selfcheck", "--inject-fault", "rotation")
    assert proc.returncode == 2
    failed = {ln.split("\t")[1] for ln in proc.stdout.splitlines() if ln.startswith("FAIL")}
    assert failed == {"equivariance"}
    assert "failed suites: equivariance" in proc.stdout
