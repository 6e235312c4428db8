import json

import numpy as np
import pytest

from gpq import cli
from gpq.index import load as load_index


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workspace(tmp_path, capsys):
    """Small dataset, split and a 2-epoch 48-bit model."""
    paths = {k: tmp_path / v for k, v in [("data", "d.gpqd"), ("split", "s.json"), ("model", "m.gpqm")]}
    assert run(capsys, "synth", "--out", paths["data"], "--per-class", 40, "--seed", 3)[0] == 0
    assert run(capsys, "split", "--data", paths["data"], "--out", paths["split"],
               "--labels-per-class", 8, "--query-per-class", 4)[0] == 0
    code, out, _ = run(capsys, "train", "--data", paths["data"], "--split", paths["split"],
                       "--out", paths["model"], "--bits", 48, "--epochs", 2, "--batch-size", 32)
    assert code == 0
    assert "M=12" in out and "bytes_per_code=6" in out
    paths["tmp"] = tmp_path
    return paths


def test_synth_defaults_and_reproducible(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "a.gpqd")
    assert code == 0
    assert "items=6000 dim=96 classes=10" in out
    run(capsys, "synth", "--out", tmp_path / "b.gpqd")
    assert (tmp_path / "a.gpqd").read_bytes() == (tmp_path / "b.gpqd").read_bytes()
    manifest = cli.RunManifest.load(cli.manifest_path(tmp_path / "a.gpqd"))
    assert cli.validate_manifest(manifest) == []
    assert manifest.seeds == {"seed": 0}


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "synth", "--out", tmp_path / "x", "--classes", 0)[0] == 2
    assert run(capsys, "train", "--bits", 13)[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key=1\n")
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "x")[0] == 2


def test_io_errors(tmp_path, capsys):
    assert run(capsys, "split", "--data", tmp_path / "missing", "--out", tmp_path / "s")[0] == 3
    (tmp_path / "junk").write_bytes(b"nope")
    assert run(capsys, "query", "--index", tmp_path / "junk", "--vectors", tmp_path / "junk")[0] == 3


def test_training_log_is_reproducible(workspace, capsys):
    log = workspace["tmp"] / "m.gpqm.log"
    first = log.read_text()
    lines = first.splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1 npq=")
    again = workspace["tmp"] / "m2.gpqm"
    run(capsys, "train", "--data", workspace["data"], "--split", workspace["split"],
        "--out", again, "--bits", 48, "--epochs", 2, "--batch-size", 32)
    assert (workspace["tmp"] / "m2.gpqm.log").read_text() == first
    assert again.read_bytes() == workspace["model"].read_bytes()
    manifest = json.loads(cli.manifest_path(again).read_text())
    assert manifest["config"]["M"] == 12 and set(manifest["timings"]) >= {"train"}


def test_config_file_sits_beneath_flags(workspace, capsys):
    cfg = workspace["tmp"] / "train.cfg"
    cfg.write_text("# ablation\nlambda1=0\nlambda2 = 0\nepochs=1\nbits=24\n")
    out_path = workspace["tmp"] / "h.gpqm"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", workspace["data"],
                       "--split", workspace["split"], "--out", out_path, "--bits", 12)
    assert code == 0 and "M=3" in out
    manifest = cli.RunManifest.load(cli.manifest_path(out_path))
    assert manifest.config["lambda1"] == 0 and manifest.config["epochs"] == 1
    assert not manifest.config["use_classifier"]


def test_build_query_eval(workspace, capsys):
    idx_path = workspace["tmp"] / "i.gpqi"
    args = ["build", "--model", workspace["model"], "--data", workspace["data"], "--split", workspace["split"]]
    assert run(capsys, *args, "--out", idx_path)[0] == 0
    index = load_index(idx_path)
    split = json.loads(workspace["split"].read_text())
    assert index.count == len(split["database"])
    assert index.shape.code_bytes == 6
    assert cli.validate_manifest(cli.RunManifest.load(cli.manifest_path(idx_path))) == []

    upd = workspace["tmp"] / "u.gpqi"
    run(capsys, *args, "--out", upd, "--proto-update")
    assert not np.array_equal(load_index(upd).codebook.Z, index.codebook.Z)

    own = split["database"][:3]
    code, out, _ = run(capsys, "query", "--index", idx_path, "--model", workspace["model"],
                       "--data", workspace["data"], "--ids", ",".join(map(str, own)), "--k", 5)
    assert code == 0
    blocks = out.strip().split("# query ")[1:]
    assert len(blocks) == 3
    for qid, block in zip(own, blocks):
        rows = [line.split("\t") for line in block.strip().splitlines()[1:]]
        assert len(rows) == 5
        # an item's own code scores at least as high as any other code
        top = float(rows[0][2])
        assert top == pytest.approx(max(float(r[2]) for r in rows))
        assert str(qid) in [r[1] for r in rows if float(r[2]) == top]
        scores = [float(r[2]) for r in rows]
        assert scores == sorted(scores, reverse=True)
        assert [r[0] for r in rows] == ["1", "2", "3", "4", "5"]

    report = workspace["tmp"] / "r.txt"
    code, out, _ = run(capsys, "eval", "--model", workspace["model"], "--index", idx_path,
                       "--data", workspace["data"], "--split", workspace["split"],
                       "--k", 5, "--baseline", "pq", "--out", report)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("map=0.") and len(lines[0]) == len("map=0.xxxxxx")
    assert lines[1].startswith("p@5=")
    assert lines[2].startswith("map_baseline=")
    assert report.read_text() == out


def test_query_empty_index_and_shape_errors(workspace, capsys):
    from gpq.index import RetrievalIndex, save
    from gpq.trainer import load_checkpoint

    cb = load_checkpoint(workspace["model"]).codebook
    empty = workspace["tmp"] / "e.gpqi"
    save(RetrievalIndex(cb, np.zeros((0, cb.shape.code_bytes), dtype=np.uint8)), empty)
    code, out, _ = run(capsys, "query", "--index", empty, "--model", workspace["model"],
                       "--data", workspace["data"], "--ids", "0")
    assert code == 0
    assert out == "# query 0\n"

    vectors = workspace["tmp"] / "v.txt"
    vectors.write_text("1 2 3\n")
    assert run(capsys, "query", "--index", empty, "--vectors", vectors)[0] == 5
    assert run(capsys, "query", "--index", empty, "--model", workspace["model"], "--vectors", vectors)[0] == 5


def test_thread_env(monkeypatch):
    monkeypatch.setenv("GPQ_THREADS", "1")
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._configure_threads()
    import os

    assert all(os.environ[v] == "1" for v in cli._THREAD_VARS)


def test_divergence_exit_code(workspace, capsys):
    code, _, err = run(capsys, "train", "--data", workspace["data"], "--split", workspace["split"],
                       "--out", workspace["tmp"] / "bad.gpqm", "--lr", "1e308", "--epochs", 2)
    assert code == 4, err
