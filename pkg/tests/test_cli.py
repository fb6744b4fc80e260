import csv
import json

import numpy as np
import pytest

from ccnet import cli, experiments
from ccnet.data import write_embeddings

QUICK = ["--epochs", "3", "--set", "train.decay_epochs=[2, 3]"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--loss", "cdc", "--norm", "alnu", "--seed", 7, "--out", out, *QUICK) == 0
    return out


def test_train_contract(trained):
    assert (trained / "model.ccnl").exists()
    rows = read_csv(trained / "train_log.csv")
    assert len(rows) == 3
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["command"] == "train"
    assert cfg["train"]["loss_variant"] == "cdc" and cfg["train"]["norm_variant"] == "alnu"


def test_train_rerun_from_echo_is_byte_identical(trained, tmp_path):
    assert run("train", "--config", trained / "config.json", "--out", tmp_path) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()
    assert (tmp_path / "model.ccnl").read_bytes() == (trained / "model.ccnl").read_bytes()


def test_cdc_beats_ce_only_on_intra_modality_distance(tmp_path):
    common = ["--seed", 3, "--norm", "none", "--lr", "1e-3", "--epochs", 15,
              "--set", "train.decay_epochs=[10, 13]"]
    assert run("train", "--loss", "ce_only", "--out", tmp_path / "ce", *common) == 0
    assert run("train", "--loss", "cdc", "--out", tmp_path / "cdc", *common) == 0
    ce = float(read_csv(tmp_path / "ce" / "train_log.csv")[-1]["intra_modality_dist"])
    cdc = float(read_csv(tmp_path / "cdc" / "train_log.csv")[-1]["intra_modality_dist"])
    assert cdc < ce


def test_lambda_zero_log_matches_ce_only(tmp_path):
    assert run("train", "--loss", "ce_only", "--out", tmp_path / "a", *QUICK) == 0
    assert run("train", "--loss", "cdc", "--lambda", 0, "--out", tmp_path / "b", *QUICK) == 0
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_eval_grid_and_export(trained, tmp_path):
    out, emb = tmp_path / "eval", tmp_path / "emb"
    assert run("eval", "--checkpoint", trained / "model.ccnl", "--seed", 7, "--out", out,
               "--export", emb, "--center") == 0
    rows = read_csv(out / "eval.csv")
    assert [r["subset"] for r in rows] == ["R", "N", "T", "R+N", "R+T", "N+T", "R+N+T", "center"]
    assert (out / "eval.svg").exists()
    # the exported embeddings are a first-class input and give the same numbers
    assert run("eval", "--embeddings", emb, "--out", tmp_path / "again", "--center") == 0
    assert (tmp_path / "again" / "eval.csv").read_bytes() == (out / "eval.csv").read_bytes()


def duplicate_fixture(path, rng):
    """Queries each have an exact same-(id, time) copy in the gallery plus noisier cross-time positives."""
    ids = np.arange(6)
    q = rng.normal(size=(6, 3, 4))
    cross = q + 1.5 * rng.normal(size=q.shape)
    distract = rng.normal(size=(12, 3, 4))
    feats = np.concatenate([q, q, cross, distract])
    meta = [{"id": int(i), "time": 0, "split": "query"} for i in ids]
    meta += [{"id": int(i), "time": 0, "split": "gallery"} for i in ids]
    meta += [{"id": int(i), "time": 1, "split": "gallery"} for i in ids]
    meta += [{"id": int(100 + j), "time": 2, "split": "gallery"} for j in range(12)]
    path.mkdir()
    for m, name in enumerate(("rgb", "nir", "tir")):
        write_embeddings(path / f"{name}.ccnf", feats[:, m])
    (path / "meta.jsonl").write_text("".join(json.dumps(r) + "\n" for r in meta))


def test_protocol_toggle_on_duplicates(tmp_path, rng):
    duplicate_fixture(tmp_path / "emb", rng)
    assert run("eval", "--embeddings", tmp_path / "emb", "--protocol", "none", "--protocol", "time_label",
               "--subset", "R+N+T", "--out", tmp_path / "out") == 0
    rows = {r["protocol"]: r for r in read_csv(tmp_path / "out" / "eval.csv")}
    assert float(rows["time_label"]["mAP"]) <= float(rows["none"]["mAP"])
    assert float(rows["none"]["rank1"]) == 1.0


def test_missing_table(trained, tmp_path):
    out = tmp_path / "missing"
    assert run("missing", "--checkpoint", trained / "model.ccnl", "--seed", 7, "--out", out) == 0
    rows = read_csv(out / "missing.csv")
    assert [float(r["ratio"]) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert len(read_csv(out / "missing_trials.csv")) == 50
    assert run("eval", "--checkpoint", trained / "model.ccnl", "--seed", 7, "--out", tmp_path / "e",
               "--center") == 0
    center = [r for r in read_csv(tmp_path / "e" / "eval.csv") if r["subset"] == "center"][0]
    assert all(rows[0][k] == center[k] for k in ("mAP", "rank1", "rank5", "rank10"))
    assert run("missing", "--config", out / "config.json", "--out", tmp_path / "m2") == 0
    assert (tmp_path / "m2" / "missing.csv").read_bytes() == (out / "missing.csv").read_bytes()


def test_sweep_single_cell_and_rerun(tmp_path):
    args = ["--set", "grid.lambdas=[0.5]", "--set", "grid.alphas=[]", *QUICK]
    assert run("sweep", "--out", tmp_path / "a", *args) == 0
    rows = read_csv(tmp_path / "a" / "sweep.csv")
    assert len(rows) == 1 and rows[0]["param"] == "lambda" and rows[0]["lambda"] == "0.5"
    assert run("sweep", "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_default_sweep_grid_has_twenty_cells():
    cells = experiments.sweep_grid()
    assert len(cells) == 20
    assert sum(c[0] == "lambda" and c[2] == 0.6 for c in cells) == 10
    assert sum(c[0] == "alpha" and c[1] == 0.3 for c in cells) == 10


def test_gradcheck_passes_and_reports(tmp_path):
    assert run("gradcheck", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert {"cdc", "alnu", "composite_cdc_ALNU"} <= {r["check"] for r in rows}
    assert all(r["status"] == "pass" and float(r["max_rel_error"]) < 1e-5 for r in rows)


def test_gradcheck_negative_control(tmp_path, capsys):
    assert run("gradcheck", "--grad-scale", 1.001, "--out", tmp_path) == 1
    assert "worst cdc" in capsys.readouterr().err
    rows = {r["check"]: r["status"] for r in read_csv(tmp_path / "gradcheck.csv")}
    assert rows["cdc"] == "fail"


def test_exit_codes(tmp_path, capsys):
    assert run("train", "--loss", "triplet", "--out", tmp_path / "a") == 2
    assert run("train", "--set", "train.nope=1", "--out", tmp_path / "b") == 2
    assert run("eval", "--out", tmp_path / "c") == 2
    assert run("eval", "--checkpoint", tmp_path / "missing.ccnl", "--out", tmp_path / "d") == 3
    bad = tmp_path / "bad.ccnl"
    bad.write_bytes(b"nope")
    assert run("eval", "--checkpoint", bad, "--out", tmp_path / "e") == 3
    assert run("train", "--manifest", tmp_path / "none.jsonl", "--out", tmp_path / "f") == 3


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CCNET_SEED", "11")
    assert run("train", "--out", tmp_path / "a", "--epochs", 1) == 0
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 11
    assert run("train", "--out", tmp_path / "b", "--epochs", 1, "--seed", 2) == 0
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 2
    monkeypatch.setenv("CCNET_SEED", "abc")
    assert run("train", "--out", tmp_path / "c", "--epochs", 1) == 2
