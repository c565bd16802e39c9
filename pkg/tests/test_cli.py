import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from obmreg import OBMNet
from obmreg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from obmreg.data import read_cloud, read_manifest
from obmreg.solver import register_once
from obmreg.train import EVAL_STREAM

from oracles import parse_ply_scratch

TINY_SETS = ["edge_widths=8,8", "feat_dim=16", "mix_hidden_width=8", "bias_hidden_width=8", "k_feat=8", "k_match=4",
             "topk_pairs=16", "train_iters=1"]


def set_flags():
    out = []
    for s in TINY_SETS:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--pairs", "3", "--test-pairs", "2", "--overlap", "0.8",
                 "--noise", "0.01", "--seed", "5", "--points", "64"]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--manifest", str(data / "manifest.txt"), "--out", str(run), "--epochs", "1", "--seed", "2",
                 *set_flags()]) == EXIT_OK
    return data, run


def test_gen_data_byte_identical(tmp_path, capsys):
    args = ["--pairs", "2", "--test-pairs", "1", "--overlap", "0.7", "--seed", "1", "--points", "64", "--shapes", "cube,torus"]
    assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == EXIT_OK
    assert main(["gen-data", "--out", str(tmp_path / "b"), *args]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir()) and "manifest.txt" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert capsys.readouterr().out.strip().endswith("manifest.txt")


def test_seed_env_and_flag_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("OBMREG_SEED", "7")
    assert main(["gen-data", "--out", str(tmp_path / "env"), "--pairs", "1", "--points", "64"]) == EXIT_OK
    assert read_manifest(tmp_path / "env" / "manifest.txt").params["seed"] == "7"
    assert main(["gen-data", "--out", str(tmp_path / "flag"), "--pairs", "1", "--points", "64", "--seed", "3"]) == EXIT_OK
    assert read_manifest(tmp_path / "flag" / "manifest.txt").params["seed"] == "3"
    monkeypatch.setenv("OBMREG_SEED", "abc")
    assert main(["gen-data", "--out", str(tmp_path / "bad"), "--pairs", "1", "--points", "64"]) == EXIT_USAGE


def test_usage_and_data_exit_codes(tmp_path, trained):
    data, run = trained
    assert main(["gen-data", "--out", str(tmp_path), "--shapes", "cone"]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path), "--overlap", "0.05"]) == EXIT_USAGE
    assert main(["train", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "r"), "--set", "nope=1"]) == EXIT_USAGE
    assert main(["train", "--manifest", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n")
    assert main(["register", "--checkpoint", str(run / "best.npz"), "--source", str(bad), "--target", str(bad)]) == EXIT_DATA
    src = str(data / "pair_00000_src.ply")
    assert main(["register", "--checkpoint", str(run / "best.npz"), "--source", src, "--target", src, "--iters", "0"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["bench"])
    assert exc.value.code == 2


def test_numeric_failure_exit_code(tmp_path, trained):
    _, run = trained
    line = tmp_path / "line.xyz"
    line.write_text("".join(f"{i} 0 0\n" for i in range(64)))
    rc = main(["register", "--checkpoint", str(run / "best.npz"), "--source", str(line), "--target", str(line), "--iters", "1"])
    assert rc == EXIT_NUMERIC


def test_register_matches_library(tmp_path, trained, capsys):
    data, run = trained
    src, tgt = data / "pair_00003_src.ply", data / "pair_00003_tgt.ply"
    out = tmp_path / "moved.ply"
    capsys.readouterr()
    assert main(["register", "--checkpoint", str(run / "best.npz"), "--source", str(src), "--target", str(tgt),
                 "--iters", "1", "--seed", "4", "--out", str(out)]) == EXIT_OK
    printed = np.array([[float(v) for v in l.split()] for l in capsys.readouterr().out.strip().splitlines()])
    model = OBMNet.load(run / "best.npz")
    xf, _ = register_once(read_cloud(src), read_cloud(tgt), model, np.random.default_rng([4, EVAL_STREAM, 0]),
                          tau=model.cfg.tau_end)
    assert np.array_equal(printed, xf.matrix())
    moved = parse_ply_scratch(out.read_text())
    assert np.array_equal(moved, xf.apply(read_cloud(src).points))


def test_bench_outputs_consistent(tmp_path, trained):
    data, run = trained
    args = ["bench", "--checkpoint", str(run / "best.npz"), "--manifest", str(data / "manifest.txt")]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    for n in ("bench.csv", "bench.json"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    doc = json.loads((tmp_path / "a" / "bench.json").read_text())
    rows = list(csv.reader((tmp_path / "a" / "bench.csv").read_text().splitlines()))
    pair_rows = [r for r in rows if r[0] == "pair"]
    assert len(pair_rows) == len(doc["rows"]) == 4  # 2 test pairs x (model, icp)
    header = rows[0][1:]
    for r, d in zip(pair_rows, doc["rows"]):
        rec = dict(zip(header, r[1:]))
        for k in ("mae_r", "mae_t", "mie_r", "mie_t"):
            assert float(rec[k]) == d[k]
    for agg in doc["aggregates"]:
        vals = [d["mie_r"] for d in doc["rows"] if d["method"] == agg["method"]]
        assert agg["median_mie_r"] == float(np.median(vals)) and agg["pairs"] == 2
    assert {a["method"] for a in doc["aggregates"]} == {"model", "icp"}
    assert main([*args, "--out", str(tmp_path / "t"), "--timing", "--baseline", "none"]) == EXIT_OK
    assert "seconds" in json.loads((tmp_path / "t" / "bench.json").read_text())["rows"][0]


def test_train_is_reproducible(tmp_path, trained):
    data, run = trained
    assert main(["train", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "again"), "--epochs", "1",
                 "--seed", "2", *set_flags()]) == EXIT_OK
    for n in ("metrics.csv", "best.npz", "last.npz"):
        assert (run / n).read_bytes() == (tmp_path / "again" / n).read_bytes()
    assert OBMNet.load(run / "best.npz").cfg.seed == 2


def test_ablate_command(tmp_path, trained):
    data, _ = trained
    rc = main(["ablate", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "ab"), "--epochs", "1",
               "--sets", "loss_g=OS,BP,NMM,L_g", *set_flags()])
    assert rc == EXIT_OK
    rows = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["name"] for r in rows] == ["full", "loss_g"]
    assert (tmp_path / "ab" / "ablation.csv").read_text().startswith("name,toggles,")
    bad = main(["ablate", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "ab2"), "--sets", "x=OS,ZZ"])
    assert bad == EXIT_USAGE


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "obmreg.cli", "gen-data", "--out", str(tmp_path), "--shapes", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "usage error" in proc.stderr
