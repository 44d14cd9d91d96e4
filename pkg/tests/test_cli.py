import json

import numpy as np
import pytest

from localgcl.cli import SCHEMA_VERSION, build_parser, loglog_slope, main, run_bench
from localgcl.graph import homophily_ratio, load_dataset
from localgcl.nn import load_checkpoint

VOLATILE = {"timings", "peak_memory_mb"}


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    _run.err = cap.err
    return code, (json.loads(cap.out) if cap.out.strip() else None)


def _stable(rec):
    return {k: v for k, v in rec.items() if k not in VOLATILE}


@pytest.fixture
def dataset(tmp_path, capsys):
    code, _ = _run(capsys, "gen-sbm", "--blocks", 30, 30, "--p-in", 0.3, "--p-out", 0.02, "--seed", 1,
                   "--out", tmp_path / "sbm")
    assert code == 0
    return tmp_path / "sbm"


# --- gen-sbm ----------------------------------------------------------------------

def test_gen_sbm_meta(tmp_path, capsys):
    code, rec = _run(capsys, "gen-sbm", "--blocks", 100, 100, "--p-in", 0.1, "--p-out", 0.01, "--out", tmp_path / "d")
    assert code == 0 and rec["schema_version"] == SCHEMA_VERSION and rec["command"] == "gen-sbm"
    meta = json.loads((tmp_path / "d" / "meta.json").read_text())
    assert meta["num_nodes"] == 200
    ds = load_dataset(tmp_path / "d")
    assert meta["homophily"] == pytest.approx(homophily_ratio(ds.graph), abs=1e-15)
    assert set(ds.split) == {"train", "val", "test"}


def test_gen_sbm_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        _run(capsys, "gen-sbm", "--blocks", 40, 40, "--p-in", 0.2, "--p-out", 0.05, "--seed", 3,
             "--features", "gaussian", "--out", tmp_path / name)
    for f in ("edges.csv", "features.bin", "labels.csv", "meta.json", "split.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_sbm_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _ = _run(capsys, "gen-sbm", "--blocks", 3, 3, "--p-in", 0.5, "--p-out", 0.1, "--out", blocker / "sub")
    assert code == 1


# --- train ------------------------------------------------------------------------

def test_train_outputs(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code, rec = _run(capsys, "train", "--dataset", dataset, "--steps", 3, "--dim", 8, "--proj-dim", 64,
                     "--probe", "--out", out)
    assert code == 0
    assert len(rec["loss_trace"]) == 4
    assert rec["config"]["dim"] == 8 and rec["config"]["negatives"] == "approx"
    assert set(rec["probe"]) >= {"train_acc", "val_acc", "test_acc"}
    assert json.loads((out / "metrics.json").read_text()) == rec
    z = np.fromfile(out / "embeddings.bin", dtype="<f4").reshape(60, 8)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    params, header = load_checkpoint(out / "checkpoint.bin")
    assert header["kind"] == "gcn" and params.shapes()[0] == [60, 8]


def test_train_zero_steps(tmp_path, capsys):
    code, rec = _run(capsys, "train", "--sbm", "10,10:0.5:0.1", "--steps", 0, "--dim", 4, "--proj-dim", 16,
                     "--out", tmp_path / "r")
    assert code == 0 and len(rec["loss_trace"]) == 1


def test_train_strict_reruns_identical(dataset, tmp_path, capsys):
    recs = []
    for name in ("a", "b"):
        code, rec = _run(capsys, "train", "--dataset", dataset, "--steps", 4, "--dim", 8, "--proj-dim", 64,
                         "--strict", "--out", tmp_path / name)
        assert code == 0
        recs.append(rec)
    assert _stable(recs[0]) == _stable(recs[1])
    assert (tmp_path / "a" / "embeddings.bin").read_bytes() == (tmp_path / "b" / "embeddings.bin").read_bytes()
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_train_table_config_accepted(tmp_path, capsys):
    # Cora reference config: 50 steps, 2 layers, lr 5e-4, wd 1e-6, d 2048, D 8192, tau 0.5
    code, rec = _run(capsys, "train", "--sbm", "12,12:0.5:0.05", "--steps", 50, "--layers", 2, "--lr", 5e-4,
                     "--wd", 1e-6, "--dim", 2048, "--proj-dim", 8192, "--tau", 0.5, "--encoder", "gcn",
                     "--out", tmp_path / "r")
    assert code == 0
    c = rec["config"]
    assert (c["steps"], c["layers"], c["lr"], c["wd"], c["dim"], c["proj_dim"], c["tau"]) == \
        (50, 2, 5e-4, 1e-6, 2048, 8192, 0.5)


def test_train_isolated_node_exit_1(tmp_path, capsys):
    code, _ = _run(capsys, "gen-sbm", "--blocks", 5, 5, "--p-in", 0.0, "--p-out", 0.0, "--out", tmp_path / "d")
    code, _ = _run(capsys, "train", "--dataset", tmp_path / "d", "--steps", 1, "--out", tmp_path / "r")
    assert code == 1
    assert "isolated" in _run.err


@pytest.mark.parametrize("argv", [
    ["train", "--sbm", "bad", "--out", "x"],
    ["train", "--sbm", "5,5:0.5:0.1", "--steps", "-1", "--out", "x"],
    ["train", "--sbm", "5,5:0.5:0.1", "--tau", "0", "--out", "x"],
])
def test_train_usage_errors(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["train", "--out", "x"])  # neither --dataset nor --sbm
    assert err.value.code == 2


def test_flags_mirror_hyperparameter_names():
    opts = {a.dest for a in build_parser()._subparsers._group_actions[0].choices["train"]._actions}
    assert {"steps", "layers", "lr", "wd", "dim", "proj_dim", "tau", "encoder", "negatives", "positive", "seed",
            "strict", "out", "dataset", "sbm"} <= opts


def test_train_does_not_mutate_dataset(dataset, tmp_path, capsys):
    before = {p.name: p.read_bytes() for p in dataset.iterdir()}
    _run(capsys, "train", "--dataset", dataset, "--steps", 2, "--dim", 4, "--proj-dim", 16, "--out", tmp_path / "r")
    assert {p.name: p.read_bytes() for p in dataset.iterdir()} == before


# --- probe / homophily ------------------------------------------------------------

def test_probe_on_trained_embeddings(dataset, tmp_path, capsys):
    _run(capsys, "train", "--dataset", dataset, "--steps", 20, "--dim", 16, "--proj-dim", 256, "--lr", 1e-2,
         "--out", tmp_path / "r")
    code, rec = _run(capsys, "probe", "--embeddings", tmp_path / "r" / "embeddings.bin", "--dataset", dataset,
                     "--out", tmp_path / "probe.json")
    assert code == 0 and rec["probe"]["test_acc"] >= 0.9
    assert json.loads((tmp_path / "probe.json").read_text()) == rec


def test_probe_shape_mismatch(dataset, tmp_path, capsys):
    np.zeros(7, dtype="<f4").tofile(tmp_path / "bad.bin")
    code, _ = _run(capsys, "probe", "--embeddings", tmp_path / "bad.bin", "--dataset", dataset)
    assert code == 2


def test_homophily_command(dataset, capsys):
    code, rec = _run(capsys, "homophily", "--dataset", dataset)
    assert code == 0
    assert rec["homophily"] == pytest.approx(homophily_ratio(load_dataset(dataset).graph))


# --- verify -----------------------------------------------------------------------

def test_verify_spectral(capsys):
    code, rec = _run(capsys, "verify", "--suite", "spectral", "--quick")
    assert code == 0 and rec["failed"] == []
    assert rec["passed"]["readout_bound_cliques"] is True
    assert all(c["anchor"] for c in rec["checks"])


def test_verify_gradient(capsys):
    code, rec = _run(capsys, "verify", "--suite", "gradient", "--quick")
    assert code == 0
    assert all(c["measured"] < 1e-4 for c in rec["checks"])


def test_verify_kernel_includes_chebyshev_grid(capsys):
    code, rec = _run(capsys, "verify", "--suite", "kernel", "--quick")
    names = [c["name"] for c in rec["checks"]]
    assert sum(n.startswith("chebyshev_") for n in names) == 12
    assert code == (0 if all(rec["passed"].values()) else 1)


def test_verify_failure_exit_code(monkeypatch, capsys):
    import localgcl.cli as cli
    monkeypatch.setattr(cli, "run_suites", lambda *a, **k: [
        {"name": "x", "anchor": "a", "measured": 1, "expected": 0, "pass": False, "suite": "s"}])
    code, rec = _run(capsys, "verify", "--suite", "spectral")
    assert code == 1 and rec["failed"] == ["x"]
    assert "measured=1" in _run.err


# --- bench ------------------------------------------------------------------------

def test_bench_single_size_null_slope(capsys):
    code, rec = _run(capsys, "bench", "--sizes", 64, "--dim", 8, "--proj-dim", 64, "--repeats", 1)
    assert code == 0 and rec["slopes"] == {"exact": None, "approx": None}
    assert set(rec["timings"][0]) == {"num_nodes", "exact_s", "approx_s"}


def test_bench_descending_sizes(capsys):
    code, _ = _run(capsys, "bench", "--sizes", 200, 100, "--repeats", 1)
    assert code == 2


def test_loglog_slope_exact_power():
    n = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(n, 3 * n ** 2) == pytest.approx(2.0)
    assert loglog_slope([5], [1.0]) is None


def test_run_bench_shapes():
    res = run_bench([50, 100], 8, 64, 0.5, repeats=1)
    assert [r["num_nodes"] for r in res["rows"]] == [50, 100]
    assert isinstance(res["slopes"]["exact"], float)


def test_threads_env(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("LOCALGCL_THREADS", "1")
    code, _ = _run(capsys, "train", "--sbm", "6,6:0.5:0.1", "--steps", 1, "--dim", 4, "--proj-dim", 16,
                   "--out", tmp_path / "r")
    assert code == 0
