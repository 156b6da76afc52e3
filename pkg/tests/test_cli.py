import json

import numpy as np
import pytest

from devias import cli
from devias.evaluation import read_pgm
from devias.pipeline import load_checkpoint
from devias.world import read_dvsw

TINY_TRAIN = ["--dim", "16", "--heads", "2", "--depth", "1", "--iters", "2", "--batch", "8",
              "--epochs", "1", "--warmup-epochs", "0"]


def _run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.strip() else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.run(["gen-data", "--out", str(data), "--height", "16", "--width", "16",
                    "--n-train", "32", "--n-test", "16", "--n-teacher", "32", "--seed", "5"]) == 0
    assert cli.run(["train-teacher", "--data", str(data), "--out", str(root / "teacher.dvck"),
                    "--epochs", "1"]) == 0
    assert cli.run(["train", "--data", str(data), "--teacher", str(root / "teacher.dvck"),
                    "--out", str(root / "model.dvck"), "--metrics", str(root / "m.jsonl"),
                    *TINY_TRAIN]) == 0
    return root


def test_gen_data_files(workspace):
    for name in cli.SPLIT_FILES:
        assert (workspace / "data" / f"{name}.dvsw").exists()
    train = read_dvsw(workspace / "data" / "train.dvsw")
    assert train.frames.shape == (32, 8, 16, 16, 1)


def test_train_outputs(workspace):
    ckpt = load_checkpoint(workspace / "model.dvck")
    assert ckpt.config.dim == 16 and ckpt.config.height == 16
    assert ckpt.step == 4
    assert len((workspace / "m.jsonl").read_text().splitlines()) == 1


def test_eval_report(workspace, capsys, tmp_path):
    out = tmp_path / "report.json"
    code, report = _run(capsys, "eval", "--ckpt", workspace / "model.dvck", "--data",
                        workspace / "data", "--k", "3", "--out", out)
    assert code == 0
    assert set(report) >= {"splits", "hm_inputs", "harmonic_mean", "knn", "slot_frequency"}
    assert set(report["knn"]) == {"A-A", "S-S", "A-S", "S-A"}
    assert json.loads(out.read_text()) == report


def test_eval_needs_test_splits(workspace, capsys):
    code, _ = _run(capsys, "eval", "--ckpt", workspace / "model.dvck", "--data", workspace / "data",
                   "--splits", "train")
    assert code == cli.EXIT_USAGE


def test_knn_with_pca(workspace, capsys, tmp_path):
    code, res = _run(capsys, "knn", "--ckpt", workspace / "model.dvck", "--data", workspace / "data",
                     "--k", "5", "--pca-out", tmp_path / "pca.csv")
    assert code == 0 and res["k"] == 5
    assert len((tmp_path / "pca.csv").read_text().splitlines()) == 1 + 2 * 16


@pytest.mark.parametrize("all_iters, count", [(False, 8), (True, 16)])
def test_export_attn(workspace, capsys, tmp_path, all_iters, count):
    extra = ["--all-iters"] if all_iters else []
    code, res = _run(capsys, "export-attn", "--ckpt", workspace / "model.dvck", "--data",
                     workspace / "data", "--index", "2", "--out", tmp_path, *extra)
    assert code == 0 and len(res["files"]) == count
    assert read_pgm(res["files"][0]).shape == (16, 16)


def test_export_attn_bad_index(workspace, capsys, tmp_path):
    code, _ = _run(capsys, "export-attn", "--ckpt", workspace / "model.dvck", "--data",
                   workspace / "data", "--index", "999", "--out", tmp_path)
    assert code == cli.EXIT_USAGE


def test_grad_check_command(capsys):
    code, res = _run(capsys, "grad-check", "--max-coords", "2")
    assert code == 0 and res["passed"] and res["max_rel_error"] <= 1e-6
    code, _ = _run(capsys, "grad-check", "--max-coords", "1", "--tol", "-1")
    assert code == cli.EXIT_NUMERIC


def test_config_file_and_flag_precedence(workspace, capsys, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("epochs = 2\nlr = 0.01\ndim = 16\nheads = 2\ndepth = 1\niters = 2\nbatch = 8\n"
                    "warmup-epochs = 0\n")
    out = tmp_path / "m.dvck"
    code, res = _run(capsys, "train", "--config", conf, "--data", workspace / "data", "--teacher",
                     workspace / "teacher.dvck", "--out", out, "--epochs", "1")
    assert code == 0
    cfg = load_checkpoint(out).config
    assert (cfg.epochs, cfg.lr) == (1, 0.01)


def test_unknown_config_key(workspace, capsys, tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("learning_rate = 1\n")
    code, _ = _run(capsys, "train", "--config", conf, "--data", workspace / "data", "--out",
                   tmp_path / "x.dvck")
    assert code == cli.EXIT_USAGE


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["train", "--data", "nowhere"],
    ["grad-check", "--precision", "f16"],
    ["train", "--data", "d", "--out", "o", "--model", "three_token"],
])
def test_usage_errors(argv, capsys, tmp_path):
    if argv[0] == "train" and "--model" in argv:
        argv = ["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--model", "three_token"]
        (tmp_path / "train.dvsw").write_bytes(b"")
    code = cli.run(argv)
    assert code in (cli.EXIT_USAGE, cli.EXIT_DATA)
    if argv[0] != "train" or "--model" not in argv:
        assert code == cli.EXIT_USAGE


def test_missing_data_is_data_error(capsys, tmp_path):
    assert cli.run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m")]) == cli.EXIT_DATA


def test_corrupt_checkpoint_is_data_error(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.dvck"
    bad.write_bytes(b"junk")
    assert cli.run(["eval", "--ckpt", str(bad), "--data", str(workspace / "data")]) == cli.EXIT_DATA


def test_scene_swap_without_teacher_is_usage_error(workspace, capsys, tmp_path):
    code = cli.run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"),
                    *TINY_TRAIN])
    assert code == cli.EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_training_exit_code(workspace, capsys, tmp_path):
    code = cli.run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"),
                    "--model", "two_token", "--lr", "1e300", *TINY_TRAIN[:-4], "--epochs", "2",
                    "--warmup-epochs", "0"])
    assert code == cli.EXIT_NUMERIC
    assert not (tmp_path / "m").exists()
    kept = load_checkpoint(str(tmp_path / "m.last_good"))
    assert all(np.isfinite(v).all() for v in kept.params.values())
