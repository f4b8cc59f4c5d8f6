import importlib
import os

import numpy as np
import pandas as pd
import pytest

import mspformer
from conftest import write_ppm
from mspformer.checkpoint import save_checkpoint
from mspformer.config import from_ini
from mspformer.main import main
from mspformer.model import MSPFormer

TINY = """
[model]
stage_dims = 8, 16, 32, 64
encoder_depths = 1, 1, 1, 1
decoder_depths = 1, 1, 1
heads = 2, 2, 2, 2
ffn_expansion = 1

[train]
epochs = 1
batch = 1
crop = 32
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.ini"
    config.write_text(TINY, encoding="utf-8")
    assert main(["synth", "--out", str(root / "data"), "--count", "2", "--size", "32x32", "--seed", "3", "-q"]) == 0
    return root, config


def test_cost_prints_totals(capsys):
    assert main(["cost", "-q"]) == 0
    out = capsys.readouterr().out
    assert "params=2486999" in out
    assert "res=256x256" in out


def test_cost_per_layer(capsys, workspace):
    _, config = workspace
    assert main(["cost", "--config", str(config), "--res", "64x64", "--per-layer", "-q"]) == 0
    out = capsys.readouterr().out
    assert "stem" in out and "refine.msp0.attn.q" in out


def test_synth_zero_count(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "0", "-q"]) == 0
    assert "count=0" in (tmp_path / "manifest.txt").read_text(encoding="utf-8")


def test_synth_is_reproducible(tmp_path):
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        main(["synth", "--out", str(tmp_path / name), "--count", "1", "--seed", seed, "-q"])
    snow = "img_0000_snow.ppm"
    assert (tmp_path / "a" / snow).read_bytes() == (tmp_path / "b" / snow).read_bytes()
    assert (tmp_path / "a" / snow).read_bytes() != (tmp_path / "c" / snow).read_bytes()


def test_synth_from_clean_directory(tmp_path, rng):
    clean = tmp_path / "clean"
    clean.mkdir()
    write_ppm(clean / "x.ppm", rng.integers(0, 256, size=(3, 16, 16)))
    assert main(["synth", "--clean", str(clean), "--out", str(tmp_path / "out"), "-q"]) == 0
    assert (tmp_path / "out" / "img_0000_gt.ppm").read_bytes() == (clean / "x.ppm").read_bytes()


@pytest.mark.parametrize("argv", [
    ["synth", "--clean", "/nonexistent/clean", "--out", "unused"],
    ["train", "--data", "/nonexistent/data", "--out", "unused"],
    ["eval", "--ckpt", "/nonexistent/a.mspf", "--data", "/nonexistent/data"],
    ["infer", "--ckpt", "/nonexistent/a.mspf", "--input", "a.ppm", "--output", "b.ppm"],
    ["cost", "--set", "train.crop=48"],
    ["cost", "--set", "model.nope=1"],
    ["cost", "--config", "/nonexistent/run.ini"],
])
def test_usage_errors_exit_2(argv):
    assert main(argv + ["-q"]) == 2


@pytest.mark.parametrize("argv", [
    ["ablate", "--variant", "bogus", "--data", "d", "--out", "o"],
    ["gradcheck", "--scope", "everything"],
    ["cost", "--res", "big"],
])
def test_argument_errors_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_train_infer_eval(tmp_path, workspace, rng):
    root, config = workspace
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(out), "-q"]) == 0
    ckpt = out / "final.mspf"
    assert ckpt.exists()

    source = tmp_path / "in.ppm"
    write_ppm(source, rng.integers(0, 256, size=(3, 65, 65)))
    first, second = tmp_path / "a.ppm", tmp_path / "b.ppm"
    for target in (first, second):
        assert main(["infer", "--ckpt", str(ckpt), "--input", str(source), "--output", str(target), "-q"]) == 0
    assert first.read_bytes().startswith(b"P6\n65 65\n255\n")
    assert first.read_bytes() == second.read_bytes()

    report, figure = tmp_path / "report.tsv", tmp_path / "panel.png"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"), "--report", str(report),
                 "--figure", str(figure), "-q"]) == 0
    assert len(pd.read_csv(report, sep="\t")) == 2
    assert figure.stat().st_size > 0


def test_zero_head_checkpoint_infers_identity(tmp_path, rng):
    cfg = from_ini(TINY)
    model = MSPFormer(cfg.model, seed=0)
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = 0.0
    ckpt = tmp_path / "identity.mspf"
    save_checkpoint(ckpt, model, config_text=cfg.to_ini())
    source, target = tmp_path / "in.ppm", tmp_path / "out.ppm"
    write_ppm(source, rng.integers(0, 256, size=(3, 40, 50)))
    assert main(["infer", "--ckpt", str(ckpt), "--input", str(source), "--output", str(target), "-q"]) == 0
    assert source.read_bytes() == target.read_bytes()


def test_deterministic_training_is_byte_identical(tmp_path, workspace):
    root, config = workspace
    for name in ("a", "b"):
        argv = ["train", "--config", str(config), "--data", str(root / "data"), "--out", str(tmp_path / name),
                "--deterministic", "-q"]
        assert main(argv) == 0
    for name in ("final.mspf", "metrics.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_without_remaining_epochs(tmp_path, workspace):
    root, config = workspace
    out = tmp_path / "run"
    base = ["train", "--config", str(config), "--data", str(root / "data"), "--out", str(out), "-q"]
    assert main(base) == 0
    resumed = tmp_path / "resume_from.mspf"
    resumed.write_bytes((out / "final.mspf").read_bytes())
    assert main(base + ["--resume", str(resumed)]) == 0
    assert (out / "final.mspf").read_bytes() == resumed.read_bytes()


def test_non_finite_parameters_exit_3(tmp_path, workspace):
    root, config = workspace
    cfg = from_ini(TINY)
    model = MSPFormer(cfg.model, seed=0)
    model.head.bias.data[0] = np.nan
    ckpt = tmp_path / "broken.mspf"
    save_checkpoint(ckpt, model, config_text=cfg.to_ini())
    out = tmp_path / "run"
    argv = ["train", "--config", str(config), "--data", str(root / "data"), "--out", str(out),
            "--resume", str(ckpt), "-q"]
    assert main(argv) == 3
    assert (out / "last_good.mspf").exists()


def test_ablate_table(tmp_path, workspace):
    root, config = workspace
    out = tmp_path / "ablate"
    argv = ["ablate", "--config", str(config), "--data", str(root / "data"), "--out", str(out),
            "--variant", "msp", "no-cs", "sra", "no-lcb", "--res", "64x64", "-q"]
    assert main(argv) == 0
    table = pd.read_csv(out / "ablation.tsv", sep="\t").set_index("variant")
    assert list(table.columns) == ["params", "macs", "psnr", "ssim"]
    assert table.loc["no-cs", "params"] == table.loc["msp", "params"]
    assert table.loc["sra", "params"] > table.loc["msp", "params"]
    assert table.loc["no-lcb", "params"] < table.loc["msp", "params"]
    assert (out / "msp" / "final.mspf").exists()


def test_gradcheck_ops_passes(capsys):
    assert main(["gradcheck", "--scope", "ops", "--instances", "1", "-q"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_failed_gradcheck_is_a_numeric_failure(capsys):
    assert main(["gradcheck", "--scope", "ops", "--instances", "1", "--tol", "0", "-q"]) == 3
    assert capsys.readouterr().out.strip().startswith("[ops] tol=0 step=1e-06")


def test_thread_variable_sizes_blas_pools(monkeypatch):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.setenv(var, "0")
        monkeypatch.delenv(var)
    monkeypatch.setenv("MSPF_THREADS", "3")
    importlib.reload(mspformer)
    assert os.environ["OPENBLAS_NUM_THREADS"] == "3"
    assert os.environ["OMP_NUM_THREADS"] == "3"
