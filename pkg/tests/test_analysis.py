import numpy as np
import pandas as pd
import pytest

from mspformer import analysis
from mspformer.dataset import SnowDataset, synthesize_dataset
from mspformer.errors import ShapeError
from mspformer.model import ModelConfig, MSPFormer
from mspformer.snowsynth import SnowParams
from mspformer.tensor import Tape, Tensor


def test_charbonnier_of_equal_images_is_eps(float64, rng):
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    assert analysis.charbonnier(x, x, 1e-3).item() == 1e-3


def test_charbonnier_in_32_bit_holds_rounded_eps(rng):
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    assert x.data.dtype == np.float32
    assert analysis.charbonnier(x, x, 1e-3).item() == float(np.float32(1e-3))
    a, b = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
    expected = np.mean(np.sqrt((a.astype(np.float32) - b.astype(np.float32)).astype(np.float64) ** 2 + 1e-6))
    assert analysis.charbonnier(Tensor(a), Tensor(b)).item() == pytest.approx(expected, rel=1e-6)


def test_charbonnier_matches_formula(float64, rng):
    a, b = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
    expected = np.mean(np.sqrt((a - b) ** 2 + 1e-6))
    assert analysis.charbonnier(Tensor(a), Tensor(b)).item() == pytest.approx(expected, rel=1e-12)


def test_charbonnier_gradient_is_bounded(float64):
    pred = Tensor(np.array([[5.0, -5.0, 0.0]]), requires_grad=True)
    with Tape() as tape:
        loss = analysis.charbonnier(pred, Tensor(np.zeros((1, 3))))
    tape.backward(loss)
    assert np.all(np.abs(pred.grad) <= 1.0 / 3.0)
    assert pred.grad[0, 2] == 0.0


def test_charbonnier_shape_mismatch():
    with pytest.raises(ShapeError):
        analysis.charbonnier(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


def test_psnr_known_value():
    a = np.zeros((3, 4, 4))
    b = np.full((3, 4, 4), 0.1)
    assert analysis.psnr(a, b) == pytest.approx(20.0)
    assert analysis.psnr(a, a) == analysis.PSNR_CAP


def test_ssim_identity_and_ordering(rng):
    clean = rng.uniform(size=(3, 32, 32))
    assert analysis.ssim(clean, clean) == pytest.approx(1.0)
    slight = np.clip(clean + rng.normal(scale=0.02, size=clean.shape), 0, 1)
    heavy = np.clip(clean + rng.normal(scale=0.2, size=clean.shape), 0, 1)
    assert 1.0 > analysis.ssim(slight, clean) > analysis.ssim(heavy, clean)


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pairs")
    synthesize_dataset(out, SnowParams(), seed=5, count=2, size=(40, 40))
    return out


def identity_model():
    model = MSPFormer(ModelConfig.tiny(), seed=0)
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = 0.0
    return model


def test_identity_model_matches_baseline(pair_dir):
    result = analysis.evaluate(identity_model(), SnowDataset(pair_dir))
    assert list(result.table.columns) == analysis.EVAL_COLUMNS
    np.testing.assert_array_equal(result.table["psnr"], result.table["baseline_psnr"])
    np.testing.assert_array_equal(result.table["ssim"], result.table["baseline_ssim"])


def test_aggregate_is_mean_of_rows(pair_dir):
    result = analysis.evaluate(MSPFormer(ModelConfig.tiny(), seed=1), SnowDataset(pair_dir), workers=2)
    assert len(result.table) == 2
    assert result.mean_psnr == pytest.approx(sum(result.table["psnr"]) / 2)
    assert result.mean_ssim == pytest.approx(sum(result.table["ssim"]) / 2)
    assert result.table["name"].tolist() == ["img_0000", "img_0001"]


def test_report_is_tsv(pair_dir, tmp_path):
    result = analysis.evaluate(identity_model(), SnowDataset(pair_dir))
    path = tmp_path / "report.tsv"
    analysis.write_report(result, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t") == analysis.EVAL_COLUMNS
    assert len(lines) == 3
    table = pd.read_csv(path, sep="\t")
    assert table["name"].tolist() == ["img_0000", "img_0001"]
