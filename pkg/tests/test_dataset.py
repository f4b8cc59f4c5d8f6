import hashlib

import numpy as np
import pytest

from conftest import write_ppm
from mspformer import dataset
from mspformer.dataset import SnowDataset, list_pairs, read_manifest, synthesize_dataset
from mspformer.errors import FormatError, InputError
from mspformer.snowsynth import SnowParams


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synthesis_writes_pairs_and_manifest(tmp_path):
    params = SnowParams(mask_density=5000.0)
    names = synthesize_dataset(tmp_path, params, seed=3, count=3, size=(32, 48))
    assert names == ["img_0000", "img_0001", "img_0002"]
    for name in names:
        assert (tmp_path / f"{name}_snow.ppm").exists()
        assert (tmp_path / f"{name}_gt.ppm").exists()
    read_names, read_params, seed, ext = read_manifest(tmp_path)
    assert read_names == names
    assert read_params == params
    assert (seed, ext) == (3, "ppm")


def test_zero_count_gives_empty_manifest(tmp_path):
    assert synthesize_dataset(tmp_path, SnowParams(), seed=0, count=0) == []
    assert read_manifest(tmp_path)[0] == []
    with pytest.raises(InputError):
        SnowDataset(tmp_path)


def test_synthesis_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, 1), (b, 1), (c, 2)):
        synthesize_dataset(out, SnowParams(), seed=seed, count=2, size=(32, 32))
    for name in ("img_0000_snow.ppm", "img_0001_gt.ppm", "manifest.txt"):
        assert digest(a / name) == digest(b / name)
    assert digest(a / "img_0000_snow.ppm") != digest(c / "img_0000_snow.ppm")


def test_clean_images_are_reused_cyclically(tmp_path, rng):
    clean = [rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8))]
    synthesize_dataset(tmp_path, SnowParams(), seed=0, count=3, clean_images=clean)
    data = SnowDataset(tmp_path)
    np.testing.assert_allclose(data.clean[2], np.rint(clean[0] * 255) / 255, atol=1e-6)


def test_pairs_without_manifest_are_listed_by_name(tmp_path):
    pixels = np.zeros((3, 4, 4), dtype=np.uint8)
    for name in ("b", "a"):
        write_ppm(tmp_path / f"{name}_snow.ppm", pixels)
        write_ppm(tmp_path / f"{name}_gt.ppm", pixels)
    assert list_pairs(tmp_path) == (["a", "b"], "ppm")


def test_unreadable_pairs_are_skipped(tmp_path):
    synthesize_dataset(tmp_path, SnowParams(), seed=0, count=3, size=(32, 32))
    (tmp_path / "img_0001_gt.ppm").write_bytes(b"garbage")
    (tmp_path / "img_0002_snow.ppm").unlink()
    data = SnowDataset(tmp_path)
    assert data.names == ["img_0000"]
    assert data.skipped == 2


def test_missing_directory(tmp_path):
    with pytest.raises(InputError):
        SnowDataset(tmp_path / "nowhere")


def test_malformed_manifest(tmp_path):
    (tmp_path / dataset.MANIFEST).write_text("seed=1\npair=a\nbroken line\n", encoding="utf-8")
    with pytest.raises(FormatError) as info:
        read_manifest(tmp_path)
    assert info.value.offset == len("seed=1\npair=a\n")
    (tmp_path / dataset.MANIFEST).write_text("snow.wind=3\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_batch_draws_crops(tmp_path):
    synthesize_dataset(tmp_path, SnowParams(), seed=0, count=2, size=(40, 40))
    data = SnowDataset(tmp_path)
    snowy, clean = data.batch([1, 0, 1], np.random.default_rng(0), 32)
    assert snowy.shape == clean.shape == (3, 3, 32, 32)
