import numpy as np
import pytest

from conftest import write_ppm
from mspformer.errors import FormatError, InputError
from mspformer.image_io import decode_ppm, encode_ppm, image_read, image_write
from mspformer.tensor import Tensor


def test_header_definition():
    raw = b"P6\n2 2\n255\n" + bytes(range(12))
    pixels = decode_ppm(raw)
    assert pixels.shape == (3, 2, 2)
    assert pixels[:, 0, 0].tolist() == [0, 1, 2]
    assert pixels[:, 1, 1].tolist() == [9, 10, 11]


def test_header_comments_are_skipped():
    raw = b"P6 # made by hand\n1 1\n255\n\x01\x02\x03"
    assert decode_ppm(raw)[:, 0, 0].tolist() == [1, 2, 3]


def test_read_scales_to_unit_range(tmp_path):
    path = tmp_path / "a.ppm"
    write_ppm(path, np.full((3, 2, 2), 255, dtype=np.uint8))
    image = image_read(path)
    assert image.shape == (1, 3, 2, 2)
    assert np.all(image.data == 1.0)


def test_write_then_read_is_byte_identical(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
    first = tmp_path / "first.ppm"
    write_ppm(first, pixels)
    second = tmp_path / "second.ppm"
    image_write(image_read(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_write_clamps(tmp_path):
    path = tmp_path / "c.ppm"
    image_write(Tensor(np.array([[[[-0.5]], [[0.5]], [[1.5]]]])), path)
    assert decode_ppm(path.read_bytes())[:, 0, 0].tolist() == [0, 128, 255]


def test_write_rejects_batches(tmp_path):
    with pytest.raises(InputError):
        image_write(Tensor(np.zeros((2, 3, 2, 2))), tmp_path / "x.ppm")


@pytest.mark.parametrize("raw,offset", [
    (b"P5\n2 2\n255\n" + bytes(4), 0),
    (b"P6\n2 2\n65535\n" + bytes(24), 7),
    (b"P6\n2 x\n255\n" + bytes(12), 5),
    (b"P6\n2 2\n255\n" + bytes(5), 16),
    (b"P6\n2 2", 6),
    (b"P6\n2 2\n255", 10),
])
def test_malformed_headers_report_offsets(raw, offset):
    with pytest.raises(FormatError) as info:
        decode_ppm(raw)
    assert info.value.offset == offset


def test_png_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(3, 4, 6), dtype=np.uint8)
    path = tmp_path / "p.png"
    image_write(Tensor(pixels[None] / 255.0), path)
    np.testing.assert_array_equal(np.rint(image_read(path).data[0] * 255.0), pixels)


def test_encode_decode_inverse(rng):
    pixels = rng.integers(0, 256, size=(3, 3, 2), dtype=np.uint8)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(pixels)), pixels)
