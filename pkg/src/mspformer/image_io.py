# image_io.py

"""8-bit image files: binary PPM (P6) always, PNG through matplotlib."""

import logging
import os

import numpy as np

from .errors import FormatError, InputError
from .tensor import Tensor

logger = logging.getLogger(__name__)

_WHITESPACE = b" \t\r\n\v\f"


def _header_fields(raw, count):
    """Reads ``count`` whitespace-separated header tokens, skipping '#' comments.

    Returns the tokens with their byte offsets and the offset of the raster.
    """
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos] in _WHITESPACE:
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= len(raw):
            raise FormatError("truncated PPM header", offset=pos)
        start = pos
        while pos < len(raw) and raw[pos] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((raw[start:pos], start))
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise FormatError("PPM header must end with a single whitespace byte", offset=pos)
    return tokens, pos + 1


def decode_ppm(raw):
    """Decodes P6 bytes into a 3 x H x W uint8 array."""
    if raw[:2] != b"P6":
        raise FormatError("not a binary PPM (expected magic 'P6')", offset=0)
    tokens, data_start = _header_fields(raw, 4)
    if tokens[0][0] != b"P6":
        raise FormatError("not a binary PPM (expected magic 'P6')", offset=0)
    values = []
    for token, offset in tokens[1:]:
        if not token.isdigit():
            raise FormatError(f"expected an unsigned integer, got {token!r}", offset=offset)
        values.append(int(token))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"image extents must be positive, got {width}x{height}", offset=tokens[1][1])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 8-bit PPM (255) is supported", offset=tokens[3][1])
    expected = width * height * 3
    raster = raw[data_start:data_start + expected]
    if len(raster) != expected:
        raise FormatError(f"raster holds {len(raster)} bytes, expected {expected}", offset=data_start + len(raster))
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1)


def encode_ppm(pixels):
    """Encodes a 3 x H x W uint8 array as P6 bytes."""
    _, height, width = pixels.shape
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes()


def to_uint8(image):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise InputError(f"can only write one image at a time, got batch of {data.shape[0]}")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise InputError(f"expected a 3 x H x W image, got shape {list(data.shape)}")
    return np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def image_read(path):
    """Reads a PPM or PNG file into a 1 x 3 x H x W tensor in [0, 1]."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        import matplotlib.image as mpimg

        pixels = mpimg.imread(path)
        if pixels.dtype != np.uint8:
            pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        pixels = pixels[..., :3].transpose(2, 0, 1)
    else:
        with open(path, "rb") as f:
            pixels = decode_ppm(f.read())
    return Tensor(pixels[None].astype(np.float64) / 255.0)


def image_write(image, path):
    """Writes a [0, 1] image as 8-bit PPM, or PNG when the suffix says so."""
    pixels = to_uint8(image)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        import matplotlib.image as mpimg

        mpimg.imsave(path, pixels.transpose(1, 2, 0))
        return
    with open(path, "wb") as f:
        f.write(encode_ppm(pixels))
