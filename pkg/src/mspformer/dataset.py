# dataset.py

"""Paired snowy/clean image directories and their manifest."""

import dataclasses
import glob
import logging
import os

import numpy as np

from . import snowsynth
from .config import format_value, parse_value
from .errors import FormatError, InputError
from .image_io import image_read, image_write
from .snowsynth import SnowParams

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
SNOW_SUFFIX = "_snow"
GT_SUFFIX = "_gt"


def pair_files(directory, name, ext="ppm"):
    return (os.path.join(directory, f"{name}{SNOW_SUFFIX}.{ext}"),
            os.path.join(directory, f"{name}{GT_SUFFIX}.{ext}"))


# --- Manifest ---

def write_manifest(directory, names, params: SnowParams, seed, ext="ppm"):
    lines = [f"seed={seed}", f"format={ext}", f"count={len(names)}"]
    lines += [f"snow.{f.name}={format_value(getattr(params, f.name))}" for f in dataclasses.fields(params)]
    lines += [f"pair={name}" for name in names]
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(directory):
    """Returns (pair names, SnowParams, seed, file extension)."""
    path = os.path.join(directory, MANIFEST)
    names, params, seed, ext = [], SnowParams(), 0, "ppm"
    offset = 0
    with open(path, "rb") as f:
        raw = f.read()
    for line in raw.decode("utf-8").splitlines(keepends=True):
        text = line.strip()
        key, sep, value = text.partition("=")
        if text and not sep:
            raise FormatError(f"manifest line without '=': {text!r}", offset=offset)
        if key == "pair":
            names.append(value)
        elif key == "seed":
            seed = int(value)
        elif key == "format":
            ext = value
        elif key.startswith("snow."):
            field = key[len("snow."):]
            if not hasattr(params, field):
                raise FormatError(f"unknown snow parameter '{field}'", offset=offset)
            setattr(params, field, parse_value(value, getattr(params, field), key))
        offset += len(line.encode("utf-8"))
    return names, params, seed, ext


def list_pairs(directory):
    """Pair names in manifest order, or sorted by file name when no manifest exists."""
    if not os.path.isdir(directory):
        raise InputError(f"dataset directory not found: {directory}")
    if os.path.exists(os.path.join(directory, MANIFEST)):
        names, _, _, ext = read_manifest(directory)
        return names, ext
    names = []
    ext = "ppm"
    for candidate in ("ppm", "png"):
        found = sorted(glob.glob(os.path.join(directory, f"*{SNOW_SUFFIX}.{candidate}")))
        if found:
            ext = candidate
            names = [os.path.basename(p)[: -len(f"{SNOW_SUFFIX}.{candidate}")] for p in found]
            break
    return names, ext


# --- Loading ---

class SnowDataset:
    """All readable pairs of a directory held in memory as 3 x H x W float arrays."""

    def __init__(self, directory):
        self.directory = directory
        self.names = []
        self.snowy = []
        self.clean = []
        self.skipped = 0
        names, ext = list_pairs(directory)
        for name in names:
            snow_path, gt_path = pair_files(directory, name, ext)
            try:
                snowy, clean = image_read(snow_path).data[0], image_read(gt_path).data[0]
            except (OSError, FormatError) as e:
                logger.warning("skipping pair=%s reason=%s", name, e)
                self.skipped += 1
                continue
            if snowy.shape != clean.shape:
                logger.warning("skipping pair=%s reason=shape mismatch", name)
                self.skipped += 1
                continue
            self.names.append(name)
            self.snowy.append(snowy)
            self.clean.append(clean)
        if not self.names:
            raise InputError(f"no readable image pairs in {directory}")
        logger.info("dataset=%s pairs=%d skipped=%d", directory, len(self.names), self.skipped)

    def __len__(self):
        return len(self.names)

    def pair(self, index):
        return self.names[index], self.snowy[index], self.clean[index]

    def batch(self, indices, rng, crop):
        """Augmented N x 3 x crop x crop arrays for the given indices, drawn in order."""
        snowy, clean = [], []
        for i in indices:
            a, b = snowsynth.augment((self.snowy[i], self.clean[i]), rng, crop)
            snowy.append(a)
            clean.append(b)
        return np.stack(snowy), np.stack(clean)


# --- Synthesis ---

def synthesize_dataset(out_dir, params: SnowParams, seed, count, clean_images=None, size=(64, 64), ext="ppm"):
    """Writes ``count`` snowy/clean pairs plus the manifest.

    Image ``i`` uses clean image ``i % len(clean_images)`` (or a procedural
    scene of ``size``) and its own generator seeded by ``derive_seed(seed, i)``.
    """
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(count):
        rng = np.random.default_rng(snowsynth.derive_seed(seed, i))
        if clean_images:
            clean = np.asarray(clean_images[i % len(clean_images)], dtype=np.float64)
        else:
            clean = snowsynth.gen_clean_scene(rng, *size)
        clean = np.rint(clean * 255.0) / 255.0
        layers = snowsynth.draw_layers(rng, clean.shape[1], clean.shape[2], params)
        snowy, _, _ = snowsynth.compose_snowy(clean, layers.mask, layers.color, layers.transmission,
                                              layers.atmospheric)
        name = f"img_{i:04d}"
        snow_path, gt_path = pair_files(out_dir, name, ext)
        image_write(snowy, snow_path)
        image_write(clean, gt_path)
        names.append(name)
    write_manifest(out_dir, names, params, seed, ext)
    logger.info("synth out=%s pairs=%d seed=%d", out_dir, count, seed)
    return names


def read_clean_dir(directory):
    """Clean source images (PPM or PNG) sorted by file name."""
    if not os.path.isdir(directory):
        raise InputError(f"clean image directory not found: {directory}")
    paths = sorted(glob.glob(os.path.join(directory, "*.ppm")) + glob.glob(os.path.join(directory, "*.png")))
    if not paths:
        raise InputError(f"no .ppm or .png images in {directory}")
    return [image_read(p).data[0].astype(np.float64) for p in paths]
