# snowsynth.py

"""Synthetic snowy images from clean ones.

A snowy observation is composed as

    K = J * (1 - Z) + C * Z
    I = K * T + A * (1 - T)

with J the clean scene, Z a soft snow mask, C a near-white snow colour per
channel, T a smooth transmission field and A a scalar atmospheric light.
All images are float arrays in [0, 1] with channels first.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError
from .tensor import Tensor

logger = logging.getLogger(__name__)

STREAK_SIGMA = 1.0
COARSE_GRID = 4


@dataclass
class SnowParams:
    mask_density: float = 3000.0  # particles per megapixel
    flake_radius_range: Tuple[float, float] = (1.0, 3.0)
    streak_length_range: Tuple[float, float] = (4.0, 14.0)
    streak_angle_range: Tuple[float, float] = (-30.0, 30.0)  # degrees from vertical
    streak_fraction: float = 0.3
    opacity_range: Tuple[float, float] = (0.6, 1.0)
    chroma_shift: Tuple[float, float] = (0.8, 1.0)
    transmission_range: Tuple[float, float] = (0.7, 1.0)
    atmospheric_range: Tuple[float, float] = (0.7, 1.0)
    seed: int = 0

    def validate(self):
        def ordered(name, lo_bound=None, hi_bound=None, open_low=False):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"snow.{name} must be ordered, got ({lo}, {hi})")
            if lo_bound is not None and (lo < lo_bound or (open_low and lo <= lo_bound)):
                raise ConfigError(f"snow.{name} lower end out of bounds: {lo}")
            if hi_bound is not None and hi > hi_bound:
                raise ConfigError(f"snow.{name} upper end out of bounds: {hi}")

        if self.mask_density < 0:
            raise ConfigError(f"snow.mask_density must be >= 0, got {self.mask_density}")
        if not 0.0 <= self.streak_fraction <= 1.0:
            raise ConfigError(f"snow.streak_fraction must lie in [0, 1], got {self.streak_fraction}")
        ordered("flake_radius_range", 0.0, open_low=True)
        ordered("streak_length_range", 0.0)
        ordered("streak_angle_range", -90.0, 90.0)
        ordered("opacity_range", 0.0, 1.0)
        ordered("chroma_shift", 0.0, 1.0)
        ordered("transmission_range", 0.0, 1.0, open_low=True)
        ordered("atmospheric_range", 0.0, 1.0)
        return self


@dataclass
class SnowLayers:
    mask: np.ndarray  # H x W
    transmission: np.ndarray  # H x W
    atmospheric: float
    color: np.ndarray  # 3


def derive_seed(seed, index):
    """Per-image seed: the run seed XOR a hash of the image index."""
    digest = hashlib.blake2b(str(int(index)).encode("ascii"), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & (2 ** 64 - 1)


# --- Degradation layers ---

def _draw_flake(canvas, rng, p, opacity):
    h, w = canvas.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    radius = rng.uniform(*p.flake_radius_range)
    sigma = radius / 2.0
    reach = int(np.ceil(3 * sigma)) + 1
    y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    disc = opacity * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    np.maximum(canvas[y0:y1, x0:x1], disc, out=canvas[y0:y1, x0:x1])


def _draw_streak(canvas, rng, p, opacity):
    """Anti-aliased one-pixel segment; coverage falls off linearly with distance."""
    h, w = canvas.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    length = rng.uniform(*p.streak_length_range)
    theta = np.deg2rad(rng.uniform(*p.streak_angle_range))
    dy, dx = np.cos(theta) * length / 2, np.sin(theta) * length / 2
    ay, ax, by, bx = cy - dy, cx - dx, cy + dy, cx + dx
    y0, y1 = max(int(min(ay, by)) - 1, 0), min(int(max(ay, by)) + 2, h)
    x0, x1 = max(int(min(ax, bx)) - 1, 0), min(int(max(ax, bx)) + 2, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    seg_y, seg_x = by - ay, bx - ax
    denom = max(seg_y * seg_y + seg_x * seg_x, 1e-12)
    s = np.clip(((yy - ay) * seg_y + (xx - ax) * seg_x) / denom, 0.0, 1.0)
    dist = np.hypot(yy - (ay + s * seg_y), xx - (ax + s * seg_x))
    line = opacity * np.clip(1.0 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1, x0:x1], line, out=canvas[y0:y1, x0:x1])


def snow_mask(rng, h, w, p: SnowParams):
    """Soft snow alpha map as an H x W array in [0, 1]."""
    flakes = np.zeros((h, w))
    streaks = np.zeros((h, w))
    count = rng.poisson(p.mask_density * h * w / 1e6)
    for _ in range(count):
        opacity = rng.uniform(*p.opacity_range)
        if rng.random() < p.streak_fraction:
            _draw_streak(streaks, rng, p, opacity)
        else:
            _draw_flake(flakes, rng, p, opacity)
    if streaks.any():
        streaks = gaussian_filter(streaks, STREAK_SIGMA, mode="nearest")
    return np.clip(np.maximum(flakes, streaks), 0.0, 1.0)


def transmission_field(rng, h, w, p: SnowParams):
    """Bilinear upsampling of a coarse uniform grid, mapped into the transmission range."""
    lo, hi = p.transmission_range
    knots = np.linspace(0.0, 1.0, COARSE_GRID)
    grid = rng.uniform(0.0, 1.0, size=(COARSE_GRID, COARSE_GRID))
    interp = RegularGridInterpolator((knots, knots), grid, method="linear")
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    smooth = interp(np.stack([yy.ravel(), xx.ravel()], axis=-1)).reshape(h, w)
    return np.clip(lo + (hi - lo) * smooth, lo, hi)


def gen_snow_mask(rng, h, w, p: SnowParams):
    return Tensor(snow_mask(rng, h, w, p).reshape(1, 1, h, w))


def gen_transmission(rng, h, w, p: SnowParams):
    return Tensor(transmission_field(rng, h, w, p).reshape(1, 1, h, w))


def gen_atmospheric(rng, p: SnowParams):
    return float(rng.uniform(*p.atmospheric_range))


def gen_snow_color(rng, p: SnowParams):
    return rng.uniform(*p.chroma_shift, size=3)


def draw_layers(rng, h, w, p: SnowParams):
    """Draws every degradation layer for one image in a fixed order."""
    mask = snow_mask(rng, h, w, p)
    transmission = transmission_field(rng, h, w, p)
    atmospheric = gen_atmospheric(rng, p)
    color = gen_snow_color(rng, p)
    return SnowLayers(mask, transmission, atmospheric, color)


# --- Composition ---

def compose_snowy(clean, mask, color, transmission, atmospheric):
    """Returns (clamped snowy image, veiling-free image, unclamped snowy image).

    ``clean`` is 3 x H x W; ``mask`` and ``transmission`` broadcast as H x W.
    """
    color = np.asarray(color, dtype=np.float64).reshape(3, 1, 1)
    veil_free = clean * (1.0 - mask) + color * mask
    raw = veil_free * transmission + atmospheric * (1.0 - transmission)
    return np.clip(raw, 0.0, 1.0), veil_free, raw


def _check_unit_range(images, what):
    if images.size and (images.min() < 0.0 or images.max() > 1.0 or not np.all(np.isfinite(images))):
        raise InputError(f"{what} must lie in [0, 1]")


def synthesize_snow(clean, p: SnowParams, rng):
    """Degrades an N x 3 x H x W batch; returns (snowy, mask, transmission, atmospheric) tensors."""
    images = np.asarray(clean.data if isinstance(clean, Tensor) else clean, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 3:
        raise InputError(f"expected an N x 3 x H x W batch, got shape {list(images.shape)}")
    _check_unit_range(images, "clean images")
    n, _, h, w = images.shape
    snowy = np.empty_like(images)
    masks = np.empty((n, 1, h, w))
    fields = np.empty((n, 1, h, w))
    lights = np.empty(n)
    for i in range(n):
        layers = draw_layers(rng, h, w, p)
        snowy[i], _, _ = compose_snowy(images[i], layers.mask, layers.color, layers.transmission,
                                       layers.atmospheric)
        masks[i, 0], fields[i, 0], lights[i] = layers.mask, layers.transmission, layers.atmospheric
    return Tensor(snowy), Tensor(masks), Tensor(fields), Tensor(lights)


# --- Augmentation ---

def augment(pair, rng, crop, flip=None, rotation=None):
    """Applies one random crop, horizontal flip and quarter-turn rotation to both images.

    Random draws happen in the same order whether or not ``flip``/``rotation``
    are forced, so overrides do not shift later draws.
    """
    snowy, clean = (np.asarray(a) for a in pair)
    if snowy.shape != clean.shape:
        raise InputError(f"pair shapes differ: {list(snowy.shape)} vs {list(clean.shape)}")
    h, w = snowy.shape[-2:]
    if crop > min(h, w) or crop < 1:
        raise InputError(f"crop {crop} does not fit a {h}x{w} image")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    drawn_flip = bool(rng.random() < 0.5)
    drawn_rotation = int(rng.integers(0, 4))
    flip = drawn_flip if flip is None else flip
    quarter_turns = drawn_rotation if rotation is None else (rotation // 90) % 4

    def transform(image):
        out = image[..., y:y + crop, x:x + crop]
        if flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(np.rot90(out, quarter_turns, axes=(-2, -1)))

    return transform(snowy), transform(clean)


# --- Procedural scenes ---

def gen_clean_scene(rng, h, w):
    """A smooth synthetic 3 x H x W scene: sky gradient, ground plane, blobs and texture."""
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    sky_top, sky_bottom = rng.uniform(0.3, 0.9, 3), rng.uniform(0.4, 1.0, 3)
    scene = sky_top[:, None, None] * (1 - yy) + sky_bottom[:, None, None] * yy

    horizon = rng.uniform(0.4, 0.75) + 0.08 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2.0) + rng.uniform()))
    ground = rng.uniform(0.1, 0.6, 3)
    scene = np.where(yy > horizon, ground[:, None, None] * (0.7 + 0.3 * yy), scene)

    for _ in range(int(rng.integers(2, 7))):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.05, 0.25, 2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        scene = np.where(inside, rng.uniform(0.0, 1.0, 3)[:, None, None], scene)

    texture = gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=max(h, w) / 64.0 + 0.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    scene = scene + 0.05 * texture
    return np.clip(scene, 0.0, 1.0)
