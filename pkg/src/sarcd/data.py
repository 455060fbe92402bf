"""Rasters: PGM I/O, patch-pair extraction, synthetic speckled scenes, noise.

A grid is a 2-D ``float64`` numpy array (rows x columns) with intensities in
[0, 255]. Change maps and truth use 0 = unchanged, 255 = changed.
"""
from __future__ import annotations

import math
import os
import re

import numpy as np

from .model import INPUT_SIZE

GAUSSIAN_VAR_SCALE = 255.0
# scale sigma giving a unit-mean Rayleigh multiplier: sigma * sqrt(pi / 2) = 1
RAYLEIGH_UNIT_MEAN_SCALE = math.sqrt(2.0 / math.pi)
# Table VI labels its Rayleigh column sqrt(pi/2); read as sigma that gives mean pi/2
RAYLEIGH_TABLE_SCALE = math.sqrt(math.pi / 2.0)
SWEEP_VARIANCES = (0, 20, 40, 60, 80, 100)


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


# PGM ----------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM with maxval 255 into a float grid."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise PGMError(f"{path}: byte 0: expected magic b'P5', found {raw[:2]!r}")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise PGMError(f"{path}: byte {pos}: missing or non-numeric {name}")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise PGMError(f"{path}: byte {pos}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise PGMError(f"{path}: byte {pos}: bad dimensions {width}x{height}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PGMError(f"{path}: byte {pos}: expected a single whitespace before the raster")
    pos += 1
    need = width * height
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise PGMError(f"{path}: byte {pos + len(payload)}: truncated raster, "
                       f"{len(payload)} of {need} bytes present")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def save_pgm(grid, path) -> None:
    """Write a grid as binary PGM, rounding to 8 bits."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {arr.shape}")
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = data.shape
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


# patches -------------------------------------------------------------------

def _check_r(r: int) -> None:
    if r < 1 or r % 2 == 0:
        raise ValueError(f"patch size r must be a positive odd integer, got {r}")


def extract_patch(grid: np.ndarray, center: tuple[int, int], r: int) -> np.ndarray:
    """The r x r window around ``center``; out-of-image pixels replicate the edge."""
    _check_r(r)
    h, w = grid.shape
    row, col = center
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center {center} outside {h}x{w} grid")
    half = r // 2
    rows = np.clip(np.arange(row - half, row + half + 1), 0, h - 1)
    cols = np.clip(np.arange(col - half, col + half + 1), 0, w - 1)
    return grid[np.ix_(rows, cols)]


def extract_patches(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray, r: int) -> np.ndarray:
    """Vectorized :func:`extract_patch` for many centers -> (n, r, r)."""
    _check_r(r)
    half = r // 2
    padded = np.pad(grid, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (r, r))
    return windows[np.asarray(rows), np.asarray(cols)]


def bilinear_matrix(src: int, dst: int = INPUT_SIZE) -> np.ndarray:
    """(dst, src) interpolation weights with corner-aligned sampling."""
    if src < 1:
        raise ValueError("source size must be >= 1")
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1) if dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m


def resize_bilinear(window: np.ndarray, target: int = INPUT_SIZE) -> np.ndarray:
    """Resize an (..., r, r) window stack to (..., target, target)."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < 2 or window.shape[-2] < 2:
        raise ValueError("bilinear resize needs a window of at least 2x2")
    a = bilinear_matrix(window.shape[-2], target)
    b = bilinear_matrix(window.shape[-1], target)
    return a @ window @ b.T


def normalize(patch):
    return np.asarray(patch, dtype=np.float64) / 255.0


def patch_pairs(i1: np.ndarray, i2: np.ndarray, rows, cols, r: int, dtype=np.float32):
    """Network-ready inputs (n, 1, 28, 28) for both dates at the given centers."""
    a = normalize(resize_bilinear(extract_patches(i1, rows, cols, r)))
    b = normalize(resize_bilinear(extract_patches(i2, rows, cols, r)))
    return a[:, None].astype(dtype), b[:, None].astype(dtype)


# synthetic scenes -----------------------------------------------------------

def _ellipse(shape, rng, min_axis, max_axis):
    h, w = shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ay, ax = rng.uniform(min_axis, max_axis, size=2)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def speckle(shape, looks: float, rng) -> np.ndarray:
    """Unit-mean gamma multiplier of shape ``looks`` (variance 1 / looks)."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def synth_scene(size: int = 256, seed: int = 0, looks: float = 4, n_regions: int = 3,
                n_background: int = 14, change_gain: float = 10.0, return_reflectivity: bool = False):
    """Two speckled acquisitions of a piecewise-constant scene and the change truth.

    Returns ``(i1, i2, truth)``. Reflectivity comes from random ellipses over
    a uniform background; inside ``n_regions`` further ellipses the second
    date's reflectivity is multiplied or divided by ``change_gain``. Each
    date gets independent L-look speckle. ``truth`` is 255 exactly where the
    noise-free reflectivities differ. With ``return_reflectivity`` the two
    noise-free maps are appended to the result.
    """
    if size < 64:
        raise ValueError(f"scene size must be >= 64, got {size}")
    if looks < 1:
        raise ValueError(f"looks must be >= 1, got {looks}")
    if change_gain <= 1:
        raise ValueError("change_gain must exceed 1")
    rng = np.random.default_rng(seed)
    shape = (size, size)
    refl = np.full(shape, rng.uniform(30, 60))
    for _ in range(n_background):
        refl[_ellipse(shape, rng, size / 20, size / 5)] = rng.uniform(25, 60)
    refl2 = refl.copy()
    changed = np.zeros(shape, dtype=bool)
    for _ in range(n_regions):
        region = _ellipse(shape, rng, size / 18, size / 8) & ~changed
        gain = change_gain if rng.random() < 0.5 else 1.0 / change_gain
        refl2[region] = refl[region] * gain
        changed |= region
    i1 = np.clip(refl * speckle(shape, looks, rng), 0, 255)
    i2 = np.clip(refl2 * speckle(shape, looks, rng), 0, 255)
    truth = np.where(changed, 255.0, 0.0)
    if return_reflectivity:
        return i1, i2, truth, refl, refl2
    return i1, i2, truth


# noise injection -------------------------------------------------------------

def noise_multiplier(shape, model: str = "gaussian", var: float = 0.0,
                     scale: float = RAYLEIGH_UNIT_MEAN_SCALE, seed: int = 0) -> np.ndarray:
    """The per-pixel factor n of ``I * n`` before clamping.

    ``model="gaussian"``: n ~ Normal(1, var / 255). ``model="rayleigh"``:
    n ~ Rayleigh(scale); the default scale gives E[n] = 1.
    """
    rng = np.random.default_rng(seed)
    if model == "gaussian":
        if var < 0:
            raise ValueError(f"noise variance must be >= 0, got {var}")
        if var == 0:
            return np.ones(shape)
        return rng.normal(1.0, math.sqrt(var / GAUSSIAN_VAR_SCALE), size=shape)
    if model == "rayleigh":
        if scale <= 0:
            raise ValueError(f"Rayleigh scale must be > 0, got {scale}")
        return rng.rayleigh(scale, size=shape)
    raise ValueError(f"unknown noise model {model!r}")


def inject_noise(grid: np.ndarray, model: str = "gaussian", var: float = 0.0,
                 scale: float = RAYLEIGH_UNIT_MEAN_SCALE, seed: int = 0) -> np.ndarray:
    """Multiplicative noise I * n (see :func:`noise_multiplier`), clamped to [0, 255]."""
    grid = np.asarray(grid, dtype=np.float64)
    n = noise_multiplier(grid.shape, model, var, scale, seed)
    if model == "gaussian" and var == 0:
        return grid.copy()
    return np.clip(grid * n, 0, 255)
