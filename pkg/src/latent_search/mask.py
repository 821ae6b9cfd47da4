"""Ridge-map segmentation, canonical cropping, block orientation and the virtual-minutiae grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import cv2
import numpy as np

from .template import Kind, Minutia

CANONICAL_SIZE = 512
RIDGE_THRESHOLD = 150
MIN_MASK_AREA = 10_000
BLUR_KSIZE = 5
MORPH_KSIZE = 9
MORPH_REPEATS = 3


@dataclass(frozen=True)
class OrientationField:
    block_size: int
    angles: np.ndarray  # radians in [0, pi), one per block
    coherence: np.ndarray  # [0, 1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.angles.shape

    def angle_at(self, x: float, y: float) -> float:
        r = min(int(y) // self.block_size, self.angles.shape[0] - 1)
        c = min(int(x) // self.block_size, self.angles.shape[1] - 1)
        return float(self.angles[r, c])


def blur_sigma(ksize: int = BLUR_KSIZE) -> float:
    return 0.3 * ((ksize - 1) / 2 - 1) + 0.8


def _segment(ridge: np.ndarray) -> np.ndarray:
    """Blur, threshold and clean a ridge map; returns the mask before the area fallback."""
    img = np.ascontiguousarray(ridge, dtype=np.uint8)
    blurred = cv2.GaussianBlur(img, (BLUR_KSIZE, BLUR_KSIZE), blur_sigma())
    mask = (blurred > RIDGE_THRESHOLD).astype(np.uint8)
    kernel = np.ones((MORPH_KSIZE, MORPH_KSIZE), np.uint8)
    # default border value: pixels outside the frame never erode or dilate the inside
    mask = cv2.morphologyEx(mask, cv2.MORPH_CLOSE, kernel, iterations=MORPH_REPEATS)
    mask = cv2.morphologyEx(mask, cv2.MORPH_OPEN, kernel, iterations=MORPH_REPEATS)
    return mask


def binarize_ridge_image(ridge: np.ndarray) -> np.ndarray:
    """Turn a gray ridge map (0..255) into a {0, 1} segmentation mask.

    Small or empty foregrounds (< 10,000 px after morphology) fall back to the
    whole frame.
    """
    ridge = np.asarray(ridge)
    if ridge.ndim != 2:
        raise ValueError("ridge image must be 2-D")
    if ridge.min(initial=0) < 0 or ridge.max(initial=0) > 255:
        raise ValueError("ridge image values must lie in [0, 255]")
    mask = _segment(ridge)
    if int(mask.sum()) < MIN_MASK_AREA:
        return np.ones_like(mask)
    return mask


def mask_centroid(mask: np.ndarray) -> Tuple[float, float]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        h, w = mask.shape
        return ((w - 1) / 2.0, (h - 1) / 2.0)
    return (float(xs.mean()), float(ys.mean()))


def crop_to_canonical(img: np.ndarray, center: Tuple[float, float], size: int = CANONICAL_SIZE) -> np.ndarray:
    """Cut a ``size x size`` window centred at ``center`` (x, y), zero padding outside the source."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    x0 = int(math.floor(center[0] + 0.5)) - size // 2
    y0 = int(math.floor(center[1] + 0.5)) - size // 2
    out = np.zeros((size, size) + img.shape[2:], dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def estimate_orientation_field(img: np.ndarray, block: int = 16) -> OrientationField:
    """Block ridge orientation by averaged squared Sobel gradients.

    Angles are ridge directions in [0, pi) measured from the +x image axis;
    coherence is ``|(Gxx - Gyy, 2 Gxy)| / (Gxx + Gyy)`` per block.
    """
    if block < 4:
        raise ValueError("block size must be >= 4")
    f = np.asarray(img, dtype=np.float64)
    gx = cv2.Sobel(f, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(f, cv2.CV_64F, 0, 1, ksize=3)
    h, w = f.shape
    rows, cols = -(-h // block), -(-w // block)
    pad = ((0, rows * block - h), (0, cols * block - w))

    def block_sum(a: np.ndarray) -> np.ndarray:
        return np.pad(a, pad).reshape(rows, block, cols, block).sum(axis=(1, 3))

    gxx = block_sum(gx * gx)
    gyy = block_sum(gy * gy)
    gxy = block_sum(gx * gy)
    num_x = gxx - gyy
    num_y = 2.0 * gxy
    angles = np.mod(0.5 * np.arctan2(num_y, num_x) + math.pi / 2, math.pi)
    energy = gxx + gyy
    mag = np.hypot(num_x, num_y)
    scale = np.maximum(np.abs(energy).max(initial=0.0), 1.0)
    flat = energy <= 1e-12 * scale
    coherence = np.where(flat, 0.0, mag / np.where(flat, 1.0, energy))
    angles = np.where(flat, 0.0, angles)
    # pi can appear from mod rounding
    angles[angles >= math.pi] = 0.0
    return OrientationField(block, angles, np.clip(coherence, 0.0, 1.0))


def grid_points(width: int, height: int, spacing: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    half = spacing // 2
    return np.arange(half, width, spacing), np.arange(half, height, spacing)


def place_virtual_minutiae(mask: np.ndarray, field: OrientationField, spacing: int = 16) -> List[Minutia]:
    """Grid keypoints at ``(8 + 16 i, 8 + 16 j)`` on mask foreground, oriented by the field."""
    pts = virtual_grid(mask, field, spacing)
    return [Minutia(float(x), float(y), float(t), Kind.VIRTUAL) for x, y, t in pts]


def virtual_grid(mask: np.ndarray, field: OrientationField, spacing: int = 16) -> np.ndarray:
    """Array form of :func:`place_virtual_minutiae`: ``(n, 3)`` rows of ``x, y, theta`` in row-major order."""
    mask = np.asarray(mask)
    h, w = mask.shape
    xs, ys = grid_points(w, h, spacing)
    if len(xs) == 0 or len(ys) == 0:
        return np.zeros((0, 3))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    keep = mask[gy, gx] != 0
    px, py = gx[keep], gy[keep]
    rows = np.minimum(py // field.block_size, field.angles.shape[0] - 1)
    cols = np.minimum(px // field.block_size, field.angles.shape[1] - 1)
    theta = field.angles[rows, cols]
    return np.stack([px, py, theta], axis=1).astype(np.float64)
