"""Point-correspondence alignment: least-squares 2-D similarity (and affine) fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np


class AlignmentError(ValueError):
    """Too few or degenerate correspondences to fit a transform."""


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + (tx, ty)``."""

    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")
        if not all(math.isfinite(v) for v in (self.rotation, self.tx, self.ty)):
            raise ValueError("transform parameters must be finite")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.linear()
        m[:2, 2] = (self.tx, self.ty)
        return m

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return p @ self.linear().T + np.array([self.tx, self.ty])

    def inverse(self) -> "SimilarityTransform":
        inv_s = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx = -inv_s * (c * self.tx - s * self.ty)
        ty = -inv_s * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_s, -self.rotation, tx, ty)

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """``self . first`` (apply ``first`` then ``self``)."""
        m = self.matrix() @ first.matrix()
        return SimilarityTransform(
            self.scale * first.scale, math.atan2(m[1, 0], m[0, 0]), float(m[0, 2]), float(m[1, 2])
        )


@dataclass(frozen=True)
class AffineTransform:
    """Full 6-DOF affine map, for experiments only."""

    a: np.ndarray  # (2, 3)

    def apply(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return p @ self.a[:, :2].T + self.a[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2] = self.a
        return m


def _split(pairs) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2:
        src, dst = pairs
    else:
        arr = np.asarray(pairs, dtype=np.float64)
        if arr.size == 0:
            return np.zeros((0, 2)), np.zeros((0, 2))
        src, dst = arr[:, 0], arr[:, 1]
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise AlignmentError("source and destination point counts differ")
    return src, dst


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    a = src - src_mean
    b = dst - dst_mean
    denom = float(np.sum(a * a))
    if denom <= 1e-18 * max(1.0, float(np.abs(src).max())) ** 2:
        raise AlignmentError("probe points are coincident")
    # closed form: [p, -q; q, p] minimises sum |[p,-q;q,p] a_i - b_i|^2
    p = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])) / denom
    q = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])) / denom
    scale = math.hypot(p, q)
    if scale == 0.0:
        raise AlignmentError("destination points are coincident")
    rot = math.atan2(q, p)
    t = dst_mean - np.array([p * src_mean[0] - q * src_mean[1], q * src_mean[0] + p * src_mean[1]])
    return SimilarityTransform(scale, rot, float(t[0]), float(t[1]))


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    if len(src) < 3:
        raise AlignmentError("affine fit needs at least 3 correspondences")
    h = np.hstack([src, np.ones((len(src), 1))])
    sol, _, rank, _ = np.linalg.lstsq(h, dst, rcond=None)
    if rank < 3:
        raise AlignmentError("probe points are collinear")
    return AffineTransform(sol.T.copy())


def estimate_transform(pairs, *, model: str = "similarity", trimmed: bool = False, trim_fraction: float = 0.2):
    """Least-squares transform mapping probe points onto gallery points.

    ``pairs`` is either ``(src, dst)`` arrays or a sequence of
    ``((px, py), (gx, gy))``.  With ``trimmed`` the worst ``trim_fraction`` of
    residuals is dropped and the model refitted once.
    """
    src, dst = _split(pairs)
    if len(src) < 2:
        raise AlignmentError(f"need at least 2 correspondences, got {len(src)}")
    fit = {"similarity": _fit_similarity, "affine": _fit_affine}.get(model)
    if fit is None:
        raise ValueError(f"unknown transform model {model!r}")
    t = fit(src, dst)
    if trimmed:
        keep = len(src) - int(math.floor(trim_fraction * len(src)))
        if keep >= 2 and keep < len(src):
            resid = np.linalg.norm(t.apply(src) - dst, axis=1)
            order = np.argsort(resid, kind="stable")[:keep]
            try:
                t = fit(src[order], dst[order])
            except AlignmentError:
                pass
    return t


def apply_transform(t, pts) -> np.ndarray:
    return t.apply(pts)


@dataclass(frozen=True)
class PatchFrame:
    """Oriented square sampling frame centred on a minutia.

    Frame pixel ``(u, v)`` (pixel centres, ``0..size-1``) maps to the image
    through a rotation by ``theta`` about the centre, so the minutia direction
    becomes the frame's +u axis.
    """

    cx: float
    cy: float
    theta: float
    size: int

    def to_image(self, u, v) -> np.ndarray:
        h = (self.size - 1) / 2.0
        du = np.asarray(u, dtype=np.float64) - h
        dv = np.asarray(v, dtype=np.float64) - h
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.stack([self.cx + c * du - s * dv, self.cy + s * du + c * dv], axis=-1)

    def corners(self) -> np.ndarray:
        e = self.size - 1
        return self.to_image([0, e, e, 0], [0, 0, e, e])

    def sample(self, image: np.ndarray) -> np.ndarray:
        """Bilinear sample of ``image`` on the frame grid (zero outside)."""
        import cv2

        u, v = np.meshgrid(np.arange(self.size), np.arange(self.size))
        xy = self.to_image(u, v).astype(np.float32)
        return cv2.remap(
            np.asarray(image, dtype=np.float32),
            xy[..., 0],
            xy[..., 1],
            interpolation=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=0,
        )


def patch_frame(m, size: int = 96) -> PatchFrame:
    return PatchFrame(float(m.x), float(m.y), float(m.theta), int(size))
