"""Seeded synthetic identities and template-level impressions of them.

A :class:`MasterFinger` is a canonical 512x512 finger: an elliptical mask, a
loop-like orientation field, 40-70 minutiae with unit descriptors, a lattice of
random anchors that defines a smooth descriptor field for virtual minutiae,
and an identity embedding.  :func:`synth_observe` turns a master into a
:class:`~latent_search.template.FingerprintTemplate` by a seeded rigid motion,
partial crop, minutia dropout, positional/angular jitter and descriptor and
embedding noise.

Sampling recipe of :func:`synth_observe` (the draw order is part of the
contract; ``k`` is the master minutia count)::

    rot  = rng.uniform(-rotation_range, rotation_range)
    t    = rng.uniform(-translation_range, translation_range, 2)
    psi  = rng.uniform(0, 2 pi)                 # crop direction
    keep = rng.random(k) >= dropout
    jxy  = rng.normal(0, position_jitter, (k, 2))
    jth  = rng.normal(0, angle_jitter, k)
    dn   = rng.normal(0, descriptor_noise, (k, 96))
    en   = rng.normal(0, embedding_noise, 768)
    vn   = rng.normal(0, descriptor_noise, (n_virtual, 96))

The rigid motion rotates by ``rot`` about the frame centre (256, 256) and then
shifts by ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .alignment import SimilarityTransform
from .mask import OrientationField, virtual_grid
from .template import (
    DESCRIPTOR_DIM,
    EMBEDDING_HALF,
    FingerprintTemplate,
    GlobalEmbedding,
    Kind,
    MinutiaeTemplate,
    Modality,
    SyntheticTruth,
    VirtualMinutiaeTemplate,
)

FRAME = 512
CENTER = (FRAME / 2.0, FRAME / 2.0)
ANCHOR_SPACING = 32
MIN_SEPARATION = 10.0
SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class ObservationParams:
    rotation_range: float = math.pi / 6
    translation_range: float = 30.0
    dropout: float = 0.4
    position_jitter: float = 2.0
    angle_jitter: float = math.radians(5.0)
    descriptor_noise: float = 0.25
    embedding_noise: float = 0.35
    crop_fraction: float = 0.6

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must lie in (0, 1]")
        for name in (
            "rotation_range",
            "translation_range",
            "position_jitter",
            "angle_jitter",
            "descriptor_noise",
            "embedding_noise",
        ):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")


LATENT = ObservationParams()
ROLLED = ObservationParams(
    rotation_range=math.radians(5.0),
    translation_range=10.0,
    dropout=0.05,
    position_jitter=0.5,
    angle_jitter=math.radians(2.0),
    descriptor_noise=0.05,
    embedding_noise=0.02,
    crop_fraction=1.0,
)
NOISELESS = ObservationParams(
    rotation_range=math.pi / 6,
    translation_range=30.0,
    dropout=0.0,
    position_jitter=0.0,
    angle_jitter=0.0,
    descriptor_noise=0.0,
    embedding_noise=0.0,
    crop_fraction=1.0,
)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def wrap_angles_f32(theta: np.ndarray, period: float = 2 * math.pi) -> np.ndarray:
    """Reduce angles into ``[0, period)`` so the float32 value also stays below ``period``."""
    t = np.mod(np.asarray(theta, dtype=np.float64), period).astype(np.float32)
    t[t.astype(np.float64) >= period] = 0.0
    return t


def _loop_orientation(core, base, x, y) -> np.ndarray:
    a = base + 0.5 * np.arctan2(np.asarray(y) - core[1], np.asarray(x) - core[0])
    return np.mod(a, math.pi)


@dataclass(frozen=True, eq=False)
class MasterFinger:
    identity_id: str
    seed: int
    index: int
    points: np.ndarray  # (k, 3) float64: x, y, theta
    kinds: np.ndarray
    descriptors: np.ndarray  # (k, 96) float32
    identity_embedding: GlobalEmbedding
    mask: np.ndarray  # (512, 512) uint8
    core: Tuple[float, float]
    base_angle: float
    anchors: np.ndarray  # (17, 17, 96) float64

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MasterFinger):
            return NotImplemented
        arrays = ("points", "kinds", "descriptors", "mask", "anchors")
        return (
            (self.identity_id, self.seed, self.index, self.core, self.base_angle)
            == (other.identity_id, other.seed, other.index, other.core, other.base_angle)
            and self.identity_embedding == other.identity_embedding
            and all(getattr(self, a).tobytes() == getattr(other, a).tobytes() for a in arrays)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def master_minutiae(self):
        return MinutiaeTemplate(self.points, self.kinds, self.descriptors).minutiae()

    def orientation(self, x, y) -> np.ndarray:
        """Ridge orientation in [0, pi) at master-frame coordinates."""
        return _loop_orientation(self.core, self.base_angle, x, y)

    def virtual_descriptors(self, xy: np.ndarray) -> np.ndarray:
        """Noise-free (unnormalised) descriptor field sampled at master-frame points."""
        xy = np.clip(np.asarray(xy, dtype=np.float64).reshape(-1, 2), 0.0, FRAME)
        u = xy / ANCHOR_SPACING
        last = self.anchors.shape[0] - 2
        i0 = np.clip(np.floor(u).astype(np.int64), 0, last)
        f = u - i0
        cx, cy = i0[:, 0], i0[:, 1]
        fx, fy = f[:, :1], f[:, 1:]
        a = self.anchors
        return (
            a[cy, cx] * (1 - fx) * (1 - fy)
            + a[cy, cx + 1] * fx * (1 - fy)
            + a[cy + 1, cx] * (1 - fx) * fy
            + a[cy + 1, cx + 1] * fx * fy
        )


@lru_cache(maxsize=200_000)
def identity_embedding(seed: int, index: int) -> GlobalEmbedding:
    rng = np.random.default_rng([seed, index, 1])
    za = _unit_rows(rng.normal(size=EMBEDDING_HALF))
    zc = _unit_rows(rng.normal(size=EMBEDDING_HALF))
    return GlobalEmbedding(za, zc)


def _ellipse_mask(cx, cy, a, b, phi) -> np.ndarray:
    # only the bounding square of the ellipse can be foreground
    r = math.ceil(max(a, b)) + 1
    x0, x1 = max(0, int(cx) - r), min(FRAME, int(cx) + r + 1)
    y0, y1 = max(0, int(cy) - r), min(FRAME, int(cy) + r + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs + 0.0 - cx, ys + 0.0 - cy
    c, s = math.cos(phi), math.sin(phi)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    out = np.zeros((FRAME, FRAME), np.uint8)
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def synth_master(seed: int, index: int) -> MasterFinger:
    """Deterministic synthetic finger for ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    cx, cy = CENTER[0] + rng.uniform(-20, 20), CENTER[1] + rng.uniform(-20, 20)
    a, b = rng.uniform(55, 70), rng.uniform(75, 95)
    phi = rng.uniform(0, math.pi)
    core = (cx + rng.uniform(-30, 30), cy + rng.uniform(-30, 30))
    base = rng.uniform(0, math.pi)
    count = int(rng.integers(40, 71))

    c, s = math.cos(phi), math.sin(phi)
    pts = np.empty((count, 2))
    placed = 0
    attempts = 0
    while placed < count and attempts < 20_000:
        attempts += 1
        x, y = rng.uniform(cx - b, cx + b), rng.uniform(cy - b, cy + b)
        dx, dy = x - cx, y - cy
        u, v = (c * dx + s * dy) / (a - 4), (-s * dx + c * dy) / (b - 4)
        if u * u + v * v > 1.0:
            continue
        near = (x - pts[:placed, 0]) ** 2 + (y - pts[:placed, 1]) ** 2 < MIN_SEPARATION**2
        if near.any():
            continue
        pts[placed] = x, y
        placed += 1
    xy = pts[:placed]
    count = len(xy)
    flip = rng.integers(0, 2, count)
    theta = np.mod(_loop_orientation(core, base, xy[:, 0], xy[:, 1]) + math.pi * flip, 2 * math.pi)
    kinds = rng.integers(0, 2, count).astype(np.uint8)
    desc = _unit_rows(rng.normal(size=(count, DESCRIPTOR_DIM))).astype(np.float32)
    n_anchor = FRAME // ANCHOR_SPACING + 1
    anchors = rng.normal(size=(n_anchor, n_anchor, DESCRIPTOR_DIM))
    return MasterFinger(
        identity_id=f"id{index:06d}",
        seed=int(seed),
        index=int(index),
        points=np.column_stack([xy, theta]),
        kinds=kinds,
        descriptors=desc,
        identity_embedding=identity_embedding(int(seed), int(index)),
        mask=_ellipse_mask(cx, cy, a, b, phi),
        core=core,
        base_angle=base,
        anchors=anchors,
    )


def rigid_transform(rot: float, t) -> SimilarityTransform:
    """Rotation by ``rot`` about the frame centre followed by a shift ``t``."""
    c, s = math.cos(rot), math.sin(rot)
    tx = CENTER[0] + t[0] - (c * CENTER[0] - s * CENTER[1])
    ty = CENTER[1] + t[1] - (s * CENTER[0] + c * CENTER[1])
    return SimilarityTransform(1.0, rot, tx, ty)


def _crop_region(master: MasterFinger, psi: float, fraction: float):
    """Half-plane cut keeping ``fraction`` of the mask area; returns (region mask, projector, threshold)."""
    ys, xs = np.nonzero(master.mask)
    mx, my = xs.mean(), ys.mean()
    u = np.array([math.cos(psi), math.sin(psi)])

    def project(xy):
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return (xy[:, 0] - mx) * u[0] + (xy[:, 1] - my) * u[1]

    if fraction >= 1.0:
        return master.mask, project, math.inf
    proj = (xs - mx) * u[0] + (ys - my) * u[1]
    thr = float(np.quantile(proj, fraction))
    region = master.mask.copy()
    region[ys[proj > thr], xs[proj > thr]] = 0
    return region, project, thr


def synth_observe(
    master: MasterFinger,
    params: ObservationParams = LATENT,
    seed: SeedLike = 0,
    *,
    template_id: Optional[str] = None,
    modality: Modality = Modality.LATENT,
) -> FingerprintTemplate:
    """One seeded impression of ``master`` as a template (see module docstring for the recipe)."""
    rng = np.random.default_rng(seed)
    p = params
    k = len(master.points)
    rot = rng.uniform(-p.rotation_range, p.rotation_range)
    t = rng.uniform(-p.translation_range, p.translation_range, 2)
    psi = rng.uniform(0, 2 * math.pi)
    keep = rng.random(k) >= p.dropout
    jxy = rng.normal(0.0, p.position_jitter, (k, 2))
    jth = rng.normal(0.0, p.angle_jitter, k)
    dn = rng.normal(0.0, p.descriptor_noise, (k, DESCRIPTOR_DIM))
    en = rng.normal(0.0, p.embedding_noise, 2 * EMBEDDING_HALF)

    T = rigid_transform(rot, t)
    region, project, thr = _crop_region(master, psi, p.crop_fraction)

    xy = T.apply(master.points[:, :2]) + jxy
    theta = master.points[:, 2] + rot + jth
    sel = keep & (project(master.points[:, :2]) <= thr)
    sel &= (xy[:, 0] >= 0) & (xy[:, 0] < FRAME) & (xy[:, 1] >= 0) & (xy[:, 1] < FRAME)
    desc = _unit_rows(master.descriptors[sel].astype(np.float64) + dn[sel]).astype(np.float32)
    minutiae = MinutiaeTemplate(
        np.column_stack([xy[sel].astype(np.float32), wrap_angles_f32(theta[sel])]),
        master.kinds[sel],
        desc.reshape(-1, DESCRIPTOR_DIM),
    )

    ident = master.identity_embedding
    za = _unit_rows(ident.za.astype(np.float64) + en[:EMBEDDING_HALF])
    zc = _unit_rows(ident.zc.astype(np.float64) + en[EMBEDDING_HALF:])

    fwd = T.matrix()[:2].astype(np.float64)
    obs_mask = cv2.warpAffine(region, fwd, (FRAME, FRAME), flags=cv2.INTER_NEAREST, borderValue=0)
    inv = T.inverse()
    block = 16
    centers = np.arange(block // 2, FRAME, block, dtype=np.float64)
    by, bx = np.meshgrid(centers, centers, indexing="ij")
    mxy = inv.apply(np.column_stack([bx.ravel(), by.ravel()]))
    angles = np.mod(master.orientation(mxy[:, 0], mxy[:, 1]) + rot, math.pi).reshape(bx.shape)
    angles[angles >= math.pi] = 0.0
    field_ = OrientationField(block, angles, np.ones_like(angles))
    grid = virtual_grid(obs_mask, field_)
    vn = rng.normal(0.0, p.descriptor_noise, (len(grid), DESCRIPTOR_DIM))
    vdesc = _unit_rows(master.virtual_descriptors(inv.apply(grid[:, :2])) + vn) if len(grid) else np.zeros((0, 96))
    virtual = VirtualMinutiaeTemplate(
        np.column_stack([grid[:, :2].astype(np.float32), wrap_angles_f32(grid[:, 2], math.pi)]),
        np.full(len(grid), int(Kind.VIRTUAL)),
        vdesc.astype(np.float32).reshape(-1, DESCRIPTOR_DIM),
    )
    truth = SyntheticTruth(
        seed=master.seed,
        identity=master.index,
        rotation=float(rot),
        tx=T.tx,
        ty=T.ty,
        degenerate=len(minutiae) == 0,
    )
    return FingerprintTemplate(
        id=template_id or f"{master.identity_id}-obs",
        modality=modality,
        minutiae=minutiae,
        virtual=virtual,
        embedding=GlobalEmbedding(za, zc),
        truth=truth,
    )


def truth_transform(truth: SyntheticTruth) -> SimilarityTransform:
    return SimilarityTransform(1.0, truth.rotation, truth.tx, truth.ty)


# ---------------------------------------------------------------------------
# corpora


@dataclass
class SyntheticCorpus:
    gallery: list
    probes: list
    mates: dict = field(default_factory=dict)  # probe id -> gallery id, or None when unmated


def gallery_id(index: int) -> str:
    return f"g{index:06d}"


def probe_id(index: int) -> str:
    return f"p{index:06d}"


def make_corpus(
    seed: int,
    identities: int,
    probes: int,
    *,
    unmated_fraction: float = 0.0,
    probe_params: ObservationParams = LATENT,
    gallery_params: ObservationParams = ROLLED,
) -> SyntheticCorpus:
    """Gallery of one rolled impression per identity plus latent probes.

    Mated probes cycle over identities ``0, 1, 2, ...``; unmated probes come
    from identities ``identities, identities+1, ...`` that are never enrolled.
    The last ``round(unmated_fraction * probes)`` probes are unmated.
    """
    gallery = []
    for i in range(identities):
        master = synth_master(seed, i)
        gallery.append(
            synth_observe(master, gallery_params, [seed, i, 0], template_id=gallery_id(i), modality=Modality.ROLLED)
        )
    n_unmated = int(round(unmated_fraction * probes))
    n_mated = probes - n_unmated
    if n_mated and identities == 0:
        raise ValueError("mated probes need at least one identity")
    out, mates = [], {}
    for q in range(probes):
        if q < n_mated:
            ident = q % identities
            mate = gallery_id(ident)
        else:
            ident = identities + (q - n_mated)
            mate = None
        master = synth_master(seed, ident)
        pid = probe_id(q)
        out.append(synth_observe(master, probe_params, [seed, ident, 1, q], template_id=pid, modality=Modality.LATENT))
        mates[pid] = mate
    return SyntheticCorpus(gallery, out, mates)
