"""Feature-provider contract, the synthetic provider, and text ingestion of external features.

CNN extractors are not part of this package; they plug in by subclassing
:class:`FeatureProvider`.  Anything a provider cannot do raises
:class:`ProviderUnsupported`, which the search engine treats as "skip that
term".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .alignment import SimilarityTransform
from .io import atomic_write_text
from .synthetic import identity_embedding, truth_transform, wrap_angles_f32
from .template import (
    DESCRIPTOR_DIM,
    EMBEDDING_DIM,
    EMBEDDING_HALF,
    NORM_TOL,
    FingerprintTemplate,
    GlobalEmbedding,
    Kind,
    MinutiaeTemplate,
    Modality,
    TemplateValidationError,
    VirtualMinutiaeTemplate,
    validate_template,
)


class ProviderUnsupported(NotImplementedError):
    pass


class ParseError(ValueError):
    def __init__(self, path, line: int, column: int, message: str):
        self.path, self.line, self.column = str(path), line, column
        super().__init__(f"{path}:{line}:{column}: {message}")


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePayload:
    pixels: np.ndarray  # (height, width) uint8
    ppi: int = 500

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("image must be a non-empty 2-D grid")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


class FeatureProvider:
    """Produces templates from images and re-embeds aligned pairs."""

    def extract(self, image: ImagePayload, template_id: str) -> FingerprintTemplate:
        raise ProviderUnsupported(f"{type(self).__name__} cannot extract features from images")

    def embed_realigned(
        self, probe: FingerprintTemplate, gallery: FingerprintTemplate, transform: SimilarityTransform
    ) -> Tuple[GlobalEmbedding, GlobalEmbedding]:
        raise ProviderUnsupported(f"{type(self).__name__} cannot re-embed aligned pairs")


class SyntheticProvider(FeatureProvider):
    """Realignment stand-in for synthetic templates.

    The refined embedding moves each side towards its identity embedding:
    ``normalize(identity + beta * (z - identity))`` per half, with

    ``beta = 1 - (1 - floor) * clip(1 - residual / scale, 0, 1) * clip(initial / scale, 0, 1)``

    where ``residual`` is the RMS error of the supplied transform over the
    probe minutiae and ``initial`` the error of leaving the pair unaligned.
    Pairs that were already aligned, badly aligned pairs and imposter pairs
    get ``beta = 1`` and come back unchanged.
    """

    def __init__(self, floor: float = 0.5, scale: float = 20.0):
        if not 0.0 <= floor <= 1.0:
            raise ValueError("floor must lie in [0, 1]")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.floor = floor
        self.scale = scale

    def residuals(self, probe, gallery, transform) -> Tuple[float, float]:
        """(residual of ``transform``, residual of the identity map) in pixels."""
        tp, tg = probe.truth, gallery.truth
        if tp is None or tg is None:
            raise ProviderUnsupported("synthetic realignment needs synthetic templates")
        if (tp.seed, tp.identity) != (tg.seed, tg.identity):
            return math.inf, math.inf
        pts = probe.minutiae.points[:, :2].astype(np.float64)
        if len(pts) == 0:
            pts = np.array([[probe.width / 2.0, probe.height / 2.0]])
        true = truth_transform(tg).apply(truth_transform(tp).inverse().apply(pts))

        def rms(est):
            return float(np.sqrt(np.mean(np.sum((est - true) ** 2, axis=1))))

        return rms(transform.apply(pts)), rms(pts)

    def beta(self, residual: float, initial: float) -> float:
        if not math.isfinite(residual):
            return 1.0
        closed = min(max(1.0 - residual / self.scale, 0.0), 1.0)
        gap = min(max(initial / self.scale, 0.0), 1.0)
        return 1.0 - (1.0 - self.floor) * closed * gap

    def embed_realigned(self, probe, gallery, transform):
        if not all(math.isfinite(v) for v in (transform.scale, transform.rotation, transform.tx, transform.ty)):
            raise ValueError("transform must be finite")
        residual, initial = self.residuals(probe, gallery, transform)
        b = self.beta(residual, initial)
        if b == 1.0:
            return probe.embedding, gallery.embedding
        return self._refine(probe, b), self._refine(gallery, b)

    @staticmethod
    def _refine(t: FingerprintTemplate, b: float) -> GlobalEmbedding:
        ident = identity_embedding(t.truth.seed, t.truth.identity)
        halves = []
        for z, i in ((t.embedding.za, ident.za), (t.embedding.zc, ident.zc)):
            i = i.astype(np.float64)
            v = i + b * (z.astype(np.float64) - i)
            halves.append(v / np.linalg.norm(v))
        return GlobalEmbedding(*halves)


# ---------------------------------------------------------------------------
# external text formats

MINUTIAE_HEADER = "x,y,theta_deg,kind"
_KIND_NAMES = {
    "ending": Kind.RIDGE_ENDING,
    "ridge_ending": Kind.RIDGE_ENDING,
    "bifurcation": Kind.BIFURCATION,
    "virtual": Kind.VIRTUAL,
    "unknown": Kind.UNKNOWN,
}
_KIND_LABEL = {Kind.RIDGE_ENDING: "ending", Kind.BIFURCATION: "bifurcation", Kind.VIRTUAL: "virtual", Kind.UNKNOWN: "unknown"}


def _float(path, line, col, text) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(path, line, col, f"not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, line, col, f"non-finite value {text!r}")
    return v


def read_minutiae_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Rows of ``x, y, theta`` (radians) and kind codes."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip().replace(" ", "") != MINUTIAE_HEADER:
        raise ParseError(path, 1, 1, f"expected header {MINUTIAE_HEADER!r}")
    pts: List[Tuple[float, float, float]] = []
    kinds: List[int] = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4:
            raise ParseError(path, lineno, min(len(fields), 4) + 1, f"expected 4 fields, got {len(fields)}")
        x = _float(path, lineno, 1, fields[0])
        y = _float(path, lineno, 2, fields[1])
        deg = _float(path, lineno, 3, fields[2])
        kind = _KIND_NAMES.get(fields[3].lower())
        if kind is None:
            raise ParseError(path, lineno, 4, f"unknown minutia kind {fields[3]!r}")
        pts.append((x, y, math.radians(deg)))
        kinds.append(int(kind))
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return arr, np.array(kinds, dtype=np.uint8)


def read_matrix_csv(path, width: int) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise DimensionMismatchError(f"{path}:{lineno}: expected {width} values per row, got {len(fields)}")
        rows.append([_float(path, lineno, c, f) for c, f in enumerate(fields, 1)])
    return np.array(rows, dtype=np.float64).reshape(-1, width)


def read_vector_csv(path, size: int) -> np.ndarray:
    values = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        for col, f in enumerate(line.replace(",", " ").split(), 1):
            values.append(_float(path, lineno, col, f))
    if len(values) != size:
        raise DimensionMismatchError(f"{path}: expected {size} values, got {len(values)}")
    return np.array(values, dtype=np.float64)


def _unit_f32(v: np.ndarray, what: str) -> np.ndarray:
    """Cast to float32, renormalising only rows whose norm is off by more than the tolerance."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    out = v.astype(np.float32)
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    if np.any(norms == 0):
        raise DimensionMismatchError(f"{what}: zero vector cannot be normalised")
    off = np.abs(norms - 1.0) > NORM_TOL
    if np.any(off):
        out[off] = (v[off] / np.linalg.norm(v[off], axis=1, keepdims=True)).astype(np.float32)
    return out


def _rows(points: np.ndarray, kinds: np.ndarray, desc: np.ndarray, cls, what: str):
    if len(desc) != len(points):
        raise DimensionMismatchError(f"{what}: {len(points)} minutiae but {len(desc)} descriptor rows")
    if len(points) == 0:
        return cls.empty()
    theta = wrap_angles_f32(points[:, 2])
    return cls(
        np.column_stack([points[:, :2].astype(np.float32), theta]),
        kinds,
        _unit_f32(desc, f"{what} descriptor"),
    )


def ingest_external(
    minutiae_path,
    descriptor_path,
    embedding_path,
    *,
    template_id: str,
    modality: Modality = Modality.LATENT,
    virtual_minutiae_path=None,
    virtual_descriptor_path=None,
    width: int = 512,
    height: int = 512,
    ppi: int = 500,
) -> FingerprintTemplate:
    """Build a validated template from externally extracted features.

    Minutiae angles in the CSV are degrees; they are stored as radians.
    """
    pts, kinds = read_minutiae_csv(minutiae_path)
    desc = read_matrix_csv(descriptor_path, DESCRIPTOR_DIM)
    minutiae = _rows(pts, kinds, desc, MinutiaeTemplate, "minutiae")
    if virtual_minutiae_path is not None:
        if virtual_descriptor_path is None:
            raise ValueError("virtual minutiae need a descriptor file")
        vpts, vkinds = read_minutiae_csv(virtual_minutiae_path)
        vdesc = read_matrix_csv(virtual_descriptor_path, DESCRIPTOR_DIM)
        virtual = _rows(vpts, vkinds, vdesc, VirtualMinutiaeTemplate, "virtual")
    else:
        virtual = VirtualMinutiaeTemplate.empty()
    z = read_vector_csv(embedding_path, EMBEDDING_DIM)
    za = _unit_f32(z[:EMBEDDING_HALF], "embedding z_a")[0]
    zc = _unit_f32(z[EMBEDDING_HALF:], "embedding z_c")[0]
    t = FingerprintTemplate(
        id=template_id,
        modality=Modality(modality),
        minutiae=minutiae,
        virtual=virtual,
        embedding=GlobalEmbedding(za, zc),
        width=width,
        height=height,
        ppi=ppi,
    )
    violations = validate_template(t)
    if violations:
        raise TemplateValidationError(violations)
    return t


def _fmt(v) -> str:
    return repr(float(v))


def _write_minutiae(path, t: MinutiaeTemplate) -> None:
    lines = [MINUTIAE_HEADER]
    for (x, y, th), k in zip(t.points, t.kinds):
        lines.append(f"{_fmt(x)},{_fmt(y)},{_fmt(np.rad2deg(np.float64(th)))},{_KIND_LABEL[Kind(int(k))]}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _write_matrix(path, rows: np.ndarray) -> None:
    atomic_write_text(Path(path), "".join(",".join(_fmt(v) for v in row) + "\n" for row in rows))


def export_external(t: FingerprintTemplate, directory) -> dict:
    """Write ``t`` in the external text formats; returns the paths keyed like :func:`ingest_external`."""
    d = Path(directory)
    paths = {
        "minutiae_path": d / "minutiae.csv",
        "descriptor_path": d / "descriptors.csv",
        "embedding_path": d / "embedding.csv",
        "virtual_minutiae_path": d / "virtual_minutiae.csv",
        "virtual_descriptor_path": d / "virtual_descriptors.csv",
    }
    _write_minutiae(paths["minutiae_path"], t.minutiae)
    _write_matrix(paths["descriptor_path"], t.minutiae.descriptors)
    _write_minutiae(paths["virtual_minutiae_path"], t.virtual)
    _write_matrix(paths["virtual_descriptor_path"], t.virtual.descriptors)
    atomic_write_text(paths["embedding_path"], ",".join(_fmt(v) for v in t.embedding.vector) + "\n")
    return paths
