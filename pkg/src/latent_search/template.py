"""Fingerprint template data model and the binary ``LFRT`` container.

A template bundles three feature sets extracted from one impression:

* a minutiae template (``m`` rows of ``x, y, theta`` + a 96-d descriptor),
* a virtual-minutiae template (``n`` rows laid out on a 16 px grid),
* a global embedding made of two unit-norm 384-d halves.

Feature arrays are stored as little-endian float32 so the on-disk layout and
the in-memory arrays are the same bytes; ``decode(encode(t)) == t`` holds bit
for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

DESCRIPTOR_DIM = 96
EMBEDDING_HALF = 384
EMBEDDING_DIM = 2 * EMBEDDING_HALF
VIRTUAL_SPACING = 16
NORM_TOL = 1e-6
TWO_PI = 2.0 * math.pi

MAGIC = b"LFRT"
VERSION = 1

_HEAD = struct.Struct("<4sHHH")  # magic, version, flags, id_len
_META = struct.Struct("<BHHHII")  # modality, width, height, ppi, m, n
HEADER_SIZE = _HEAD.size + _META.size

RECORD_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("theta", "<f4"),
        ("kind", "u1"),
        ("desc", "<f4", (DESCRIPTOR_DIM,)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 13 + 384
EMBEDDING_BYTES = EMBEDDING_DIM * 4


class Kind(IntEnum):
    RIDGE_ENDING = 0
    BIFURCATION = 1
    VIRTUAL = 2
    UNKNOWN = 3


class Modality(IntEnum):
    LATENT = 0
    ROLLED = 1
    PLAIN = 2
    SYNTHETIC = 3


class TemplateError(ValueError):
    """Base class for template format and validation failures."""


class BadMagicError(TemplateError):
    pass


class UnsupportedVersionError(TemplateError):
    pass


class TruncatedTemplateError(TemplateError):
    pass


class TrailingDataError(TemplateError):
    pass


class TemplateValidationError(TemplateError):
    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        names = ", ".join(sorted({v.field for v in self.violations}))
        super().__init__(f"template invariant violated: {names}: {self.violations[0].message}")


@dataclass(frozen=True)
class Violation:
    field: str
    message: str


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    theta: float  # radians
    kind: Kind = Kind.UNKNOWN


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class MinutiaeTemplate:
    """Ordered (minutia, descriptor) rows.

    ``points`` is ``(m, 3)`` float32 holding ``x, y, theta``; ``kinds`` is
    ``(m,)`` uint8; ``descriptors`` is ``(m, 96)`` float32.
    """

    points: np.ndarray
    kinds: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        kinds = np.ascontiguousarray(self.kinds, dtype=np.uint8).reshape(-1)
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if desc.size == 0:
            desc = desc.reshape(0, DESCRIPTOR_DIM)
        if desc.ndim != 2 or desc.shape[1] != DESCRIPTOR_DIM:
            raise TemplateValidationError(
                [Violation("descriptors", f"descriptor rows must have {DESCRIPTOR_DIM} values, got shape {desc.shape}")]
            )
        if not (len(pts) == len(kinds) == len(desc)):
            raise TemplateValidationError(
                [Violation("entries", f"row counts differ: points={len(pts)} kinds={len(kinds)} descriptors={len(desc)}")]
            )
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "kinds", _readonly(kinds))
        object.__setattr__(self, "descriptors", _readonly(desc))

    @classmethod
    def empty(cls) -> "MinutiaeTemplate":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, DESCRIPTOR_DIM)))

    @classmethod
    def from_entries(cls, entries: Sequence[Tuple[Minutia, Sequence[float]]]) -> "MinutiaeTemplate":
        if not entries:
            return cls.empty()
        pts = [(m.x, m.y, m.theta) for m, _ in entries]
        kinds = [int(m.kind) for m, _ in entries]
        desc = [np.asarray(d, dtype=np.float32) for _, d in entries]
        return cls(np.array(pts), np.array(kinds), np.stack(desc))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return (
            _same_bits(self.points, other.points)
            and _same_bits(self.kinds, other.kinds)
            and _same_bits(self.descriptors, other.descriptors)
        )

    __hash__ = None  # type: ignore[assignment]

    def minutiae(self) -> List[Minutia]:
        return [Minutia(float(x), float(y), float(t), Kind(int(k))) for (x, y, t), k in zip(self.points, self.kinds)]

    def entries(self) -> Iterator[Tuple[Minutia, np.ndarray]]:
        return zip(self.minutiae(), self.descriptors)

    def flattened(self) -> np.ndarray:
        """The ``m x 99`` matrix view (x, y, theta, descriptor)."""
        return np.hstack([self.points, self.descriptors])

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["x"] = self.points[:, 0]
        rec["y"] = self.points[:, 1]
        rec["theta"] = self.points[:, 2]
        rec["kind"] = self.kinds
        rec["desc"] = self.descriptors
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray) -> "MinutiaeTemplate":
        pts = np.stack([rec["x"], rec["y"], rec["theta"]], axis=1) if len(rec) else np.zeros((0, 3))
        return cls(pts, rec["kind"], rec["desc"].reshape(len(rec), DESCRIPTOR_DIM))


class VirtualMinutiaeTemplate(MinutiaeTemplate):
    """Minutiae template whose rows all have kind ``VIRTUAL`` and sit on the 16 px grid."""

    spacing = VIRTUAL_SPACING


@dataclass(frozen=True, eq=False)
class GlobalEmbedding:
    za: np.ndarray
    zc: np.ndarray

    def __post_init__(self) -> None:
        za = np.ascontiguousarray(self.za, dtype=np.float32).reshape(-1)
        zc = np.ascontiguousarray(self.zc, dtype=np.float32).reshape(-1)
        if za.shape != (EMBEDDING_HALF,) or zc.shape != (EMBEDDING_HALF,):
            raise TemplateValidationError(
                [Violation("embedding", f"each half must have {EMBEDDING_HALF} values, got {za.size} and {zc.size}")]
            )
        object.__setattr__(self, "za", _readonly(za))
        object.__setattr__(self, "zc", _readonly(zc))

    @classmethod
    def from_vector(cls, z: Sequence[float]) -> "GlobalEmbedding":
        z = np.asarray(z, dtype=np.float32).reshape(-1)
        if z.size != EMBEDDING_DIM:
            raise TemplateValidationError([Violation("embedding", f"expected {EMBEDDING_DIM} values, got {z.size}")])
        return cls(z[:EMBEDDING_HALF], z[EMBEDDING_HALF:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.za, self.zc])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GlobalEmbedding):
            return NotImplemented
        return _same_bits(self.za, other.za) and _same_bits(self.zc, other.zc)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth attached to synthetic observations.

    Only the synthetic provider reads this; it is never serialized into the
    binary container and never consulted by search or evaluation code.
    """

    seed: int
    identity: int
    rotation: float
    tx: float
    ty: float
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class FingerprintTemplate:
    id: str
    modality: Modality
    minutiae: MinutiaeTemplate
    virtual: VirtualMinutiaeTemplate
    embedding: GlobalEmbedding
    width: int = 512
    height: int = 512
    ppi: int = 500
    truth: Optional[SyntheticTruth] = field(default=None, repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FingerprintTemplate):
            return NotImplemented
        return (
            self.id == other.id
            and int(self.modality) == int(other.modality)
            and (self.width, self.height, self.ppi) == (other.width, other.height, other.ppi)
            and self.minutiae == other.minutiae
            and self.virtual == other.virtual
            and self.embedding == other.embedding
        )

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# validation


def _check_rows(name: str, t: MinutiaeTemplate, virtual: bool) -> List[Violation]:
    out: List[Violation] = []
    pts = t.points.astype(np.float64)
    if len(pts) == 0:
        return out
    xy = pts[:, :2]
    if not np.all(np.isfinite(xy)):
        out.append(Violation(f"{name}.xy", "coordinates must be finite"))
    elif np.any(xy < 0):
        out.append(Violation(f"{name}.xy", "coordinates must be non-negative"))
    theta = pts[:, 2]
    bad = ~np.isfinite(theta) | (theta < 0) | (theta >= TWO_PI)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        out.append(Violation(f"{name}.theta", f"angle out of range [0, 2pi) at row {i}: {theta[i]!r}"))
    kinds = t.kinds
    if np.any(kinds > max(Kind)):
        out.append(Violation(f"{name}.kind", "unknown minutia kind code"))
    if virtual and np.any(kinds != Kind.VIRTUAL):
        out.append(Violation(f"{name}.kind", "virtual template rows must have kind 'virtual'"))
    if virtual and np.all(np.isfinite(xy)):
        half = VIRTUAL_SPACING / 2
        off = np.mod(xy - half, VIRTUAL_SPACING)
        if np.any(off != 0):
            out.append(Violation(f"{name}.grid", f"virtual minutiae must lie on the {VIRTUAL_SPACING} px grid"))
    norms = np.linalg.norm(t.descriptors.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOL
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        out.append(Violation(f"{name}.descriptor_norm", f"descriptor {i} has norm {norms[i]:.9g}, expected 1"))
    keys = t.points.view(np.uint32) if t.points.flags.c_contiguous else t.points.copy().view(np.uint32)
    if len(np.unique(keys, axis=0)) != len(keys):
        out.append(Violation(f"{name}.duplicate", "two rows share identical (x, y, theta)"))
    return out


def validate_template(t: FingerprintTemplate) -> List[Violation]:
    """Return every violated invariant; an empty list means the template is valid."""
    out: List[Violation] = []
    if not isinstance(t.id, str) or not t.id:
        out.append(Violation("id", "id must be a non-empty string"))
    elif len(t.id.encode("utf-8")) > 0xFFFF:
        out.append(Violation("id", "id longer than 65535 bytes"))
    try:
        Modality(int(t.modality))
    except ValueError:
        out.append(Violation("modality", f"unknown modality {t.modality!r}"))
    for name in ("width", "height", "ppi"):
        v = getattr(t, name)
        if not (0 < int(v) <= 0xFFFF):
            out.append(Violation(name, f"{name} must be in 1..65535, got {v}"))
    out += _check_rows("minutiae", t.minutiae, virtual=False)
    out += _check_rows("virtual", t.virtual, virtual=True)
    for half in ("za", "zc"):
        z = getattr(t.embedding, half).astype(np.float64)
        if not np.all(np.isfinite(z)):
            out.append(Violation(f"embedding.{half}", "embedding must be finite"))
            continue
        n = float(np.linalg.norm(z))
        if abs(n - 1.0) > NORM_TOL:
            out.append(Violation(f"embedding.{half}", f"half has norm {n:.9g}, expected 1"))
    return out


# ---------------------------------------------------------------------------
# binary container


def encoded_size(m: int, n: int, id_len: int) -> int:
    return HEADER_SIZE + id_len + (m + n) * RECORD_SIZE + EMBEDDING_BYTES


def encode_template(t: FingerprintTemplate) -> bytes:
    violations = validate_template(t)
    if violations:
        raise TemplateValidationError(violations)
    ident = t.id.encode("utf-8")
    parts = [
        _HEAD.pack(MAGIC, VERSION, 0, len(ident)),
        ident,
        _META.pack(int(t.modality), t.width, t.height, t.ppi, len(t.minutiae), len(t.virtual)),
        t.minutiae.to_records().tobytes(),
        t.virtual.to_records().tobytes(),
        t.embedding.za.astype("<f4").tobytes(),
        t.embedding.zc.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_template(b: bytes, *, validate: bool = True) -> FingerprintTemplate:
    buf = memoryview(bytes(b))
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError("not an LFRT template (bad magic)")
    if len(buf) < _HEAD.size:
        raise TruncatedTemplateError("payload ends inside the header")
    _, version, _flags, id_len = _HEAD.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported template version {version}")
    pos = _HEAD.size
    if len(buf) < pos + id_len + _META.size:
        raise TruncatedTemplateError("payload ends inside the header")
    try:
        ident = bytes(buf[pos : pos + id_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TemplateError(f"id is not valid UTF-8: {exc}") from None
    pos += id_len
    modality, width, height, ppi, m, n = _META.unpack_from(buf, pos)
    pos += _META.size
    need = pos + (m + n) * RECORD_SIZE + EMBEDDING_BYTES
    if len(buf) < need:
        raise TruncatedTemplateError(
            f"header declares m={m}, n={n} ({need} bytes) but payload has {len(buf)} bytes"
        )
    if len(buf) > need:
        raise TrailingDataError(f"{len(buf) - need} unexpected bytes after the embedding block")
    rec_m = np.frombuffer(buf, dtype=RECORD_DTYPE, count=m, offset=pos)
    pos += m * RECORD_SIZE
    rec_n = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=pos)
    pos += n * RECORD_SIZE
    z = np.frombuffer(buf, dtype="<f4", count=EMBEDDING_DIM, offset=pos)
    try:
        mod = Modality(modality)
    except ValueError:
        raise TemplateValidationError([Violation("modality", f"unknown modality code {modality}")]) from None
    t = FingerprintTemplate(
        id=ident,
        modality=mod,
        minutiae=MinutiaeTemplate.from_records(rec_m),
        virtual=VirtualMinutiaeTemplate.from_records(rec_n),
        embedding=GlobalEmbedding(z[:EMBEDDING_HALF].copy(), z[EMBEDDING_HALF:].copy()),
        width=width,
        height=height,
        ppi=ppi,
    )
    if validate:
        violations = validate_template(t)
        if violations:
            raise TemplateValidationError(violations)
    return t


def save_template(t: FingerprintTemplate, path: Path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), encode_template(t))


def load_template(path: Path) -> FingerprintTemplate:
    return decode_template(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# gallery manifest: "id<TAB>relative_path" per line


def read_manifest(path: Path) -> List[Tuple[str, Path]]:
    path = Path(path)
    rows: List[Tuple[str, Path]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise TemplateError(f"{path}:{lineno}: expected 'id<TAB>relative_path'")
        rows.append((parts[0], Path(parts[1])))
    return rows


def write_manifest(path: Path, rows: Sequence[Tuple[str, Path]]) -> None:
    from .io import atomic_write_text

    atomic_write_text(Path(path), "".join(f"{i}\t{Path(p).as_posix()}\n" for i, p in rows))


# ---------------------------------------------------------------------------
# template directories: <dir>/manifest.tsv, <dir>/templates/<n>.lfrt and, for
# synthetic templates, a truth.json sidecar read only by the synthetic provider

MANIFEST_NAME = "manifest.tsv"
TRUTH_NAME = "truth.json"


def save_collection(directory: Path, templates: Sequence[FingerprintTemplate]) -> None:
    import json
    from dataclasses import asdict

    from .io import atomic_write_text

    d = Path(directory)
    (d / "templates").mkdir(parents=True, exist_ok=True)
    rows = []
    truth = {}
    for i, t in enumerate(templates):
        rel = Path("templates") / f"{i:07d}.lfrt"
        save_template(t, d / rel)
        rows.append((t.id, rel))
        if t.truth is not None:
            truth[t.id] = asdict(t.truth)
    write_manifest(d / MANIFEST_NAME, rows)
    if truth:
        atomic_write_text(d / TRUTH_NAME, json.dumps(truth, sort_keys=True))


def load_collection(directory: Path) -> List[FingerprintTemplate]:
    import dataclasses
    import json

    d = Path(directory)
    truth = {}
    if (d / TRUTH_NAME).exists():
        truth = json.loads((d / TRUTH_NAME).read_text(encoding="utf-8"))
    out = []
    for tid, rel in read_manifest(d / MANIFEST_NAME):
        t = load_template(d / rel)
        if t.id != tid:
            raise TemplateError(f"{rel}: manifest id {tid!r} but template id {t.id!r}")
        if tid in truth:
            t = dataclasses.replace(t, truth=SyntheticTruth(**truth[tid]))
        out.append(t)
    return out
