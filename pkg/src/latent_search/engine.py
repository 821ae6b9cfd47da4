"""Three-stage fused gallery search and its latency model.

Stage 1 scores every enrolled template with ``w1 * m + w2 * c`` (minutiae
similarity and global-embedding cosine) and keeps the best ``K``.  Stage 2
adds ``w3 * v`` (virtual-minutiae similarity) for those ``K`` and keeps ``L``.
Stage 3 aligns each of the ``L`` pairs from its minutiae correspondences,
asks the feature provider for re-embedded vectors and adds ``w4 * c'``.

Scores only ever grow by a non-negative term per stage, every component is in
``[0, 1]`` and the weights sum to one, so fused scores are in ``[0, 1]`` too.
Ties are broken by enrollment order everywhere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from numba import njit, prange

from .alignment import AlignmentError, estimate_transform
from .matcher import LssrParams, PackedTemplates, batch_similarity
from .provider import FeatureProvider, ProviderUnsupported
from .template import EMBEDDING_DIM, FingerprintTemplate, GlobalEmbedding, load_collection, save_collection

WEIGHT_TOL = 1e-9


class DuplicateIdError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    w1: float = 0.4
    w2: float = 0.4
    w3: float = 0.18
    w4: float = 0.02
    k: int = 1000
    l: int = 500

    def __post_init__(self) -> None:
        ws = (self.w1, self.w2, self.w3, self.w4)
        if any(not math.isfinite(w) or w < 0 for w in ws):
            raise ValueError("fusion weights must be finite and non-negative")
        if abs(sum(ws) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"fusion weights must sum to 1, got {sum(ws)!r}")
        if self.k < 1 or self.l < 1:
            raise ValueError("K and L must be at least 1")
        if self.l > self.k:
            raise ValueError(f"L ({self.l}) must not exceed K ({self.k})")

    def clamp(self, n: int) -> tuple:
        """Effective ``(K, L)`` for a gallery of ``n`` templates."""
        return min(self.k, n), min(self.l, n)


def stage_score(stage: int, components: Dict[str, float], cfg: StageConfig = StageConfig()):
    """Fused score of one stage from its components (``m``, ``c``, ``v``, ``c_prime``).

    Works elementwise on arrays; the expression order is fixed so scalar and
    vector callers get the same bits.
    """
    need = {1: ("m", "c"), 2: ("m", "c", "v"), 3: ("m", "c", "v", "c_prime")}.get(stage)
    if need is None:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage!r}")
    missing = [k for k in need if components.get(k) is None]
    if missing:
        raise KeyError(f"stage {stage} needs components {', '.join(missing)}")
    s = cfg.w1 * np.asarray(components["m"], dtype=np.float64) + cfg.w2 * np.asarray(components["c"], dtype=np.float64)
    if stage >= 2:
        s = s + cfg.w3 * np.asarray(components["v"], dtype=np.float64)
    if stage >= 3:
        s = s + cfg.w4 * np.asarray(components["c_prime"], dtype=np.float64)
    return s if s.ndim else float(s)


# ---------------------------------------------------------------------------
# global similarity


@njit(cache=True)
def _cosine(a, b):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for k in range(a.shape[0]):
        x = np.float64(a[k])
        y = np.float64(b[k])
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        return np.nan
    c = dot / (math.sqrt(na) * math.sqrt(nb))
    return min(max(c, 0.0), 1.0)


@njit(parallel=True, cache=True)
def _cosine_batch(zp, Z, cand):
    out = np.empty(cand.shape[0])
    for i in prange(cand.shape[0]):
        out[i] = _cosine(zp, Z[cand[i]])
    return out


def global_similarity(zp: GlobalEmbedding, zg: GlobalEmbedding) -> float:
    """``max(0, cos)`` between the 768-d concatenations."""
    s = _cosine(zp.vector, zg.vector)
    if math.isnan(s):
        raise ValueError("zero-norm embedding")
    return float(s)


# ---------------------------------------------------------------------------
# gallery


class Gallery:
    """Enrolled templates in enrollment order plus packed arrays for scanning."""

    def __init__(self, templates: Iterable[FingerprintTemplate] = ()):
        self._templates: List[FingerprintTemplate] = []
        self._index: Dict[str, int] = {}
        self._packed = None
        for t in templates:
            self.enroll(t)

    def enroll(self, t: FingerprintTemplate) -> int:
        if t.id in self._index:
            raise DuplicateIdError(f"template id {t.id!r} already enrolled")
        if not (np.any(t.embedding.za) and np.any(t.embedding.zc)):
            raise ValueError(f"template {t.id!r} has a zero embedding half")
        self._index[t.id] = len(self._templates)
        self._templates.append(t)
        self._packed = None
        return self._index[t.id]

    def __len__(self) -> int:
        return len(self._templates)

    def __getitem__(self, i: int) -> FingerprintTemplate:
        return self._templates[i]

    def __iter__(self):
        return iter(self._templates)

    def __contains__(self, tid: str) -> bool:
        return tid in self._index

    def order_of(self, tid: str) -> int:
        return self._index[tid]

    @property
    def ids(self) -> List[str]:
        return [t.id for t in self._templates]

    def packed(self):
        """``(minutiae, virtual, embeddings)``; rebuilt lazily after enrollment."""
        if self._packed is None:
            emb = np.empty((len(self), EMBEDDING_DIM), dtype=np.float32)
            for i, t in enumerate(self._templates):
                emb[i] = t.embedding.vector
            self._packed = (
                PackedTemplates.build([t.minutiae for t in self._templates]),
                PackedTemplates.build([t.virtual for t in self._templates]),
                emb,
            )
        return self._packed

    def save(self, directory: Path) -> None:
        save_collection(directory, self._templates)

    @classmethod
    def load(cls, directory: Path) -> "Gallery":
        return cls(load_collection(directory))


# ---------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class Candidate:
    gallery_id: str
    order: int
    score: float
    stage_scores: tuple  # (S1, S2, S3)
    m: float
    c: float
    v: float
    c_prime: float


@dataclass
class SearchAudit:
    """Per-stage candidate sets (enrollment indices, ranked) and component scores.

    ``m``/``c``/``s1`` cover the whole gallery, ``v``/``s2`` the ``K`` stage-1
    survivors in ``stage1`` order and ``c_prime``/``s3`` the ``L`` stage-2
    survivors in ``stage2`` order.
    """

    stage1: np.ndarray
    stage2: np.ndarray
    stage3: np.ndarray
    m: np.ndarray
    c: np.ndarray
    s1: np.ndarray
    v: np.ndarray
    s2: np.ndarray
    c_prime: np.ndarray
    s3: np.ndarray
    comparisons: Dict[str, int]
    realign_unsupported: bool = False
    realign_fallbacks: int = 0
    seconds: Dict[str, float] = field(default_factory=dict)


@dataclass
class SearchResult:
    probe_id: str
    candidates: List[Candidate]
    audit: SearchAudit

    def ranked_ids(self) -> List[str]:
        return [c.gallery_id for c in self.candidates]


def _rank(scores: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Positions sorting by descending score, then ascending enrollment order."""
    return np.lexsort((order, -scores))


class Engine:
    """Gallery search with the three-stage pruned fusion.

    The engine holds no per-search state, so one instance can serve
    concurrent searches of distinct probes.
    """

    def __init__(
        self,
        gallery: Gallery,
        config: StageConfig = StageConfig(),
        lssr: LssrParams = LssrParams(),
        provider: Optional[FeatureProvider] = None,
        threads: Optional[int] = None,
    ):
        if threads is not None:
            import numba

            if threads < 1:
                raise ValueError("threads must be >= 1")
            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        self.gallery = gallery
        self.config = config
        self.lssr = lssr
        self.provider = provider if provider is not None else FeatureProvider()
        self.comparisons = {"stage1": 0, "stage2": 0, "stage3": 0}

    def search(self, probe: FingerprintTemplate) -> SearchResult:
        g = self.gallery
        n = len(g)
        if n == 0:
            raise ValueError("cannot search an empty gallery")
        cfg = self.config
        k, l = cfg.clamp(n)
        pm, pv, emb = g.packed()
        clock = time.perf_counter
        seconds = {}

        t0 = clock()
        everyone = np.arange(n, dtype=np.int64)
        m, (ci, cj, _, cn) = batch_similarity(probe.minutiae, pm, everyone, self.lssr, keep_pairs=True)
        c = _cosine_batch(probe.embedding.vector, emb, everyone)
        if np.isnan(c).any():
            raise ValueError("zero-norm embedding")
        s1 = stage_score(1, {"m": m, "c": c}, cfg)
        stage1 = _rank(s1, everyone)[:k]
        t1 = clock()
        seconds["stage1"] = t1 - t0

        v, _ = batch_similarity(probe.virtual, pv, stage1, self.lssr)
        s2 = stage_score(2, {"m": m[stage1], "c": c[stage1], "v": v}, cfg)
        keep2 = _rank(s2, stage1)[:l]
        stage2 = stage1[keep2]
        t2 = clock()
        seconds["stage2"] = t2 - t1

        c_prime, unsupported, fallbacks = self._realign(probe, stage2, c, ci, cj, cn)
        comps = {"m": m[stage2], "c": c[stage2], "v": v[keep2], "c_prime": c_prime}
        if unsupported:
            s3 = s2[keep2].copy()
        else:
            s3 = stage_score(3, comps, cfg)
        keep3 = _rank(s3, stage2)
        stage3 = stage2[keep3]
        seconds["stage3"] = clock() - t2

        counts = {"stage1": n, "stage2": k, "stage3": l}
        for key, val in counts.items():
            self.comparisons[key] += val
        audit = SearchAudit(
            stage1=stage1, stage2=stage2, stage3=stage3,
            m=m, c=c, s1=s1, v=v, s2=s2, c_prime=c_prime, s3=s3,
            comparisons=counts, realign_unsupported=unsupported, realign_fallbacks=fallbacks, seconds=seconds,
        )
        s2_of = s2[keep2]
        cands = [
            Candidate(
                gallery_id=g[int(idx)].id,
                order=int(idx),
                score=float(s3[p]),
                stage_scores=(float(s1[idx]), float(s2_of[p]), float(s3[p])),
                m=float(m[idx]),
                c=float(c[idx]),
                v=float(v[keep2[p]]),
                c_prime=float(c_prime[p]),
            )
            for p, idx in ((int(p), int(stage2[p])) for p in keep3)
        ]
        return SearchResult(probe.id, cands, audit)

    def _realign(self, probe, survivors, c, ci, cj, cn):
        """``c'`` per survivor; falls back to ``c`` when alignment is impossible."""
        out = np.empty(len(survivors))
        fallbacks = 0
        unsupported = False
        pxy = probe.minutiae.points[:, :2].astype(np.float64)
        for p, idx in enumerate(survivors):
            idx = int(idx)
            gal = self.gallery[idx]
            cnt = int(cn[idx])
            if unsupported or cnt < 2:
                out[p] = c[idx]
                fallbacks += cnt < 2
                continue
            gxy = gal.minutiae.points[:, :2].astype(np.float64)
            try:
                tr = estimate_transform((pxy[ci[idx, :cnt]], gxy[cj[idx, :cnt]]))
            except AlignmentError:
                out[p] = c[idx]
                fallbacks += 1
                continue
            try:
                zp, zg = self.provider.embed_realigned(probe, gal, tr)
            except ProviderUnsupported:
                unsupported = True
                out[p] = c[idx]
                continue
            out[p] = global_similarity(zp, zg)
        return out, unsupported, fallbacks

    def search_many(self, probes: Sequence[FingerprintTemplate]) -> List[SearchResult]:
        return [self.search(p) for p in probes]


def brute_force_ranking(
    probe: FingerprintTemplate,
    gallery: Sequence[FingerprintTemplate],
    cfg: StageConfig = StageConfig(),
    lssr: LssrParams = LssrParams(),
    provider: Optional[FeatureProvider] = None,
):
    """Full-fusion reference: ``S3`` for every gallery entry, one pair at a time.

    Returns ``[(gallery_id, score)]`` sorted like the engine sorts.
    """
    from .matcher import minutiae_similarity

    provider = provider if provider is not None else FeatureProvider()
    comps = []
    supported = True
    for g in gallery:
        m, corr = minutiae_similarity(probe.minutiae, g.minutiae, lssr)
        v, _ = minutiae_similarity(probe.virtual, g.virtual, lssr)
        c = global_similarity(probe.embedding, g.embedding)
        c_prime = c
        if supported and len(corr) >= 2:
            src = probe.minutiae.points[corr.probe_index, :2].astype(np.float64)
            dst = g.minutiae.points[corr.gallery_index, :2].astype(np.float64)
            try:
                tr = estimate_transform((src, dst))
                zp, zg = provider.embed_realigned(probe, g, tr)
                c_prime = global_similarity(zp, zg)
            except AlignmentError:
                pass
            except ProviderUnsupported:
                supported = False
        comps.append({"m": m, "c": c, "v": v, "c_prime": c_prime})
    # one unsupported pair drops the realignment term for the whole search, as the engine does
    stage = 3 if supported else 2
    rows = sorted((-stage_score(stage, x, cfg), order) for order, x in enumerate(comps))
    return [(gallery[order].id, -neg) for neg, order in rows]


# ---------------------------------------------------------------------------
# latency


@dataclass(frozen=True)
class LatencyModel:
    t1: float
    t2: float
    t3: float
    n: int
    k: int
    l: int

    def __post_init__(self) -> None:
        if min(self.t1, self.t2, self.t3) <= 0 or min(self.n, self.k, self.l) <= 0:
            raise ValueError("latency model fields must be positive")
        if not self.l <= self.k <= self.n:
            raise ValueError("latency model needs L <= K <= N")


def predict_latency(m: LatencyModel) -> float:
    """Average milliseconds per gallery comparison: ``t1 + K/N t2 + L/N t3``."""
    return m.t1 + m.k / m.n * m.t2 + m.l / m.n * m.t3


@dataclass
class LatencyReport:
    n: int
    k: int
    l: int
    probes: int
    threads: int
    t1_ms: float
    t2_ms: float
    t3_ms: float
    measured_ms: float
    predicted_ms: float
    comparisons: Dict[str, int]
    probe_minutiae: float
    probe_virtual: float
    gallery_minutiae: float
    gallery_virtual: float

    @property
    def ratio(self) -> float:
        return self.measured_ms / self.predicted_ms

    def as_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["ratio"] = self.ratio
        return d


def measure_latency(engine: Engine, probes: Sequence[FingerprintTemplate], warmup: int = 1) -> LatencyReport:
    """Wall-clock per-comparison stage averages over ``probes``.

    ``t1`` is stage-1 time divided by ``N``, ``t2`` stage-2 time by ``K`` and
    ``t3`` stage-3 time by ``L``; ``measured`` is total search time by ``N``.
    """
    import numba

    if not probes:
        raise ValueError("need at least one probe")
    for p in probes[:warmup]:
        engine.search(p)
    n = len(engine.gallery)
    k, l = engine.config.clamp(n)
    total = {"stage1": 0.0, "stage2": 0.0, "stage3": 0.0}
    wall = 0.0
    counts = {"stage1": 0, "stage2": 0, "stage3": 0}
    for p in probes:
        t0 = time.perf_counter()
        r = engine.search(p)
        wall += time.perf_counter() - t0
        for key in total:
            total[key] += r.audit.seconds[key]
            counts[key] += r.audit.comparisons[key]
    q = len(probes)
    t1 = 1e3 * total["stage1"] / (n * q)
    t2 = 1e3 * total["stage2"] / (k * q)
    t3 = 1e3 * total["stage3"] / (l * q)
    g = engine.gallery
    return LatencyReport(
        n=n, k=k, l=l, probes=q, threads=numba.get_num_threads(),
        t1_ms=t1, t2_ms=t2, t3_ms=t3,
        measured_ms=1e3 * wall / (n * q),
        predicted_ms=predict_latency(LatencyModel(t1, t2, t3, n, k, l)),
        comparisons=counts,
        probe_minutiae=float(np.mean([len(p.minutiae) for p in probes])),
        probe_virtual=float(np.mean([len(p.virtual) for p in probes])),
        gallery_minutiae=float(np.mean([len(t.minutiae) for t in g])),
        gallery_virtual=float(np.mean([len(t.virtual) for t in g])),
    )
