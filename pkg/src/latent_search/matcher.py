"""Descriptor similarity, LSS-R correspondence selection and the normalised minutiae score.

The same compiled kernels back the single-pair functions and the batched
gallery scan used by :mod:`latent_search.engine`, so both paths produce
bit-identical scores.

Relaxation, per round ``t`` and candidate pair ``a = (i, j)``::

    s[t+1](a) = (1 - w) * s[t](a) + w * mean_b rho(a, b) * s[t](b)

where ``b`` ranges over the ``neighbors`` strongest pairs (by ``s[t]``) other
than ``a`` and ``rho`` is a product of Gaussians on the distance difference,
the relative-angle difference and the difference of the inter-minutia
direction seen from each minutia.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numba import njit, prange

from .template import DESCRIPTOR_DIM, MinutiaeTemplate

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class LssrParams:
    iterations: int = 5
    weight: float = 0.5
    neighbors: int = 5
    distance_sigma: float = 30.0
    angle_sigma: float = math.pi / 6
    max_pairs: Optional[int] = None  # None -> min(m_p, m_g)
    pool_factor: int = 3  # candidate pool = pool_factor * min(m_p, m_g) best pairs; 0 keeps all

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("relaxation weight must lie in [0, 1]")
        if self.neighbors < 0:
            raise ValueError("neighbors must be >= 0")
        if not (self.distance_sigma > 0 and self.angle_sigma > 0):
            raise ValueError("sigmas must be positive")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")
        if self.pool_factor < 0:
            raise ValueError("pool_factor must be >= 0")

    def kernel_args(self) -> tuple:
        return (
            int(self.iterations),
            float(self.weight),
            int(self.neighbors),
            1.0 / (2.0 * self.distance_sigma**2),
            1.0 / (2.0 * self.angle_sigma**2),
            int(self.max_pairs or 0),
            int(self.pool_factor),
        )


@dataclass(frozen=True)
class Correspondences:
    probe_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    gallery_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    similarity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.probe_index)

    def pairs(self):
        return list(zip(self.probe_index.tolist(), self.gallery_index.tolist(), self.similarity.tolist()))


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _sim_matrix(dp, dgT):
    m = dp.shape[0]
    d = dp.shape[1]
    n = dgT.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for k in range(d):
            a = np.float64(dp[i, k])
            for j in range(n):
                out[i, j] += a * np.float64(dgT[k, j])
    return out


@njit(cache=True, inline="always")
def _wrap(d):
    return d - TWO_PI * np.rint(d / TWO_PI)


@njit(cache=True)
def _pair_geometry(x, y, t):
    """``dist[k, i]`` and ``dir[k, i]``: distance from ``i`` to ``k`` and its direction relative to ``t[i]``."""
    m = x.shape[0]
    dist = np.empty((m, m))
    dirs = np.empty((m, m))
    for k in range(m):
        for i in range(m):
            dx = x[k] - x[i]
            dy = y[k] - y[i]
            dist[k, i] = math.sqrt(dx * dx + dy * dy)
            dirs[k, i] = math.atan2(dy, dx) - t[i]
    return dist, dirs


@njit(cache=True)
def _column(col, b, pi, gj, pt, gx, gy, gt, gused, c_d, c_t, pdist, pdir, dist_g, dir_g):
    """Fill ``col[a] = rho(a, b)`` for every pool pair ``a``."""
    k = pi[b]
    l = gj[b]
    for j in gused:
        dx = gx[l] - gx[j]
        dy = gy[l] - gy[j]
        dist_g[j] = math.sqrt(dx * dx + dy * dy)
        dir_g[j] = math.atan2(dy, dx) - gt[j]
    for a in range(pi.shape[0]):
        i = pi[a]
        j = gj[a]
        dd = abs(pdist[k, i] - dist_g[j])
        da = _wrap((pt[i] - pt[k]) - (gt[j] - gt[l]))
        db = _wrap(pdir[k, i] - dir_g[j])
        col[a] = math.exp(-(dd * dd * c_d + da * da * c_t + db * db * c_t))


@njit(cache=True)
def _top_indices(v, k):
    """Indices of the ``k`` largest entries of ``v``, ties going to the lower index (unordered)."""
    # binary min-heap on value; scanning in index order means an equal value never displaces a kept one
    heap = np.empty(k, np.int64)
    for f in range(k):
        heap[f] = f
        c = f
        while c > 0:
            p = (c - 1) // 2
            if v[heap[c]] < v[heap[p]] or (v[heap[c]] == v[heap[p]] and heap[c] > heap[p]):
                heap[c], heap[p] = heap[p], heap[c]
                c = p
            else:
                break
    for f in range(k, v.shape[0]):
        if v[f] <= v[heap[0]]:
            continue
        heap[0] = f
        c = 0
        while True:
            l = 2 * c + 1
            if l >= k:
                break
            r = l + 1
            s = l
            if r < k and (v[heap[r]] < v[heap[l]] or (v[heap[r]] == v[heap[l]] and heap[r] > heap[l])):
                s = r
            if v[heap[s]] < v[heap[c]] or (v[heap[s]] == v[heap[c]] and heap[s] > heap[c]):
                heap[c], heap[s] = heap[s], heap[c]
                c = s
            else:
                break
    return heap


@njit(cache=True)
def _lssr(S, pdist, pdir, pt, gx, gy, gt, iters, w, n_r, c_d, c_t, max_pairs, pool_factor):
    m = S.shape[0]
    n = S.shape[1]
    if m == 0 or n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    total = m * n
    small = min(m, n)
    flat = S.ravel()
    npool = total
    if pool_factor > 0:
        npool = min(total, pool_factor * small)

    # candidate pool: the npool largest similarities, ties by flat index
    if npool < total:
        idx = _top_indices(flat, npool)
        idx.sort()
    else:
        idx = np.arange(total)
    order = np.argsort(-flat[idx], kind="mergesort")
    idx = idx[order]
    pi = idx // n
    gj = idx % n
    s = flat[idx].copy()

    n_nb = min(n_r, npool - 1)
    if n_nb > 0 and iters > 0:
        slot = np.full(npool, -1, np.int64)
        cache = np.empty((iters * (n_nb + 1), npool))
        used = 0
        top = np.empty(n_nb + 1, np.int64)
        snew = np.empty(npool)
        seen = np.zeros(n, np.bool_)
        for a in range(npool):
            seen[gj[a]] = True
        gused = np.nonzero(seen)[0]
        dist_g = np.empty(n)
        dir_g = np.empty(n)
        for _ in range(iters):
            cnt = 0
            for a in range(npool):
                v = s[a]
                if cnt < n_nb + 1:
                    pos = cnt
                    cnt += 1
                elif v > s[top[cnt - 1]]:
                    pos = cnt - 1
                else:
                    continue
                while pos > 0 and s[top[pos - 1]] < v:
                    top[pos] = top[pos - 1]
                    pos -= 1
                top[pos] = a
            for r in range(cnt):
                b = top[r]
                if slot[b] < 0:
                    slot[b] = used
                    _column(cache[used], b, pi, gj, pt, gx, gy, gt, gused, c_d, c_t, pdist, pdir, dist_g, dir_g)
                    used += 1
            for a in range(npool):
                acc = 0.0
                got = 0
                for r in range(cnt):
                    b = top[r]
                    if b == a:
                        continue
                    acc += cache[slot[b], a] * s[b]
                    got += 1
                    if got == n_nb:
                        break
                snew[a] = (1.0 - w) * s[a] + w * (acc / got)
            s, snew = snew, s

    # greedy one-to-one: descending relaxed score, ties by (probe, gallery)
    o1 = np.argsort(idx, kind="mergesort")
    o2 = np.argsort(-s[o1], kind="mergesort")
    cap = small
    if max_pairs > 0 and max_pairs < cap:
        cap = max_pairs
    used_p = np.zeros(m, np.bool_)
    used_g = np.zeros(n, np.bool_)
    out_i = np.empty(cap, np.int64)
    out_j = np.empty(cap, np.int64)
    out_s = np.empty(cap)
    c = 0
    for q in range(npool):
        a = o1[o2[q]]
        i = pi[a]
        j = gj[a]
        if used_p[i] or used_g[j]:
            continue
        used_p[i] = True
        used_g[j] = True
        out_i[c] = i
        out_j[c] = j
        out_s[c] = flat[i * n + j]
        c += 1
        if c == cap:
            break
    return out_i[:c], out_j[:c], out_s[:c]


@njit(cache=True)
def _score(sims, m, n):
    raw = 0.0
    for v in sims:
        raw += v
    score = raw / max(1, min(m, n))
    if score < 0.0:
        return 0.0
    if score > 1.0:
        return 1.0
    return score


@njit(cache=True)
def _pair(dp, dgT, pdist, pdir, pt, gx, gy, gt, iters, w, n_r, c_d, c_t, max_pairs, pool_factor):
    S = _sim_matrix(dp, dgT)
    i, j, sims = _lssr(S, pdist, pdir, pt, gx, gy, gt, iters, w, n_r, c_d, c_t, max_pairs, pool_factor)
    return _score(sims, dp.shape[0], dgT.shape[1]), i, j, sims


@njit(parallel=True, cache=True)
def _batch(dp, pxyt, g_descT, g_xyt, offsets, counts, cand, iters, w, n_r, c_d, c_t, max_pairs, pool_factor, keep_pairs):
    C = cand.shape[0]
    m = dp.shape[0]
    scores = np.zeros(C)
    width = m if keep_pairs else 0
    ci = np.full((C, width), -1, np.int64)
    cj = np.full((C, width), -1, np.int64)
    cs = np.zeros((C, width))
    cn = np.zeros(C, np.int64)
    pt = pxyt[:, 2]
    pdist, pdir = _pair_geometry(pxyt[:, 0], pxyt[:, 1], pt)
    for t in prange(C):
        g = cand[t]
        off = offsets[g]
        n = counts[g]
        dgT = g_descT[off * 96 : (off + n) * 96].reshape((96, n))
        gx = g_xyt[off : off + n, 0]
        gy = g_xyt[off : off + n, 1]
        gt = g_xyt[off : off + n, 2]
        sc, i, j, sims = _pair(dp, dgT, pdist, pdir, pt, gx, gy, gt, iters, w, n_r, c_d, c_t, max_pairs, pool_factor)
        scores[t] = sc
        if keep_pairs:
            k = i.shape[0]
            cn[t] = k
            ci[t, :k] = i
            cj[t, :k] = j
            cs[t, :k] = sims
    return scores, ci, cj, cs, cn


# ---------------------------------------------------------------------------
# public API


def _geometry(t: MinutiaeTemplate) -> np.ndarray:
    return np.ascontiguousarray(t.points, dtype=np.float64)


def descriptor_similarity_matrix(dp, dg) -> np.ndarray:
    """Cosine similarity of every probe descriptor against every gallery descriptor."""
    dp = np.ascontiguousarray(dp, dtype=np.float32)
    dg = np.ascontiguousarray(dg, dtype=np.float32)
    if dp.size == 0:
        dp = dp.reshape(0, dg.shape[-1] if dg.ndim == 2 else DESCRIPTOR_DIM)
    if dg.size == 0:
        dg = dg.reshape(0, dp.shape[1])
    if dp.ndim != 2 or dg.ndim != 2 or dp.shape[1] != dg.shape[1]:
        raise ValueError(f"descriptor dimension mismatch: {dp.shape} vs {dg.shape}")
    return _sim_matrix(dp, np.ascontiguousarray(dg.T))


def lssr(S, probe_points, gallery_points, params: LssrParams = LssrParams()) -> Correspondences:
    """Relax descriptor similarities by geometric consistency and pick one-to-one pairs.

    ``probe_points`` and ``gallery_points`` are ``(k, 3)`` arrays of
    ``x, y, theta``.  Reported similarities are the original cosines.
    """
    S = np.ascontiguousarray(S, dtype=np.float64)
    p = np.asarray(probe_points, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gallery_points, dtype=np.float64).reshape(-1, 3)
    if S.shape != (len(p), len(g)):
        raise ValueError(f"similarity matrix {S.shape} does not match point counts {len(p)} x {len(g)}")
    p = np.ascontiguousarray(p)
    g = np.ascontiguousarray(g)
    pdist, pdir = _pair_geometry(p[:, 0], p[:, 1], p[:, 2])
    i, j, s = _lssr(S, pdist, pdir, p[:, 2], g[:, 0], g[:, 1], g[:, 2], *params.kernel_args())
    return Correspondences(i, j, s)


def minutiae_similarity(
    probe: MinutiaeTemplate, gallery: MinutiaeTemplate, params: LssrParams = LssrParams()
) -> Tuple[float, Correspondences]:
    """Normalised LSS-R score in [0, 1] plus the chosen correspondences.

    Works the same for minutiae and virtual-minutiae templates.
    """
    if len(probe) == 0 or len(gallery) == 0:
        return 0.0, Correspondences()
    p = _geometry(probe)
    g = _geometry(gallery)
    dgT = np.ascontiguousarray(gallery.descriptors.T)
    pdist, pdir = _pair_geometry(p[:, 0], p[:, 1], p[:, 2])
    score, i, j, s = _pair(
        probe.descriptors, dgT, pdist, pdir, p[:, 2], g[:, 0], g[:, 1], g[:, 2], *params.kernel_args()
    )
    return float(score), Correspondences(i, j, s)


@dataclass
class PackedTemplates:
    """Contiguous gallery-side storage for the batched scan.

    Descriptors of template ``g`` occupy ``descT[offsets[g]*96 : (offsets[g]+counts[g])*96]``
    as a transposed ``(96, counts[g])`` block.
    """

    descT: np.ndarray
    xyt: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray

    @classmethod
    def build(cls, templates) -> "PackedTemplates":
        counts = np.array([len(t) for t in templates], dtype=np.int64)
        offsets = np.zeros(len(templates), dtype=np.int64)
        if len(templates):
            offsets[1:] = np.cumsum(counts)[:-1]
        total = int(counts.sum())
        descT = np.empty(total * DESCRIPTOR_DIM, dtype=np.float32)
        xyt = np.empty((total, 3), dtype=np.float64)
        for t, off, n in zip(templates, offsets, counts):
            if n:
                descT[off * DESCRIPTOR_DIM : (off + n) * DESCRIPTOR_DIM] = t.descriptors.T.ravel()
                xyt[off : off + n] = t.points
        return cls(descT, xyt, offsets, counts)


def batch_similarity(
    probe: MinutiaeTemplate,
    packed: PackedTemplates,
    candidates: np.ndarray,
    params: LssrParams = LssrParams(),
    keep_pairs: bool = False,
):
    """Score ``probe`` against ``candidates`` (indices into ``packed``).

    Returns ``scores`` and, with ``keep_pairs``, padded correspondence arrays
    ``(probe_idx, gallery_idx, sims, counts)``.
    """
    cand = np.ascontiguousarray(candidates, dtype=np.int64)
    dp = np.ascontiguousarray(probe.descriptors, dtype=np.float32)
    if len(probe) == 0:
        C = len(cand)
        w = 0
        return np.zeros(C), (np.zeros((C, w), np.int64), np.zeros((C, w), np.int64), np.zeros((C, w)), np.zeros(C, np.int64))
    scores, ci, cj, cs, cn = _batch(
        dp, _geometry(probe), packed.descT, packed.xyt, packed.offsets, packed.counts, cand,
        *params.kernel_args(), keep_pairs,
    )
    return scores, (ci, cj, cs, cn)
