"""Identification and verification metrics over search results.

* closed-set CMC (rank-k retrieval rate),
* open-set FNIR/FPIR at rank 1 with a score threshold,
* verification TAR at fixed FAR and EER,
* minutiae-extraction accuracy (correct / spurious / missed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .io import atomic_write_text

OPEN_SET_FPIR = 0.02
AUTH_FARS = (1e-4, 1e-3)
MATCH_DISTANCE = 10.0  # px, inclusive
MATCH_ANGLE = math.radians(10.0)  # strict


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    probe_id: str
    mate_id: Optional[str]
    candidates: Tuple[Tuple[str, float], ...]  # ranked (gallery_id, score)

    @property
    def top(self) -> Optional[Tuple[str, float]]:
        return self.candidates[0] if self.candidates else None

    def mate_rank(self) -> Optional[int]:
        """1-based rank of the mate in the candidate list, ``None`` if absent."""
        for r, (gid, _) in enumerate(self.candidates, 1):
            if gid == self.mate_id:
                return r
        return None


@dataclass
class TrialSet:
    trials: List[Trial] = field(default_factory=list)

    @classmethod
    def from_results(cls, results, mates: Dict[str, Optional[str]], gallery_ids=None) -> "TrialSet":
        """Build from engine search results and a probe id -> mate id map."""
        universe = set(gallery_ids) if gallery_ids is not None else None
        out = []
        for r in results:
            mate = mates.get(r.probe_id)
            if mate is not None and universe is not None and mate not in universe:
                raise MetricError(f"mate {mate!r} of probe {r.probe_id!r} is not enrolled")
            out.append(Trial(r.probe_id, mate, tuple((c.gallery_id, c.score) for c in r.candidates)))
        return cls(out)

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def mated(self) -> List[Trial]:
        return [t for t in self.trials if t.mate_id is not None]

    @property
    def unmated(self) -> List[Trial]:
        return [t for t in self.trials if t.mate_id is None]


@dataclass
class MetricCurve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    operating_points: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape:
            raise MetricError("x and y lengths differ")
        if len(self.x) > 1 and not np.all(np.diff(self.x) > 0):
            raise MetricError("curve x values must be strictly increasing")

    def at(self, x: float) -> float:
        hit = np.nonzero(self.x == x)[0]
        if len(hit) == 0:
            raise KeyError(x)
        return float(self.y[hit[0]])

    def to_csv(self) -> str:
        lines = ["x,y"] + [f"{_num(a)},{_num(b)}" for a, b in zip(self.x, self.y)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "x": [_jnum(v) for v in self.x],
            "y": [_jnum(v) for v in self.y],
            "operating_points": {k: _jnum(v) for k, v in self.operating_points.items()},
        }
        for k, v in self.extra.items():
            doc[k] = [_jnum(a) for a in np.asarray(v)]
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, csv_path, json_path=None) -> None:
        atomic_write_text(Path(csv_path), self.to_csv())
        if json_path is not None:
            atomic_write_text(Path(json_path), self.to_json())


def _num(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _jnum(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# ---------------------------------------------------------------------------
# closed set


def cmc(trials: TrialSet, max_rank: int) -> MetricCurve:
    """Rank-k retrieval rate for ``k = 1..max_rank``."""
    if max_rank < 1:
        raise MetricError("max_rank must be >= 1")
    if len(trials) == 0:
        raise MetricError("no trials")
    if trials.unmated:
        raise MetricError(f"closed-set CMC needs mated probes only; {trials.unmated[0].probe_id!r} has no mate")
    hits = np.zeros(max_rank + 1)
    for t in trials.trials:
        r = t.mate_rank()
        if r is not None and r <= max_rank:
            hits[r] += 1
    y = np.cumsum(hits[1:]) / len(trials)
    x = np.arange(1, max_rank + 1, dtype=np.float64)
    return MetricCurve("cmc", x, y, {"rank1": float(y[0])})


# ---------------------------------------------------------------------------
# open set


def _thresholds(scores: Sequence[float]) -> np.ndarray:
    return np.concatenate([[-np.inf], np.unique(np.asarray(scores, dtype=np.float64)), [np.inf]])


def open_set(trials: TrialSet, thresholds=None, target_fpir: float = OPEN_SET_FPIR) -> MetricCurve:
    """FNIR and FPIR of rank-1 decisions as a function of the threshold ``tau``.

    ``x`` is the threshold, ``y`` the FNIR, and ``extra['fpir']`` the FPIR.
    An unmated probe is a false positive when its top score is ``>= tau``.  A
    mated probe is a miss when its top candidate is not the mate or scores
    below ``tau``.  The summary reports FNIR at the lowest threshold whose
    FPIR does not exceed ``target_fpir``.
    """
    mated, unmated = trials.mated, trials.unmated
    if not mated or not unmated:
        raise MetricError("open-set evaluation needs both mated and unmated probes")
    top = lambda t: t.top[1] if t.top else -np.inf  # noqa: E731
    imp = np.array([top(t) for t in unmated])
    gen = np.array([top(t) if t.top and t.top[0] == t.mate_id else np.nan for t in mated])
    if thresholds is None:
        tau = _thresholds([s for s in np.concatenate([imp, gen]) if np.isfinite(s)])
    else:
        tau = np.unique(np.asarray(thresholds, dtype=np.float64))
    fpir = np.array([np.count_nonzero(imp >= x) for x in tau]) / len(imp)
    # NaN (wrong identity) never clears a threshold
    fnir = np.array([np.count_nonzero(~(gen >= x)) for x in tau]) / len(gen)
    ok = np.nonzero(fpir <= target_fpir)[0]
    ops = {"target_fpir": target_fpir}
    if len(ok):
        i = ok[0]
        ops.update(fnir_at_target=float(fnir[i]), threshold=float(tau[i]), fpir_at_threshold=float(fpir[i]))
    return MetricCurve("open_set", tau, fnir, ops, {"fpir": fpir})


# ---------------------------------------------------------------------------
# verification


def far_frr(genuine, imposter, tau) -> Tuple[np.ndarray, np.ndarray]:
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(imposter, dtype=np.float64))
    tau = np.asarray(tau, dtype=np.float64)
    far = (len(i) - np.searchsorted(i, tau, side="left")) / len(i)
    frr = np.searchsorted(g, tau, side="left") / len(g)
    return far, frr


def auth_metrics(genuine, imposter, fars: Sequence[float] = AUTH_FARS) -> Dict[str, float]:
    """TAR at each target FAR and the EER; a pair is accepted when ``score >= tau``.

    The TAR threshold is the smallest swept ``tau`` whose FAR is within the
    target.  The EER interpolates linearly between the two adjacent swept
    thresholds where ``FAR - FRR`` changes sign.
    """
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    imposter = np.asarray(imposter, dtype=np.float64).ravel()
    if genuine.size == 0 or imposter.size == 0:
        raise MetricError("genuine and imposter score lists must be non-empty")
    tau = np.concatenate([np.unique(np.concatenate([genuine, imposter])), [np.inf]])
    far, frr = far_frr(genuine, imposter, tau)
    out: Dict[str, float] = {}
    for target in fars:
        i = int(np.nonzero(far <= target)[0][0])  # inf always qualifies
        out[f"tar@far={target:g}"] = 1.0 - float(frr[i])
        out[f"threshold@far={target:g}"] = float(tau[i])
    out["eer"] = _eer(far, frr)
    return out


def _eer(far: np.ndarray, frr: np.ndarray) -> float:
    d = far - frr  # starts >= 0 (far=1 at the lowest threshold), ends <= 0
    exact = np.nonzero(d == 0)[0]
    if len(exact):
        return float(far[exact[0]])
    j = int(np.nonzero(d < 0)[0][0])
    i = j - 1
    # crossing of the two segments FAR(s) and FRR(s), s in [0, 1] between swept points
    s = d[i] / (d[i] - d[j])
    return float(far[i] + s * (far[j] - far[i]))


# ---------------------------------------------------------------------------
# minutiae accuracy


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def minutiae_accuracy(pred, truth, max_distance: float = MATCH_DISTANCE, max_angle: float = MATCH_ANGLE):
    """``(correct, spurious, missed)`` under greedy one-to-one matching.

    A predicted and a true minutia may pair when their kinds agree, they lie
    within ``max_distance`` pixels (inclusive) and their directions differ by
    less than ``max_angle``.  Pairs are taken by ascending distance, ties by
    predicted then true index.
    """
    pairs = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            if int(p.kind) != int(t.kind):
                continue
            d = math.hypot(p.x - t.x, p.y - t.y)
            if d <= max_distance and _angle_gap(p.theta, t.theta) < max_angle:
                pairs.append((d, i, j))
    pairs.sort()
    used_p, used_t = set(), set()
    for _, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
    correct = len(used_p)
    return correct, len(pred) - correct, len(truth) - correct
