from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest

from latent_search.engine import Engine, StageConfig
from latent_search.metrics import (
    MetricCurve,
    MetricError,
    Trial,
    TrialSet,
    auth_metrics,
    cmc,
    minutiae_accuracy,
    open_set,
)
from latent_search.provider import SyntheticProvider
from latent_search.template import Kind, Minutia


def _trial(pid, mate, *cands):
    return Trial(pid, mate, tuple(cands))


# ---------------------------------------------------------------------------
# CMC


def test_cmc_all_rank_one():
    ts = TrialSet([_trial(f"p{i}", f"g{i}", (f"g{i}", 0.9), ("x", 0.1)) for i in range(5)])
    assert cmc(ts, 10).y.tolist() == [1.0] * 10


def test_cmc_single_probe_rank_three():
    ts = TrialSet([_trial("p", "g", ("a", 0.9), ("b", 0.8), ("g", 0.7), ("c", 0.1))])
    y = cmc(ts, 5).y.tolist()
    assert y == [0.0, 0.0, 1.0, 1.0, 1.0]


def test_cmc_rejects_unmated():
    with pytest.raises(MetricError):
        cmc(TrialSet([_trial("p", None, ("a", 0.5))]), 3)


def _recount(results, mates, max_rank):
    # independent recount: position of the mate in the id list, counted per cut-off
    ranks = []
    for r in results:
        ids = r.ranked_ids()
        ranks.append(ids.index(mates[r.probe_id]) + 1 if mates[r.probe_id] in ids else math.inf)
    return [sum(1 for x in ranks if x <= k) / len(ranks) for k in range(1, max_rank + 1)]


def test_cmc_matches_recount_on_synthetic_run():
    from latent_search.engine import Gallery
    from latent_search.synthetic import make_corpus

    corpus = make_corpus(23, 30, 50)
    eng = Engine(Gallery(corpus.gallery), StageConfig(k=30, l=30), provider=SyntheticProvider())
    results = eng.search_many(corpus.probes)
    curve = cmc(TrialSet.from_results(results, corpus.mates, eng.gallery.ids), 30)
    assert curve.y.tolist() == _recount(results, corpus.mates, 30)
    assert curve.y[-1] == 1.0


def test_trialset_rejects_unknown_mate():
    class R:
        probe_id = "p"
        candidates = []

    with pytest.raises(MetricError):
        TrialSet.from_results([R()], {"p": "ghost"}, ["g0"])


def test_cmc_monotone_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q, n = int(rng.integers(1, 20)), int(rng.integers(1, 30))
        trials = []
        for i in range(q):
            ids = [f"g{j}" for j in rng.permutation(n)[: int(rng.integers(0, n + 1))]]
            trials.append(Trial(f"p{i}", f"g{rng.integers(n)}", tuple((g, 0.5) for g in ids)))
        y = cmc(TrialSet(trials), n).y
        assert np.all(np.diff(y) >= 0) and 0 <= y[0] and y[-1] <= 1


# ---------------------------------------------------------------------------
# open set

HAND = TrialSet(
    [
        _trial("m1", "a", ("a", 0.9)),
        _trial("m2", "b", ("b", 0.6)),
        _trial("m3", "c", ("z", 0.8), ("c", 0.5)),
        _trial("m4", "d", ("d", 0.4)),
        _trial("u1", None, ("a", 0.7)),
        _trial("u2", None, ("b", 0.5)),
        _trial("u3", None, ("c", 0.3)),
        _trial("u4", None, ("d", 0.2)),
    ]
)


def test_open_set_hand_enumeration():
    curve = open_set(HAND)
    assert curve.x.tolist() == [-math.inf, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.9, math.inf]
    assert curve.extra["fpir"].tolist() == [1, 1, 0.75, 0.5, 0.5, 0.25, 0.25, 0, 0]
    assert curve.y.tolist() == [0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 1.0]
    assert curve.operating_points["fnir_at_target"] == 0.75
    assert curve.operating_points["threshold"] == 0.9


def test_open_set_operating_point_at_looser_target():
    ops = open_set(HAND, target_fpir=0.25).operating_points
    assert (ops["threshold"], ops["fnir_at_target"]) == (0.6, 0.5)


def test_open_set_vacuous_and_impossible_thresholds():
    curve = open_set(HAND, thresholds=[-math.inf, 2.0])
    assert curve.extra["fpir"].tolist() == [1.0, 0.0]
    assert curve.y.tolist() == [0.25, 1.0]


def test_open_set_needs_both_kinds():
    with pytest.raises(MetricError):
        open_set(TrialSet([_trial("m", "a", ("a", 1.0))]))


def test_open_set_monotone_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        trials = []
        for i in range(int(rng.integers(2, 25))):
            mate = None if i % 2 else f"g{rng.integers(5)}"
            top = f"g{rng.integers(5)}"
            trials.append(Trial(f"p{i}", mate, ((top, float(np.round(rng.random(), 2))),)))
        curve = open_set(TrialSet(trials))
        assert np.all(np.diff(curve.extra["fpir"]) <= 0)
        assert np.all(np.diff(curve.y) >= 0)
        assert curve.extra["fpir"][0] == 1.0 and curve.y[-1] == 1.0


# ---------------------------------------------------------------------------
# verification


def test_auth_separated():
    out = auth_metrics([1.0] * 5, [0.0] * 7)
    assert out["tar@far=0.0001"] == 1.0 and out["tar@far=0.001"] == 1.0
    assert out["eer"] == 0.0


def test_auth_identical_distributions():
    s = [0.1, 0.4, 0.4, 0.8]
    assert auth_metrics(s, s)["eer"] == pytest.approx(0.5, abs=1e-12)


def _eer_oracle(gen, imp):
    # exhaustive sweep over every observed score plus +inf, then interpolate the first sign change
    taus = sorted(set(gen) | set(imp)) + [math.inf]
    pts = [(sum(s >= t for s in imp) / len(imp), sum(s < t for s in gen) / len(gen)) for t in taus]
    for (fa0, fr0), (fa1, fr1) in zip(pts, pts[1:]):
        if fa0 == fr0:
            return fa0
        if (fa0 - fr0) > 0 > (fa1 - fr1):
            s = (fa0 - fr0) / ((fa0 - fr0) - (fa1 - fr1))
            return fa0 + s * (fa1 - fa0)
        if fa1 == fr1:
            return fa1
    raise AssertionError


def test_auth_hand_example():
    gen, imp = [0.9, 0.8, 0.7], [0.75, 0.3, 0.1]
    assert auth_metrics(gen, imp)["eer"] == pytest.approx(1 / 3, abs=1e-12)
    assert _eer_oracle(gen, imp) == pytest.approx(1 / 3, abs=1e-12)


def test_auth_tar_threshold_leans_to_lower_far():
    out = auth_metrics([0.9, 0.8, 0.7, 0.6], [0.85, 0.5, 0.4, 0.3], fars=(0.25, 0.0))
    assert out["threshold@far=0.25"] == 0.6 and out["tar@far=0.25"] == 1.0
    assert out["threshold@far=0"] == 0.9 and out["tar@far=0"] == 0.25


def test_auth_empty():
    with pytest.raises(MetricError):
        auth_metrics([], [0.1])


def test_eer_fuzz_bounds_oracle_and_permutation():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        gen = np.round(rng.random(int(rng.integers(1, 15))), 1)
        imp = np.round(rng.random(int(rng.integers(1, 15))), 1)
        e = auth_metrics(gen, imp)["eer"]
        assert 0.0 <= e <= 1.0
        assert e == pytest.approx(_eer_oracle(gen.tolist(), imp.tolist()), abs=1e-12)
        assert auth_metrics(rng.permutation(gen), rng.permutation(imp)) == auth_metrics(gen, imp)


# ---------------------------------------------------------------------------
# minutiae accuracy


def _m(x, y, deg=0.0, kind=Kind.RIDGE_ENDING):
    return Minutia(float(x), float(y), math.radians(deg), kind)


def test_accuracy_identical():
    truth = [_m(10, 10), _m(50, 60, 90), _m(100, 30, 180, Kind.BIFURCATION)]
    assert minutiae_accuracy(truth, truth) == (3, 0, 0)


def test_accuracy_shift_eleven():
    truth = [_m(10, 10), _m(50, 60, 90)]
    pred = [_m(m.x + 11, m.y, math.degrees(m.theta)) for m in truth]
    assert minutiae_accuracy(pred, truth) == (0, 2, 2)


def test_accuracy_boundaries():
    t = [_m(0, 0, 0)]
    assert minutiae_accuracy([_m(10, 0, 0)], t) == (1, 0, 0)  # distance inclusive
    assert minutiae_accuracy([_m(0, 0, 10)], t) == (0, 1, 1)  # angle strict
    assert minutiae_accuracy([_m(0, 0, 355)], t) == (1, 0, 0)  # angle wraps
    assert minutiae_accuracy([_m(0, 0, 0, Kind.BIFURCATION)], t) == (0, 1, 1)


def _greedy_oracle(pred, truth):
    # enumerate every one-to-one assignment of admissible pairs and keep the one whose
    # sorted (distance, pred, truth) edge list is lexicographically smallest among maximal ones
    # that the greedy rule can produce: i.e. simulate all edge orderings consistent with the key
    edges = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            d = math.hypot(p.x - t.x, p.y - t.y)
            a = abs(p.theta - t.theta) % (2 * math.pi)
            if p.kind == t.kind and d <= 10 and min(a, 2 * math.pi - a) < math.radians(10):
                edges.append((d, i, j))
    best = None
    for r in range(len(edges), -1, -1):
        for sub in itertools.combinations(sorted(edges), r):
            if len({e[1] for e in sub}) < r or len({e[2] for e in sub}) < r:
                continue
            # greedy-stable: no rejected edge precedes an accepted edge it conflicts with
            chosen = set(sub)
            ok = all(
                any(c < e and (c[1] == e[1] or c[2] == e[2]) for c in chosen)
                for e in edges
                if e not in chosen
            )
            if ok:
                best = r
                break
        if best is not None:
            break
    return best, len(pred) - best, len(truth) - best


def test_accuracy_ambiguous_constructed_case():
    truth = [_m(0, 0), _m(8, 0)]
    pred = [_m(4, 0), _m(12, 0), _m(0, 9)]
    # pred 0 is 4 px from both truths; the tie goes to truth 0, leaving truth 1 for pred 1
    assert minutiae_accuracy(pred, truth) == (2, 1, 0)
    assert _greedy_oracle(pred, truth) == (2, 1, 0)


def test_accuracy_conservation_fuzz():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        def pts(n):
            return [
                _m(rng.integers(0, 40), rng.integers(0, 40), rng.choice([0, 5, 12, 350]), Kind(int(rng.integers(0, 2))))
                for _ in range(n)
            ]

        pred, truth = pts(int(rng.integers(0, 8))), pts(int(rng.integers(0, 8)))
        c, s, m = minutiae_accuracy(pred, truth)
        assert c + s == len(pred) and c + m == len(truth) and c >= 0
        if len(pred) * len(truth) <= 16:
            assert (c, s, m) == _greedy_oracle(pred, truth)


# ---------------------------------------------------------------------------
# curve output


def test_curve_requires_increasing_x():
    with pytest.raises(MetricError):
        MetricCurve("x", [1, 1], [0, 0])


def test_curve_csv_and_json(tmp_path):
    curve = open_set(HAND)
    text = curve.to_csv()
    assert text.splitlines()[0] == "x,y"
    assert text.splitlines()[1] == "-inf,0.25"
    doc = json.loads(curve.to_json())
    assert doc["kind"] == "open_set" and doc["x"][-1] == "inf" and len(doc["fpir"]) == 9
    curve.write(tmp_path / "c.csv", tmp_path / "c.json")
    assert (tmp_path / "c.csv").read_text() == text
