"""Command-line front end: ``latent-search <command> ...``.

Exit status is 0 on success, 2 for usage errors (bad flags, inconsistent
K/L) and 1 for runtime failures.  Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger("latent_search")

MATES_NAME = "mates.tsv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _engine_config(args):
    from .config import ConfigError, EngineConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else EngineConfig()
    try:
        return cfg.with_overrides(k=args.k, l=args.l, threads=args.threads, seed=getattr(args, "seed", None))
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _load_templates(path: Path):
    from .template import MANIFEST_NAME, load_collection, load_template

    path = Path(path)
    if path.is_dir():
        if not (path / MANIFEST_NAME).exists():
            raise FileNotFoundError(f"{path}: no {MANIFEST_NAME}")
        return load_collection(path)
    return [load_template(path)]


def read_mates(path: Path) -> Dict[str, Optional[str]]:
    mates: Dict[str, Optional[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise ValueError(f"{path}:{lineno}: expected 'probe_id<TAB>gallery_id'")
        mates[parts[0]] = parts[1] or None
    return mates


def write_mates(path: Path, mates: Dict[str, Optional[str]]) -> None:
    from .io import atomic_write_text

    atomic_write_text(Path(path), "".join(f"{p}\t{g or ''}\n" for p, g in mates.items()))


def read_results(path: Path):
    """Search JSON lines -> ``TrialSet``-ready ``{probe_id: [(gallery_id, score), ...]}`` in rank order."""
    out: Dict[str, list] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.setdefault(rec["probe_id"], []).append((int(rec["rank"]), rec["gallery_id"], float(rec["score"])))
        except (ValueError, KeyError) as e:
            raise ValueError(f"{path}:{lineno}: bad result record ({e})") from None
    return {p: [(g, s) for _, g, s in sorted(rows)] for p, rows in out.items()}


def _provider(name: str):
    from .provider import FeatureProvider, SyntheticProvider

    return SyntheticProvider() if name == "synthetic" else FeatureProvider()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synthetic import LATENT, ROLLED, make_corpus
    from .template import save_collection

    out = Path(args.out)
    corpus = make_corpus(
        args.seed, args.identities, args.probes, unmated_fraction=args.unmated_fraction,
        probe_params=LATENT, gallery_params=ROLLED,
    )
    save_collection(out / "gallery", corpus.gallery)
    save_collection(out / "probes", corpus.probes)
    write_mates(out / MATES_NAME, corpus.mates)
    print(f"wrote {len(corpus.gallery)} gallery and {len(corpus.probes)} probe templates to {out}")
    return 0


def cmd_enroll(args) -> int:
    from .engine import Gallery
    from .template import MANIFEST_NAME

    out = Path(args.out)
    gallery = Gallery.load(out) if (out / MANIFEST_NAME).exists() else Gallery()
    before = len(gallery)
    incoming = [t for src in args.templates for t in _load_templates(Path(src))]
    for t in incoming:
        gallery.enroll(t)
    gallery.save(out)
    print(f"enrolled {len(gallery) - before} templates; gallery size {len(gallery)}")
    return 0


def _search_records(results) -> List[str]:
    lines = []
    for r in results:
        for rank, c in enumerate(r.candidates, 1):
            rec = {
                "probe_id": r.probe_id,
                "rank": rank,
                "gallery_id": c.gallery_id,
                "score": c.score,
                "stage_scores": list(c.stage_scores),
            }
            lines.append(json.dumps(rec))
    return lines


def cmd_search(args) -> int:
    from .engine import Engine, Gallery
    from .io import atomic_write_text

    cfg = _engine_config(args)
    gallery = Gallery.load(Path(args.gallery or cfg.gallery))
    probes = _load_templates(Path(args.probes))
    engine = Engine(gallery, cfg.stage, cfg.lssr, _provider(args.provider), threads=cfg.threads)
    results = engine.search_many(probes)
    text = "\n".join(_search_records(results)) + "\n"
    if args.out:
        atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.audit:
        audit = {
            "comparisons": engine.comparisons,
            "probes": len(probes),
            "gallery": len(gallery),
            "realign_unsupported": sum(r.audit.realign_unsupported for r in results),
            "realign_fallbacks": sum(r.audit.realign_fallbacks for r in results),
        }
        atomic_write_text(Path(args.audit), json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return 0


def _trials(args):
    from .metrics import Trial, TrialSet

    mates = read_mates(Path(args.mates))
    results = read_results(Path(args.results))
    trials = []
    for pid, mate in mates.items():
        trials.append(Trial(pid, mate, tuple(results.get(pid, ()))))
    return TrialSet(trials)


def cmd_eval(args) -> int:
    from .io import atomic_write_text
    from .metrics import MetricError, auth_metrics, cmc, open_set

    trials = _trials(args)
    out = Path(args.out)
    try:
        if args.mode == "closed":
            curve = cmc(trials, args.max_rank)
            curve.write(out.with_suffix(".csv"), out.with_suffix(".json"))
            print(f"rank-1 {curve.y[0]:.4f}")
        elif args.mode == "open":
            curve = open_set(trials, target_fpir=args.fpir)
            curve.write(out.with_suffix(".csv"), out.with_suffix(".json"))
            fnir = curve.operating_points.get("fnir_at_target")
            print(f"FNIR@FPIR={args.fpir:g} {fnir if fnir is None else format(fnir, '.4f')}")
        else:
            genuine, imposter = [], []
            for t in trials.trials:
                for gid, s in t.candidates:
                    (genuine if gid == t.mate_id else imposter).append(s)
            report = auth_metrics(genuine, imposter)
            report.update(genuine=len(genuine), imposter=len(imposter))
            atomic_write_text(out.with_suffix(".json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()))
    except MetricError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    from .engine import Engine, Gallery, measure_latency
    from .io import atomic_write_text
    from .synthetic import make_corpus

    cfg = _engine_config(args)
    if args.gallery:
        gallery = Gallery.load(Path(args.gallery))
        probes = _load_templates(Path(args.probes)) if args.probes else []
    else:
        corpus = make_corpus(cfg.seed, args.identities, args.bench_probes)
        gallery = Gallery(corpus.gallery)
        probes = corpus.probes
    if not probes:
        raise UsageError("bench needs probes (--probes DIR, or omit --gallery to synthesize)")
    engine = Engine(gallery, cfg.stage, cfg.lssr, _provider(args.provider), threads=cfg.threads)
    report = measure_latency(engine, probes[: args.bench_probes])
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_latency(args) -> int:
    from .engine import LatencyModel, predict_latency

    try:
        model = LatencyModel(args.t1, args.t2, args.t3, args.n, args.k, args.l)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"{predict_latency(model):.{args.digits}f}")
    return 0


def cmd_mask(args) -> int:
    from .io import atomic_write_text, read_pgm, write_pgm
    from .mask import binarize_ridge_image, estimate_orientation_field, virtual_grid

    ridge = read_pgm(Path(args.input))
    mask = binarize_ridge_image(ridge)
    write_pgm(Path(args.out), mask * 255)
    if args.virtual:
        field = estimate_orientation_field(ridge)
        grid = virtual_grid(mask, field)
        rows = ["x,y,theta_deg,kind"] + [f"{x:g},{y:g},{np.rad2deg(t)!r},virtual" for x, y, t in grid]
        atomic_write_text(Path(args.virtual), "\n".join(rows) + "\n")
    print(f"mask area {int(mask.sum())} px")
    return 0


def cmd_ingest(args) -> int:
    from .provider import ingest_external
    from .template import Modality, save_template

    t = ingest_external(
        args.minutiae, args.descriptors, args.embedding,
        template_id=args.id, modality=Modality[args.modality.upper()],
        virtual_minutiae_path=args.virtual_minutiae, virtual_descriptor_path=args.virtual_descriptors,
    )
    save_template(t, Path(args.out))
    print(f"{t.id}: {len(t.minutiae)} minutiae, {len(t.virtual)} virtual minutiae")
    return 0


def cmd_config(args) -> int:
    from .io import atomic_write_text

    text = _engine_config(args).dump()
    if args.out:
        atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine config file (key=value)")
    common.add_argument("--threads", type=_positive_int)
    common.add_argument("--k", type=_positive_int, help="stage-1 survivors")
    common.add_argument("--l", type=_positive_int, help="stage-2 survivors")
    common.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="latent-search", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic gallery, probes and mate list")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--identities", type=_positive_int, default=1000)
    s.add_argument("--probes", type=int, default=200)
    s.add_argument("--unmated-fraction", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("enroll", help="add templates to a gallery directory")
    s.add_argument("templates", nargs="+", help="template files or template directories")
    s.add_argument("--out", required=True, help="gallery directory (created or extended)")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("search", parents=[common], help="three-stage search of probes against a gallery")
    s.add_argument("--gallery")
    s.add_argument("--probes", required=True)
    s.add_argument("--provider", choices=("synthetic", "none"), default="synthetic")
    s.add_argument("--out", help="JSON lines output (stdout when absent)")
    s.add_argument("--audit", help="write comparison counters as JSON")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", help="metrics over search results")
    s.add_argument("mode", choices=("closed", "open", "auth"))
    s.add_argument("--results", required=True)
    s.add_argument("--mates", required=True)
    s.add_argument("--max-rank", type=_positive_int, default=20)
    s.add_argument("--fpir", type=float, default=0.02)
    s.add_argument("--out", required=True, help="output path prefix (.csv/.json added)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="measure per-stage latency")
    s.add_argument("--gallery")
    s.add_argument("--probes")
    s.add_argument("--identities", type=_positive_int, default=10_000)
    s.add_argument("--bench-probes", type=_positive_int, default=10)
    s.add_argument("--provider", choices=("synthetic", "none"), default="synthetic")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("latency", help="predicted per-comparison latency t1 + K/N t2 + L/N t3")
    for name in ("t1", "t2", "t3"):
        s.add_argument(f"--{name}", type=float, required=True, help="ms per comparison")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--l", type=_positive_int, required=True)
    s.add_argument("--digits", type=int, default=3)
    s.set_defaults(func=cmd_latency)

    s = sub.add_parser("mask", help="segment a ridge image (PGM) and place virtual minutiae")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="mask PGM")
    s.add_argument("--virtual", help="virtual minutiae CSV")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("ingest", help="build a template from external feature files")
    s.add_argument("--minutiae", required=True)
    s.add_argument("--descriptors", required=True)
    s.add_argument("--embedding", required=True)
    s.add_argument("--virtual-minutiae")
    s.add_argument("--virtual-descriptors")
    s.add_argument("--id", required=True)
    s.add_argument("--modality", choices=("latent", "rolled", "plain", "synthetic"), default="latent")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("config", parents=[common], help="configuration utilities")
    s.add_argument("action", choices=("dump",))
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "k", None) and getattr(args, "l", None) and args.command != "latency" and args.l > args.k:
        parser.error(f"--l ({args.l}) must not exceed --k ({args.k})")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
