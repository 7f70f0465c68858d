"""Command-line entry point: synth, preprocess, train, eval, ablate.

Exit status is 0 only when every requested scenario (or variant) produced a
report; 1 when some failed; 2 for bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, paper_scale
from .errors import RecapError

log = logging.getLogger("recapdet")

SCENARIO_CHOICES = ("intra", "cross-dataset", "cross-quality", "cross-dataset+quality")
CROSS_DOMAIN = SCENARIO_CHOICES[1:]


# -- run-config flags --------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, arch_only: bool = False) -> None:
    p.add_argument("--config", help="run-config JSON file; flags below override it")
    p.add_argument("--k", type=int, help="filter-bank threshold")
    p.add_argument("--input-side", type=int, help="network input side (multiple of 16)")
    p.add_argument("--scales", type=int, choices=(1, 2, 3))
    p.add_argument("--no-xattn", action="store_true", help="disable cross-attention (base-fusion)")
    p.add_argument("--branch1-only", action="store_true", help="branch1 + head only")
    p.add_argument("--variant", help="named variant, e.g. 'proposed(2scale)'")
    p.add_argument("--corpus", help="corpus directory")
    if arch_only:
        return
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.add_argument("--paper-scale", action="store_true", help="batch 64, 20 epochs")


_SIMPLE = {"k": "k", "input_side": "input_side", "scales": "scales", "seed": "seed", "epochs": "epochs",
           "batch_size": "batch_size", "lr": "lr", "dtype": "dtype"}


def _overrides(args) -> dict:
    """Run-config fields explicitly set on the command line."""
    out = {}
    for attr, key in _SIMPLE.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "no_xattn", False):
        out["xattn_enabled"] = False
    if getattr(args, "branch1_only", False):
        out["branch1_only"] = True
    return out


def _apply(base: RunConfig, args) -> RunConfig:
    cfg = RunConfig.from_dict({**base.to_dict(), **_overrides(args)})
    if getattr(args, "variant", None):
        cfg = cfg.with_variant(args.variant)
    if getattr(args, "paper_scale", False):
        cfg = paper_scale(cfg)
    paths = cfg.paths
    for attr in ("corpus", "checkpoint", "log"):
        value = getattr(args, attr, None)
        if value is not None:
            paths = replace(paths, **{attr: value})
    return replace(cfg, paths=paths)


def run_config_from_args(args) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return _apply(base, args)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import CorpusConfig, write_corpus

    cfg = CorpusConfig(n_templates=args.templates, per_template=args.per_template, seed=args.seed,
                       jpeg_q=args.jpeg_q, size=args.size, split=tuple(args.split))
    samples = write_corpus(args.out, cfg)
    print(f"wrote {len(samples)} images to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from .filterbank import decode_image, filter_bank_preprocess, save_band_image, save_triptych

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for src in args.inputs:
        try:
            band = filter_bank_preprocess(decode_image(src), args.k, args.side)
        except RecapError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failed += 1
            continue
        stem = Path(src).stem
        save_band_image(out / f"{stem}.npy", band)
        if args.triptych:
            save_triptych(out / f"{stem}.png", band)
    print(f"processed {len(args.inputs) - failed}/{len(args.inputs)} images into {out}")
    return 1 if failed else 0


def cmd_train(args) -> int:
    from .harness import train

    cfg = run_config_from_args(args)
    if args.save_config:
        cfg.save(args.save_config)
    res = train(cfg, on_epoch=lambda rec: print(json.dumps(rec), flush=True))
    print(f"best epoch {res.best_epoch} (val AUC {res.best_val_auc:.2f}); checkpoint {res.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from . import checkpoint as ckpt_io
    from .harness import Corpus, evaluate_model, load_model, write_reports
    from .metrics import roc_points

    stored = RunConfig.from_dict(ckpt_io.load(args.checkpoint).config)
    # architecture flags given on the command line must agree with the checkpoint
    requested = _apply(RunConfig.load(args.config) if args.config else stored, args)
    model, cfg = load_model(args.checkpoint, requested)
    if args.hter_threshold is not None:
        cfg = replace(cfg, hter_threshold=args.hter_threshold)
    corpus = Corpus.load(args.corpus or cfg.paths.corpus)
    scenarios = args.scenario or list(SCENARIO_CHOICES)
    reports, failed = [], []
    for sc in scenarios:
        try:
            reports.append(evaluate_model(model, cfg, corpus, sc))
        except RecapError as exc:
            print(f"error: scenario {sc}: {exc}", file=sys.stderr)
            failed.append(sc)
    out = Path(args.out or cfg.paths.reports)
    if reports:
        csv_path = write_reports(out, reports)
        print(csv_path.read_text(), end="")
        if args.roc:
            for rep in reports:
                pts = roc_points(rep.scores, rep.labels)
                (out / f"{rep.scenario}.roc.json").write_text(json.dumps(
                    [{"threshold": str(t), "far": a, "tpr": b} for t, a, b in pts]))
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .harness import Corpus, ablate

    cfg = run_config_from_args(args)
    corpus = Corpus.load(cfg.paths.corpus)
    scenarios = args.scenario or CROSS_DOMAIN
    kw = {"variants": args.variants} if args.variants else {}
    res = ablate(cfg, corpus, scenarios=scenarios, out_dir=args.out, **kw)
    for sc in scenarios:
        print(f"# {sc}")
        print(res.table(sc), end="")
    for variant, err in res.errors.items():
        print(f"error: {variant}: {err}", file=sys.stderr)
    return 1 if res.errors else 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recapdet", description="Recaptured-document detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--templates", type=int, default=12)
    s.add_argument("--per-template", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jpeg-q", type=int, default=75)
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--split", type=int, nargs=3, default=(8, 2, 2), metavar=("TRAIN", "VAL", "TEST"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="filter-bank decomposition of image files")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--side", type=int, default=224)
    s.add_argument("--triptych", action="store_true", help="also write a PNG of the three bands")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one model")
    _add_run_flags(s)
    s.add_argument("--save-config", help="write the effective run config here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on scenarios")
    s.add_argument("--checkpoint", required=True)
    _add_run_flags(s, arch_only=True)
    s.add_argument("--scenario", action="append", choices=SCENARIO_CHOICES,
                   help="repeatable; default is all four")
    s.add_argument("--out", help="report directory")
    s.add_argument("--hter-threshold", type=float)
    s.add_argument("--roc", action="store_true", help="also dump ROC points")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate every variant")
    _add_run_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--scenario", action="append", choices=SCENARIO_CHOICES)
    s.add_argument("--variants", nargs="+")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RecapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
