"""echodx command line: the pipeline as subcommands.

Exit codes: 0 success, 1 runtime failure (the failing stage is named),
2 usage error (unknown subcommand, flag, or config key).

ECHODX_THREADS caps BLAS worker threads (0 = automatic); it is applied
before numpy loads, so it only takes effect when this module is the
process entry point.
"""

from __future__ import annotations

import os
import sys


def _cap_threads() -> None:
    raw = os.environ.get("ECHODX_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


_cap_threads()

import argparse
from pathlib import Path

from echodx import __version__
from echodx.config import RunConfig, UsageError, load_config, parse_config_text


def _base_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = []
    for name in ("seed", "per_class", "preset", "max_epochs", "lr",
                 "batch_size", "patience", "phantom_task", "perplexity",
                 "tsne_iters", "attr_class"):
        v = getattr(args, name.replace("-", "_"), None)
        if v is not None:
            overrides.append(f"{name}={v}")
    if getattr(args, "source", None):
        overrides.append(f"embed_source={args.source}")
    if getattr(args, "subset", None):
        overrides.append(f"embed_subset={args.subset}")
    if getattr(args, "no_figures", False):
        overrides.append("figures=off")
    return parse_config_text("\n".join(overrides), cfg)


def _add_common(p, *names):
    if "config" in names:
        p.add_argument("--config", help="flat key=value config file")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="master seed")
    if "preset" in names:
        p.add_argument("--preset", choices=("desk", "full"),
                       help="network size preset (default desk)")
    if "ref" in names:
        p.add_argument("--ref-hist", dest="ref_hist",
                       help="reference histogram TSV from a training run")
    if "split" in names:
        p.add_argument("--split", help="split.tsv restricting the sample set")
    if "figures" in names:
        p.add_argument("--no-figures", action="store_true",
                       help="skip PNG figure rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="echodx",
        description="Cine-loop classifier pipeline: synthesize phantoms, "
                    "train a factorized (2+1)D classifier, evaluate, embed, "
                    "and attribute.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--phantom-task", dest="phantom_task",
                   choices=("lv", "valve"))
    _add_common(p, "config", "seed")

    p = sub.add_parser("preprocess", help="write eval-mode preprocessed clips")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, "config", "seed", "ref")

    p = sub.add_parser("split", help="stratified 70/10/20 split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output split.tsv path")
    _add_common(p, "config", "seed")

    p = sub.add_parser("train", help="train and evaluate on the test subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--split", help="precomputed split.tsv (default: derive)")
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    _add_common(p, "config", "seed", "preset", "figures")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", choices=("all", "train", "val", "test"),
                   default="all")
    _add_common(p, "config", "seed", "ref", "split", "figures")

    p = sub.add_parser("embed", help="tSNE embedding of clips or features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="checkpoint (required for features mode)")
    p.add_argument("--source", choices=("features", "pixels"))
    p.add_argument("--subset", choices=("all", "train", "val", "test"))
    p.add_argument("--perplexity", type=float)
    p.add_argument("--tsne-iters", dest="tsne_iters", type=int)
    _add_common(p, "config", "seed", "ref", "split", "figures")

    p = sub.add_parser("attribute", help="DeepLIFT heatmaps for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", required=True, help="sample_id from the manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--attr-class", dest="attr_class", type=int)
    _add_common(p, "config", "seed", "ref", "figures")

    p = sub.add_parser("rank-normal",
                       help="rank samples by predicted normal-class probability")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output ranking.tsv path")
    p.add_argument("--subset", choices=("all", "train", "val", "test"),
                   default="all")
    _add_common(p, "config", "seed", "ref", "split")

    p = sub.add_parser("all", help="full pipeline: synth through attribute")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--phantom-task", dest="phantom_task",
                   choices=("lv", "valve"))
    _add_common(p, "config", "seed", "preset", "figures")
    return ap


def _dispatch(args) -> int:
    from echodx import pipeline

    cfg = _base_config(args)
    cmd = args.command
    stage = cmd
    try:
        if cmd == "synth":
            manifest = pipeline.run_synth(cfg, args.out)
            print(f"wrote {manifest}")
        elif cmd == "preprocess":
            paths = pipeline.run_preprocess(cfg, args.manifest, args.out,
                                            ref_path=args.ref_hist)
            print(f"wrote {len(paths)} preprocessed clips to {args.out}")
        elif cmd == "split":
            pipeline.run_split(cfg, args.manifest, args.out)
            print(f"wrote {args.out}")
        elif cmd == "train":
            res = pipeline.run_train(cfg, args.manifest, args.out,
                                     split_path=args.split)
            print(f"best epoch {res['best_epoch']} "
                  f"({res['epochs_run']} epochs run); "
                  f"test accuracy {res['accuracy']:.3f}; "
                  f"checkpoint {res['checkpoint']}")
        elif cmd == "eval":
            acc = pipeline.run_eval(cfg, args.ckpt, args.manifest, args.out,
                                    ref_path=args.ref_hist,
                                    split_path=args.split, subset=args.subset)
            print(f"accuracy {acc:.3f}; report in {args.out}")
        elif cmd == "embed":
            path = pipeline.run_embed(cfg, args.manifest, args.out,
                                      ckpt=args.ckpt, ref_path=args.ref_hist,
                                      split_path=args.split)
            print(f"wrote {path}")
        elif cmd == "attribute":
            report = pipeline.run_attribute(cfg, args.ckpt, args.manifest,
                                            args.sample, args.out,
                                            ref_path=args.ref_hist)
            print(f"attributed {report['sample_id']} "
                  f"(delta logit {report['delta_logit']:.4f}); "
                  f"heatmaps in {args.out}")
        elif cmd == "rank-normal":
            ranked = pipeline.rank_by_normal_probability(
                cfg, args.ckpt, args.manifest, ref_path=args.ref_hist,
                split_path=args.split, subset=args.subset)
            pipeline.write_ranking_tsv(args.out, ranked)
            print(f"wrote {args.out} ({len(ranked)} samples)")
        elif cmd == "all":
            stages = pipeline.run_all_staged(cfg, args.out)
            top = stages["attribute"]
            print(f"pipeline complete in {args.out}; "
                  f"test accuracy {stages['eval']:.3f}; "
                  f"attributed {top['sample_id']}")
        else:  # pragma: no cover - argparse guards this
            raise UsageError(f"unknown command {cmd!r}")
    except UsageError:
        raise
    except Exception as exc:
        if cmd == "all" and isinstance(exc, pipeline.StageFailure):
            stage = exc.stage
            exc = exc.cause
        print(f"error: stage {stage}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
