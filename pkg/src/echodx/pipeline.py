"""Stage orchestration behind the CLI subcommands.

Each stage reads and writes only the documented file formats (.ect tensors,
TSV tables, checkpoints, PGM heatmaps) so stages compose through the
filesystem; ``run_all`` chains them in order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from echodx import figures
from echodx.autodiff import Tensor, softmax
from echodx.config import RunConfig, UsageError
from echodx.deeplift import completeness_check, deeplift_attribute, export_heatmaps
from echodx.ect import ManifestRow, read_ect, read_manifest, write_ect
from echodx.metrics import (
    confusion_matrix,
    overall_accuracy,
    write_confusion_tsv,
    write_metrics_tsv,
)
from echodx.network import build_network, checkpoint_load, checkpoint_save
from echodx.phantom import CLASS_NAMES, PhantomParams, generate_dataset
from echodx.preprocess import CineLoop, ReferenceHistogram, preprocess_clip
from echodx.train import (
    ClipDataset,
    SUBSET_NAMES,
    predict,
    reference_from_loops,
    stratified_split,
    train_model,
)
from echodx.tsne import embed_points, write_embedding_tsv


def phantom_params(cfg: RunConfig) -> PhantomParams:
    return PhantomParams(
        task=cfg.phantom_task,
        noise_sigma=cfg.noise_sigma,
        rest_radius=cfg.rest_radius,
        thickness=cfg.thickness,
        amplitudes=tuple(cfg.amplitudes),
        flutters=tuple(cfg.flutters),
    )


def load_loops(manifest_path) -> tuple[list[CineLoop], np.ndarray, list[ManifestRow]]:
    rows = read_manifest(manifest_path)
    if not rows:
        raise ValueError(f"manifest {manifest_path} has no records")
    loops = []
    for r in rows:
        frames = read_ect(r.path)
        loops.append(CineLoop(frames, r.cycle_start, r.cycle_len, r.sample_id))
    labels = np.array([r.label_id for r in rows], dtype=np.int64)
    return loops, labels, rows


def write_split_tsv(path, sample_ids, subsets) -> None:
    lines = ["# sample_id\tsubset"]
    lines += [f"{sid}\t{SUBSET_NAMES[s]}" for sid, s in zip(sample_ids, subsets)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_tsv(path, sample_ids) -> np.ndarray:
    table = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sid, name = line.split("\t")
        table[sid] = SUBSET_NAMES.index(name)
    try:
        return np.array([table[sid] for sid in sample_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"split file {path} is missing sample {exc}") from None


# ---------------------------------------------------------------------------
# stages

def run_synth(cfg: RunConfig, out_dir) -> Path:
    return generate_dataset(cfg.per_class, phantom_params(cfg), out_dir, cfg.seed)


def run_split(cfg: RunConfig, manifest, out_path) -> np.ndarray:
    loops, labels, rows = load_loops(manifest)
    subsets = stratified_split(labels, seed=cfg.seed)
    write_split_tsv(out_path, [r.sample_id for r in rows], subsets)
    return subsets


def build_dataset(cfg: RunConfig, loops, labels,
                  ref: ReferenceHistogram | None = None,
                  train_mask: np.ndarray | None = None) -> ClipDataset:
    geom = cfg.geometry()
    if cfg.hist_match and ref is None:
        pool = loops if train_mask is None else [
            lp for lp, keep in zip(loops, train_mask) if keep
        ]
        ref = reference_from_loops(pool, geom)
    return ClipDataset(loops, labels, cfg.seed, ref=ref, geom=geom,
                       max_shift=cfg.max_shift, max_rotate=cfg.max_rotate,
                       use_hist_match=cfg.hist_match)


def run_preprocess(cfg: RunConfig, manifest, out_dir,
                   ref_path=None) -> list[Path]:
    """Write eval-mode preprocessed clips plus the pooled reference histogram."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loops, _, rows = load_loops(manifest)
    geom = cfg.geometry()
    ref = None
    if cfg.hist_match:
        ref = (ReferenceHistogram.load(ref_path) if ref_path
               else reference_from_loops(loops, geom))
        ref.save(out / "ref_hist.tsv")
    paths = []
    for lp, row in zip(loops, rows):
        clip = preprocess_clip(lp, ref=ref, geom=geom, mode="eval")
        p = out / f"{row.sample_id}.pre.ect"
        write_ect(p, clip)
        paths.append(p)
    return paths


def _evaluate_to_dir(net, data: ClipDataset, idx: np.ndarray, out_dir,
                     make_figures: bool) -> float:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preds, _ = predict(net, data, idx)
    counts = confusion_matrix(data.labels[idx], preds, net.cfg.num_classes)
    write_metrics_tsv(out / "metrics.tsv", counts, CLASS_NAMES)
    write_confusion_tsv(out / "confusion.tsv", counts, CLASS_NAMES)
    if make_figures:
        figures.save_confusion_figure(counts, CLASS_NAMES, out / "confusion.png")
    return overall_accuracy(counts)


def run_train(cfg: RunConfig, manifest, out_dir, split_path=None) -> dict:
    """Train, then evaluate the held-out test subset into the run directory.

    Emits config.txt, split.tsv, ref_hist.tsv, log.tsv, best.ckpt,
    metrics.tsv, confusion.tsv (and figures when enabled).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loops, labels, rows = load_loops(manifest)
    sample_ids = [r.sample_id for r in rows]
    if split_path is not None:
        subsets = read_split_tsv(split_path, sample_ids)
    else:
        subsets = stratified_split(labels, seed=cfg.seed)
    write_split_tsv(out / "split.tsv", sample_ids, subsets)
    (out / "config.txt").write_text(cfg.to_text())

    data = build_dataset(cfg, loops, labels, train_mask=(subsets == 0))
    if data.ref is not None:
        data.ref.save(out / "ref_hist.tsv")

    net = build_network(cfg.network_config(), seed=cfg.seed)
    result = train_model(net, data, subsets, lr=cfg.lr,
                         batch_size=cfg.batch_size, patience=cfg.patience,
                         max_epochs=cfg.max_epochs)
    log_lines = ["# epoch\ttrain_loss\tval_loss"]
    log_lines += [f"{e}\t{tr:.6f}\t{va:.6f}" for e, tr, va in result.log]
    (out / "log.tsv").write_text("\n".join(log_lines) + "\n")
    checkpoint_save(net, out / "best.ckpt")
    if cfg.figures:
        figures.save_training_curves(result.log, out / "training_curve.png")

    test_idx = np.flatnonzero(subsets == 2)
    accuracy = _evaluate_to_dir(net, data, test_idx, out, cfg.figures)
    return {
        "checkpoint": out / "best.ckpt",
        "accuracy": accuracy,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.log),
    }


def _dataset_for_inference(cfg: RunConfig, manifest, ref_path=None) -> tuple:
    loops, labels, rows = load_loops(manifest)
    ref = None
    if cfg.hist_match:
        ref = (ReferenceHistogram.load(ref_path) if ref_path
               else reference_from_loops(loops, cfg.geometry()))
    data = build_dataset(cfg, loops, labels, ref=ref)
    return data, rows


def _subset_indices(cfg: RunConfig, data, rows, split_path) -> np.ndarray:
    if cfg.embed_subset == "all" or split_path is None:
        return np.arange(len(data))
    subsets = read_split_tsv(split_path, [r.sample_id for r in rows])
    return np.flatnonzero(subsets == SUBSET_NAMES.index(cfg.embed_subset))


def run_eval(cfg: RunConfig, ckpt, manifest, out_dir, ref_path=None,
             split_path=None, subset: str = "all") -> float:
    net = checkpoint_load(ckpt)
    data, rows = _dataset_for_inference(cfg, manifest, ref_path)
    if subset == "all" or split_path is None:
        idx = np.arange(len(data))
    else:
        codes = read_split_tsv(split_path, [r.sample_id for r in rows])
        idx = np.flatnonzero(codes == SUBSET_NAMES.index(subset))
    return _evaluate_to_dir(net, data, idx, out_dir, cfg.figures)


def run_embed(cfg: RunConfig, manifest, out_dir, ckpt=None, ref_path=None,
              split_path=None) -> Path:
    """Embed flattened clips or extracted features; writes embedding.tsv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, rows = _dataset_for_inference(cfg, manifest, ref_path)
    idx = _subset_indices(cfg, data, rows, split_path)
    ids = [rows[i].sample_id for i in idx]
    labels = data.labels[idx]
    if cfg.embed_source == "features":
        if ckpt is None:
            raise UsageError("features mode requires a checkpoint (--ckpt)")
        net = checkpoint_load(ckpt)
        feats = []
        for i in idx:
            x = Tensor(data.eval_clip(i)[None, None])
            feats.append(net.features(x, mode="infer").data[0])
        x_mat = np.stack(feats)
    elif cfg.embed_source == "pixels":
        x_mat = np.stack([data.eval_clip(i).reshape(-1) for i in idx])
    else:
        raise UsageError(f"embed_source must be features|pixels, got "
                         f"{cfg.embed_source!r}")
    emb = embed_points(x_mat, labels, cfg.seed, cfg.embed_source,
                       perplexity=min(cfg.perplexity, (len(idx) - 1) / 3),
                       iters=cfg.tsne_iters, learning_rate=cfg.tsne_lr)
    path = out / "embedding.tsv"
    write_embedding_tsv(path, emb, ids)
    if cfg.figures:
        figures.save_embedding_figure(emb.points, labels, CLASS_NAMES,
                                      out / "embedding.png")
    return path


def rank_by_normal_probability(cfg: RunConfig, ckpt, manifest, ref_path=None,
                               split_path=None, subset: str = "all") -> list:
    """Samples sorted by descending predicted probability of class 0."""
    net = checkpoint_load(ckpt)
    data, rows = _dataset_for_inference(cfg, manifest, ref_path)
    if subset == "all" or split_path is None:
        idx = np.arange(len(data))
    else:
        codes = read_split_tsv(split_path, [r.sample_id for r in rows])
        idx = np.flatnonzero(codes == SUBSET_NAMES.index(subset))
    _, probs = predict(net, data, idx)
    ranked = sorted(
        zip([rows[i].sample_id for i in idx], probs[:, 0],
            data.labels[idx].tolist()),
        key=lambda t: (-t[1], t[0]),
    )
    return ranked


def write_ranking_tsv(path, ranked) -> None:
    lines = ["# sample_id\tp_normal\tlabel"]
    lines += [f"{sid}\t{p:.6f}\t{lab}" for sid, p, lab in ranked]
    Path(path).write_text("\n".join(lines) + "\n")


def run_attribute(cfg: RunConfig, ckpt, manifest, sample_id, out_dir,
                  ref_path=None) -> dict:
    """DeepLIFT heatmaps for one sample, plus motion-mask overlap when the
    generator's ground-truth mask sits next to the clip."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = checkpoint_load(ckpt)
    data, rows = _dataset_for_inference(cfg, manifest, ref_path)
    ids = [r.sample_id for r in rows]
    if sample_id not in ids:
        raise ValueError(f"sample {sample_id!r} not in manifest")
    i = ids.index(sample_id)
    clip = data.eval_clip(i)
    amap = deeplift_attribute(net, clip, cfg.attr_class, sample_id=sample_id)
    export_heatmaps(amap, out)
    gap, delta = completeness_check(net, clip, amap)
    if cfg.figures:
        figures.save_attribution_figure(clip, amap.values, out / "attribution.png")

    report = {
        "sample_id": sample_id,
        "target_class": cfg.attr_class,
        "delta_logit": delta,
        "completeness_gap": gap,
    }
    mask_file = Path(str(rows[i].path)[:-4] + ".mask.ect")
    if mask_file.exists():
        mask = read_ect(mask_file) > 0.5
        pos = amap.positive().astype(np.float64)
        total = pos.sum()
        inside = pos[:, mask].sum() if total > 0 else 0.0
        report["positive_mass_in_mask"] = float(inside / total) if total > 0 else 0.0
        report["mask_area_fraction"] = float(mask.mean())
    lines = [f"{k}={v}" for k, v in report.items()]
    (out / "overlap.txt").write_text("\n".join(lines) + "\n")
    return report


class StageFailure(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageFailure(stage, exc) from exc


def run_all_staged(cfg: RunConfig, out_dir) -> dict:
    """synth -> split -> train -> eval -> embed -> attribute, chained on disk.

    A failing stage aborts the run with its name attached.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = {}

    manifest = _staged("synth", run_synth, cfg, out / "data")
    stages["synth"] = manifest

    split_path = out / "data" / "split.tsv"
    _staged("split", run_split, cfg, manifest, split_path)
    stages["split"] = split_path

    train_out = _staged("train", run_train, cfg, manifest, out / "run",
                        split_path=split_path)
    stages["train"] = train_out
    ckpt = train_out["checkpoint"]
    ref_path = out / "run" / "ref_hist.tsv" if cfg.hist_match else None

    stages["eval"] = _staged("eval", run_eval, cfg, ckpt, manifest,
                             out / "eval", ref_path=ref_path,
                             split_path=split_path, subset="test")

    stages["embed"] = _staged("embed", run_embed, cfg, manifest, out / "embed",
                              ckpt=ckpt, ref_path=ref_path,
                              split_path=split_path)

    def _attribute_top():
        ranked = rank_by_normal_probability(cfg, ckpt, manifest,
                                            ref_path=ref_path,
                                            split_path=split_path,
                                            subset="test")
        attr_dir = out / "attribution"
        attr_dir.mkdir(parents=True, exist_ok=True)
        write_ranking_tsv(attr_dir / "ranking.tsv", ranked)
        return run_attribute(cfg, ckpt, manifest, ranked[0][0], attr_dir,
                             ref_path=ref_path)

    stages["attribute"] = _staged("attribute", _attribute_top)
    return stages
