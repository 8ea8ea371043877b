"""Stratified splitting, Adam optimization, and the early-stopped epoch loop.

Split sizes use round-half-even on exact fractions (the unique common
rounding rule that reproduces the published per-class dataset counts, e.g.
285 -> 200/28/57). Training shuffles with a per-epoch derived stream,
optimizes in batches of 16, monitors validation loss with patience 50, and
restores the best snapshot on stop. Given (seed, data, config) the run is
bit-reproducible on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from echodx.autodiff import Tape, Tensor, softmax, softmax_cross_entropy
from echodx.network import Network
from echodx.preprocess import (
    CineLoop,
    ReferenceHistogram,
    SectorGeometry,
    augment,
    clip_histogram,
    mask_overlay,
    preprocess_clip,
    resample_cycle,
    roll_clip,
    sample_clip_start,
    sector_mask,
)
from echodx.seeding import stream

SUBSET_NAMES = ("train", "val", "test")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


def _round_half_even(x: Fraction) -> int:
    q, r = divmod(x.numerator, x.denominator)
    twice = 2 * r
    if twice < x.denominator:
        return q
    if twice > x.denominator:
        return q + 1
    return q if q % 2 == 0 else q + 1


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    return Fraction(str(x))


def split_sizes(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """(n_train, n_val, n_test) by round-half-even; test takes the remainder."""
    fr = [_as_fraction(f) for f in fractions]
    if sum(fr) != 1:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n_train = _round_half_even(fr[0] * n)
    n_val = _round_half_even(fr[1] * n)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"degenerate split for n={n}")
    return n_train, n_val, n_test


def stratified_split(labels, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> np.ndarray:
    """Assign each index a subset code 0/1/2 (train/val/test), per class.

    Membership within a class comes from a seeded shuffle of its indices.
    """
    labels = np.asarray(labels)
    out = np.full(labels.shape[0], -1, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 3:
            raise ValueError(f"class {cls} has {idx.size} samples, need >= 3")
        n_tr, n_va, _ = split_sizes(idx.size, fractions)
        perm = stream(seed, "split", int(cls)).permutation(idx.size)
        shuffled = idx[perm]
        out[shuffled[:n_tr]] = 0
        out[shuffled[n_tr:n_tr + n_va]] = 1
        out[shuffled[n_tr + n_va:]] = 2
    return out


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update over ``params`` from their .grad."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params:
        g = p.grad.data
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        m, v = state.m[p.name], state.v[p.name]
        if m.shape != p.value.data.shape:
            raise ValueError(
                f"moment shape {m.shape} != parameter shape {p.value.data.shape} "
                f"for {p.name}"
            )
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.value.data[...] = p.value.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# early stopping

@dataclass
class EarlyStopState:
    patience: int = 50
    min_delta: float = 1e-6
    best: float = float("inf")
    best_epoch: int = 0
    since_improvement: int = 0
    snapshot: dict | None = None


def early_stop_check(state: EarlyStopState, val_loss: float, epoch: int,
                     net: Network) -> bool:
    """Record the epoch; return True to continue, False to stop.

    On stop the best snapshot is restored into ``net``.
    """
    if val_loss < state.best - state.min_delta:
        state.best = val_loss
        state.best_epoch = epoch
        state.since_improvement = 0
        state.snapshot = net.snapshot()
    else:
        state.since_improvement += 1
    if state.since_improvement >= state.patience:
        if state.snapshot is not None:
            net.restore(state.snapshot)
        return False
    return True


# ---------------------------------------------------------------------------
# dataset plumbing

class ClipDataset:
    """Caches the deterministic preprocessing of each sample and assembles
    train batches with the per-(sample, epoch) random roll and warp."""

    def __init__(self, loops: list[CineLoop], labels, seed: int,
                 ref: ReferenceHistogram | None = None,
                 geom: SectorGeometry | None = None,
                 max_shift: float = 8.0, max_rotate: float = 10.0,
                 use_hist_match: bool = True):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.seed = seed
        self.geom = geom
        self.max_shift = max_shift
        self.max_rotate = max_rotate
        if use_hist_match and ref is None:
            ref = reference_from_loops(loops, geom)
        self.ref = ref
        self.sample_ids = [lp.sample_id for lp in loops]
        self.base = [
            preprocess_clip(lp, ref=self.ref, geom=geom, mode="eval")
            for lp in loops
        ]

    def __len__(self):
        return len(self.base)

    def eval_clip(self, i: int) -> np.ndarray:
        return self.base[i]

    def train_clip(self, i: int, epoch: int) -> np.ndarray:
        rng = stream(self.seed, "sample", self.sample_ids[i], epoch)
        clip = roll_clip(self.base[i], sample_clip_start("train", rng))
        return augment(clip, rng, self.max_shift, self.max_rotate)


def reference_from_loops(loops, geom: SectorGeometry | None = None) -> ReferenceHistogram:
    """Pool the 256-bin histogram of resampled, masked cycles."""
    total = np.zeros(256, dtype=np.int64)
    for lp in loops:
        work = mask_overlay(lp, geom) if geom is not None else lp
        cyc = resample_cycle(work)
        mask = None
        if geom is not None:
            mask = sector_mask(geom, cyc.shape[1], cyc.shape[2])
        total += clip_histogram(cyc, mask)
    return ReferenceHistogram(total)


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, order.size, batch_size):
        yield order[i:i + batch_size]


def train_epoch(net: Network, data: ClipDataset, train_idx: np.ndarray,
                val_idx: np.ndarray, adam: AdamState, epoch: int,
                batch_size: int = 16) -> tuple[float, float]:
    """One optimization pass plus a validation pass; returns mean losses."""
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation sets must be non-empty")
    order = train_idx[stream(data.seed, "shuffle", epoch).permutation(train_idx.size)]
    total, seen = 0.0, 0
    for batch in _batches(order, batch_size):
        x = np.stack([data.train_clip(i, epoch) for i in batch])[:, None]
        y = data.labels[batch]
        tape = Tape()
        logits = net.forward(Tensor(x), mode="train", tape=tape)
        loss = softmax_cross_entropy(logits, y, tape)
        lval = loss.item()
        if not np.isfinite(lval):
            raise TrainingDiverged(f"non-finite train loss at epoch {epoch}")
        net.zero_grad()
        tape.backward(loss)
        adam_step(net.parameters(), adam)
        total += lval * batch.size
        seen += batch.size
    val_loss = evaluate_loss(net, data, val_idx, batch_size)
    if not np.isfinite(val_loss):
        raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
    return total / seen, val_loss


def evaluate_loss(net: Network, data: ClipDataset, idx: np.ndarray,
                  batch_size: int = 16) -> float:
    total, seen = 0.0, 0
    for batch in _batches(idx, batch_size):
        x = np.stack([data.eval_clip(i) for i in batch])[:, None]
        loss = softmax_cross_entropy(
            net.forward(Tensor(x), mode="infer"), data.labels[batch]
        )
        total += loss.item() * batch.size
        seen += batch.size
    return total / seen


def predict(net: Network, data: ClipDataset, idx: np.ndarray,
            batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, class probabilities) under eval preprocessing."""
    preds, probs = [], []
    for batch in _batches(idx, batch_size):
        x = np.stack([data.eval_clip(i) for i in batch])[:, None]
        p = softmax(net.forward(Tensor(x), mode="infer").data)
        probs.append(p)
        preds.append(np.argmax(p, axis=1))
    return np.concatenate(preds), np.concatenate(probs)


@dataclass
class TrainResult:
    log: list[tuple[int, float, float]]
    best_epoch: int
    stopped_early: bool


def train_model(net: Network, data: ClipDataset, subsets: np.ndarray,
                lr: float = 0.001, batch_size: int = 16, patience: int = 50,
                max_epochs: int = 500) -> TrainResult:
    """Run the epoch loop until early stop or the epoch cap.

    At the cap, the best snapshot (if any) is restored, matching the
    early-stop contract.
    """
    train_idx = np.flatnonzero(subsets == 0)
    val_idx = np.flatnonzero(subsets == 1)
    adam = AdamState(lr=lr)
    stopper = EarlyStopState(patience=patience)
    log = []
    stopped = False
    for epoch in range(1, max_epochs + 1):
        tr, va = train_epoch(net, data, train_idx, val_idx, adam, epoch, batch_size)
        log.append((epoch, tr, va))
        if not early_stop_check(stopper, va, epoch, net):
            stopped = True
            break
    if not stopped and stopper.snapshot is not None:
        net.restore(stopper.snapshot)
    return TrainResult(log, stopper.best_epoch, stopped)
