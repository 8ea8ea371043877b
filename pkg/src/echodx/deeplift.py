"""DeepLIFT relevance propagation from a logit back to input pixels.

The backward pass transports multipliers: linear layers (convolutions,
pooling, affine, residual adds, inference-mode normalization, which is an
exact per-channel affine map) move multipliers through their transpose,
and each ReLU applies the Rescale slope (relu(x)-relu(x0))/(x-x0), falling
back to the local derivative where the input difference is tiny. Seeding 1
at the target pre-softmax logit and multiplying the propagated input
multiplier by (x - x0) yields a map whose sum equals the logit difference
between the clip and the baseline (completeness).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from echodx.autodiff import Parameter, Tape, Tensor
from echodx.ect import write_ect
from echodx.network import Network

_DELTA_TOL = 1e-7
_LINEAR_KINDS = {
    "conv_spatial", "conv_temporal", "affine", "global_avg_pool",
    "add", "batchnorm_infer", "temporal_subsample",
}


class NonLinearLayerError(ValueError):
    """A rule that requires a linear layer received a non-linear one."""


@dataclass
class AttributionMap:
    values: np.ndarray  # signed float32, same shape as the input clip
    target_class: int
    baseline_id: str = "zero"
    sample_id: str = ""

    def positive(self) -> np.ndarray:
        return np.maximum(self.values, 0.0)


def rescale_rule(x_pre: np.ndarray, x0_pre: np.ndarray,
                 relevance_out: np.ndarray) -> np.ndarray:
    """Rescale multiplier for a ReLU: (relu(x)-relu(x0))/(x-x0).

    Where |x - x0| < 1e-7 the multiplier falls back to the local derivative
    (1 if x_pre > 0 else 0).
    """
    delta = x_pre - x0_pre
    dout = np.maximum(x_pre, 0.0) - np.maximum(x0_pre, 0.0)
    local = (x_pre > 0).astype(x_pre.dtype)
    safe = np.where(np.abs(delta) < _DELTA_TOL, 1.0, delta)
    m = np.where(np.abs(delta) < _DELTA_TOL, local, dout / safe)
    return m * relevance_out


class LinearLayer:
    """A linear map exposed as delta-forward and transpose application."""

    def __init__(self, kind: str, forward_delta, transpose):
        if kind not in _LINEAR_KINDS:
            raise NonLinearLayerError(f"layer kind {kind!r} is not linear")
        self.kind = kind
        self.forward_delta = forward_delta
        self.transpose = transpose


def affine_layer(weight: np.ndarray) -> LinearLayer:
    """Bias-free view of an affine layer y = x W^T + b (the bias cancels in
    differences)."""
    w = np.asarray(weight, dtype=np.float64)
    return LinearLayer("affine", lambda dx: dx @ w.T, lambda v: v @ w)


def linear_rule(layer: LinearLayer, dx: np.ndarray,
                relevance_out: np.ndarray) -> np.ndarray:
    """Distribute output relevance onto inputs of a linear layer.

    relevance_in_j = sum_i relevance_out_i * w_ij * dx_j / dy_i; outputs
    with |dy_i| < 1e-7 distribute via the layer's plain gradient instead.
    """
    dy = layer.forward_delta(dx)
    if dy.shape != relevance_out.shape:
        raise ValueError(
            f"relevance shape {relevance_out.shape} != output shape {dy.shape}"
        )
    good = np.abs(dy) >= _DELTA_TOL
    c = np.where(good, relevance_out / np.where(good, dy, 1.0), 0.0)
    plain = np.where(good, 0.0, relevance_out)
    return dx * layer.transpose(c) + layer.transpose(plain)


def _paired_tapes(net: Network, x: np.ndarray, x0: np.ndarray):
    tape1, tape0 = Tape(), Tape()
    xt1, xt0 = Tensor(x), Tensor(x0)
    logits1 = net.forward(xt1, mode="infer", tape=tape1)
    logits0 = net.forward(xt0, mode="infer", tape=tape0)
    if len(tape1) != len(tape0):
        raise RuntimeError("paired forward passes recorded different tapes")
    return tape1, tape0, xt1, logits1, logits0


def deeplift_attribute(net: Network, clip: np.ndarray, target_class: int,
                       baseline: np.ndarray | None = None,
                       sample_id: str = "") -> AttributionMap:
    """Attribute one clip's target logit against a baseline clip.

    The network must be frozen in inference mode (normalization layers then
    act as fixed affine maps). Residual junctions split relevance additively
    between branches.
    """
    clip = np.asarray(clip, dtype=np.float32)
    if clip.shape != net.cfg.input_shape[1:]:
        raise ValueError(
            f"clip shape {clip.shape} != config {net.cfg.input_shape[1:]}"
        )
    if not 0 <= target_class < net.cfg.num_classes:
        raise ValueError(
            f"target_class {target_class} outside [0,{net.cfg.num_classes})"
        )
    baseline_id = "zero"
    if baseline is None:
        x0 = np.zeros_like(clip)
    else:
        x0 = np.asarray(baseline, dtype=np.float32)
        baseline_id = "custom"
        if x0.shape != clip.shape:
            raise ValueError(f"baseline shape {x0.shape} != clip shape {clip.shape}")

    tape1, tape0, xt1, logits1, _ = _paired_tapes(net, clip[None, None],
                                                  x0[None, None])
    seed = np.zeros(logits1.shape, dtype=logits1.dtype)
    seed[0, target_class] = 1.0

    mult: dict[int, np.ndarray] = {id(logits1): seed}
    for rec1, rec0 in zip(reversed(tape1.records), reversed(tape0.records)):
        if rec1.kind != rec0.kind:
            raise RuntimeError("paired tapes diverged; cannot pair layers")
        g = mult.pop(id(rec1.output), None)
        if g is None:
            continue
        if rec1.kind == "relu":
            gi = (rescale_rule(rec1.saved["x"], rec0.saved["x"], g),)
        elif rec1.kind in _LINEAR_KINDS:
            gi = rec1.backward(g)
        else:
            raise NonLinearLayerError(
                f"cannot propagate relevance through {rec1.kind!r}; "
                "run the network in inference mode"
            )
        for node, gnode in zip(rec1.inputs, gi):
            if gnode is None or isinstance(node, Parameter):
                continue
            key = id(node)
            if key in mult:
                mult[key] = mult[key] + gnode
            else:
                mult[key] = gnode

    m_in = mult.get(id(xt1))
    if m_in is None:
        raise RuntimeError("no relevance reached the input clip")
    values = (m_in[0, 0] * (clip - x0)).astype(np.float32)
    return AttributionMap(values, target_class, baseline_id, sample_id)


def completeness_check(net: Network, clip: np.ndarray, amap: AttributionMap,
                       baseline: np.ndarray | None = None) -> tuple[float, float]:
    """(gap, delta): |sum(map) - delta_logit| and the logit difference itself,
    measured by two fresh forward passes."""
    x0 = np.zeros_like(clip) if baseline is None else baseline
    l1 = net.forward(Tensor(np.asarray(clip)[None, None]), mode="infer").data
    l0 = net.forward(Tensor(np.asarray(x0)[None, None]), mode="infer").data
    delta = float(l1[0, amap.target_class] - l0[0, amap.target_class])
    gap = abs(float(amap.values.sum(dtype=np.float64)) - delta)
    return gap, delta


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 image; img must be uint8 (H,W)."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def export_heatmaps(amap: AttributionMap, out_dir) -> list[Path]:
    """Write per-frame grayscale PGMs of the positive relevance plus the raw
    signed map as .ect.

    The positive part is min-max normalized over the whole clip to [0,255].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pos = amap.positive().astype(np.float64)
    lo, hi = pos.min(), pos.max()
    if hi > lo:
        scaled = (pos - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(pos)
    frames = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    paths = []
    for k in range(frames.shape[0]):
        p = out / f"frame_{k:02d}.pgm"
        write_pgm(p, frames[k])
        paths.append(p)
    write_ect(out / "map.ect", amap.values)
    paths.append(out / "map.ect")
    return paths
