"""Dense tensors with reverse-mode automatic differentiation.

Layout convention is N,C,T,H,W row-major throughout. Storage is float32 by
default; every op allocates in the dtype of its input, so a float64 copy of
a network runs end to end in float64 (used by gradient checking).

A :class:`Tape` records the forward pass at layer granularity. Each record
keeps references to its input nodes (Tensors or Parameters), its output
Tensor, and a backward callable. ``Tape.backward`` runs one reverse sweep,
accumulating into ``Parameter.grad`` additively and returning gradients for
explicitly watched leaf tensors.
"""

from __future__ import annotations

import numpy as np

from echodx import _kernels

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "BatchNorm",
    "Conv2Plus1dBlock",
    "Tape",
    "conv_spatial",
    "conv_temporal",
    "conv2plus1d_forward",
    "relu_forward",
    "batchnorm_forward",
    "affine_forward",
    "global_avg_pool",
    "add",
    "softmax_cross_entropy",
    "softmax",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class Tensor:
    """Dense row-major N-d array, rank 1..5, float32 unless told otherwise."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 5:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 5")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


class Parameter:
    """A named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def cast(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = Tensor(np.zeros(self.value.shape, dtype=dtype))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def _val(x) -> np.ndarray:
    if isinstance(x, Parameter):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward", "saved")

    def __init__(self, kind, inputs, output, backward, saved=None):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.saved = saved or {}


class Tape:
    """Ordered record of executed ops; supports one reverse sweep."""

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: list[Tensor] = []
        self._consumed = False

    def append(self, kind, inputs, output, backward, saved=None) -> None:
        self._records.append(_Record(kind, tuple(inputs), output, backward, saved))

    def watch(self, tensor: Tensor) -> Tensor:
        """Mark a non-parameter leaf whose gradient should be retained."""
        self._watched.append(tensor)
        return tensor

    @property
    def records(self):
        return self._records

    def __len__(self):
        return len(self._records)

    def backward(self, output: Tensor, seed=None) -> "LeafGrads":
        """Reverse sweep from ``output``; fills Parameter.grad additively.

        ``seed`` defaults to ones (the usual choice for a scalar loss).
        Returns gradients for watched leaves.
        """
        if not self._records:
            raise RuntimeError("backward sweep without a recorded forward pass")
        if self._consumed:
            raise RuntimeError("tape already swept; record a fresh forward pass")
        self._consumed = True

        out = _val(output)
        if seed is None:
            g0 = np.ones_like(out)
        else:
            g0 = np.asarray(seed, dtype=out.dtype)
            if g0.shape != out.shape:
                raise ShapeError(f"seed shape {g0.shape} != output shape {out.shape}")
        produced = {id(r.output) for r in self._records}
        if id(output) not in produced:
            raise RuntimeError("backward target was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(output): g0}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                if isinstance(node, Parameter):
                    node.grad.data += gi.astype(node.grad.data.dtype, copy=False)
                else:
                    key = id(node)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        return LeafGrads({id(t): grads.get(id(t)) for t in self._watched})


class LeafGrads:
    """Gradients of watched leaf tensors, keyed by tensor identity."""

    def __init__(self, table):
        self._table = table

    def of(self, tensor: Tensor) -> np.ndarray | None:
        return self._table.get(id(tensor))


# ---------------------------------------------------------------------------
# convolution arithmetic (inner loops live in echodx._kernels)

def _out_extent(n: int, k: int, stride: int) -> int:
    p = (k - 1) // 2
    out = (n + 2 * p - k) // stride + 1
    if out < 1:
        raise ShapeError(f"extent {n} too small for kernel {k} at stride {stride}")
    return out


def _conv_spatial_fwd(x, w, stride):
    sh, sw = stride
    ho = _out_extent(x.shape[3], w.shape[2], sh)
    wo = _out_extent(x.shape[4], w.shape[3], sw)
    return _kernels.spatial_fwd(x, w, sh, sw, ho, wo)


def _conv_spatial_bwd(x, w, stride, gy):
    sh, sw = stride
    gy = np.ascontiguousarray(gy)
    gx = _kernels.spatial_bwd_x(gy, w, sh, sw, x.shape[3], x.shape[4])
    gw = _kernels.spatial_bwd_w(x, gy, sh, sw, w.shape[2], w.shape[3])
    return gx, gw


def _conv_temporal_fwd(x, w, stride):
    n, c, t, h, wd = x.shape
    to = _out_extent(t, w.shape[2], stride)
    y = _kernels.temporal_fwd(x.reshape(n, c, t, h * wd), w, stride, to)
    return y.reshape(n, w.shape[0], to, h, wd)


def _conv_temporal_bwd(x, w, stride, gy):
    n, c, t, h, wd = x.shape
    x4 = x.reshape(n, c, t, h * wd)
    gy = np.ascontiguousarray(gy)
    gy4 = gy.reshape(gy.shape[0], gy.shape[1], gy.shape[2], h * wd)
    gx = _kernels.temporal_bwd_x(gy4, w, stride, t).reshape(n, c, t, h, wd)
    gw = _kernels.temporal_bwd_w(x4, gy4, stride, w.shape[2])
    return gx, gw


# ---------------------------------------------------------------------------
# public ops

def conv_spatial(x, weight, stride=(1, 1), tape=None) -> Tensor:
    """1xdxd convolution over H,W with zero 'same' padding.

    weight: (Cout, Cin, kh, kw) with odd kh, kw.
    """
    xv, wv = _val(x), _val(weight)
    if xv.ndim != 5:
        raise ShapeError(f"expected rank-5 N,C,T,H,W input, got {xv.shape}")
    if wv.shape[2] % 2 == 0 or wv.shape[3] % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {wv.shape[2:]}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"input has {xv.shape[1]} channels but kernel expects {wv.shape[1]}"
        )
    y = Tensor(_conv_spatial_fwd(xv, wv, stride))
    if tape is not None:
        def bwd(g, _x=xv, _w=wv, _s=stride):
            return _conv_spatial_bwd(_x, _w, _s, g)
        tape.append("conv_spatial", (x, weight), y, bwd)
    return y


def conv_temporal(x, weight, stride=1, tape=None) -> Tensor:
    """tx1x1 convolution over T with zero 'same' padding.

    weight: (Cout, Cin, kt) with odd kt.
    """
    xv, wv = _val(x), _val(weight)
    if xv.ndim != 5:
        raise ShapeError(f"expected rank-5 N,C,T,H,W input, got {xv.shape}")
    if wv.shape[2] % 2 == 0:
        raise ShapeError(f"temporal kernel must be odd, got {wv.shape[2]}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"input has {xv.shape[1]} channels but kernel expects {wv.shape[1]}"
        )
    y = Tensor(_conv_temporal_fwd(xv, wv, stride))
    if tape is not None:
        def bwd(g, _x=xv, _w=wv, _s=stride):
            return _conv_temporal_bwd(_x, _w, _s, g)
        tape.append("conv_temporal", (x, weight), y, bwd)
    return y


def relu_forward(x, tape=None) -> Tensor:
    """Elementwise max(0, x); derivative at exactly 0 is defined as 0."""
    xv = _val(x)
    y = Tensor(_kernels.relu_fwd(xv))
    if tape is not None:
        def bwd(g, _x=xv):
            return (_kernels.relu_bwd(_x, np.ascontiguousarray(g)),)
        tape.append("relu", (x,), y, bwd, saved={"x": xv})
    return y


class BatchNorm:
    """Per-channel batch normalization state for N,C,T,H,W tensors."""

    def __init__(self, gamma: Parameter, beta: Parameter, running_mean: Tensor,
                 running_var: Tensor, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x, bn: BatchNorm, mode: str = "train", tape=None) -> Tensor:
    """Normalize per channel over N,T,H,W then scale/shift.

    train: batch statistics (biased variance), running stats updated with
    momentum 0.1. infer: running statistics, an exact per-channel affine map.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    xv = _val(x)
    if xv.ndim != 5:
        raise ShapeError(f"expected rank-5 N,C,T,H,W input, got {xv.shape}")
    c = xv.shape[1]
    if bn.channels != c:
        raise ShapeError(f"input has {c} channels but norm has {bn.channels}")
    gamma, beta = _val(bn.gamma), _val(bn.beta)
    axes = (0, 2, 3, 4)
    shape = (1, c, 1, 1, 1)

    if mode == "train":
        out, mu, var = _kernels.bn_train_fwd(xv, gamma, beta, bn.eps)
        y = Tensor(out)
        m = bn.momentum
        bn.running_mean.data[...] = (1 - m) * bn.running_mean.data + m * mu
        bn.running_var.data[...] = (1 - m) * bn.running_var.data + m * var
        if tape is not None:
            def bwd(g, _x=xv, _mu=mu, _var=var, _gamma=gamma, _eps=bn.eps):
                gx, dgamma, dbeta = _kernels.bn_train_bwd(
                    _x, np.ascontiguousarray(g), _mu, _var, _gamma, _eps
                )
                return gx, dgamma, dbeta
            tape.append("batchnorm_train", (x, bn.gamma, bn.beta), y, bwd)
        return y

    rm, rv = bn.running_mean.data, bn.running_var.data
    inv = (1.0 / np.sqrt(rv + bn.eps)).astype(xv.dtype)
    scale = (gamma * inv).reshape(shape)
    shift = (beta - gamma * rm.astype(xv.dtype) * inv).reshape(shape)
    y = Tensor(scale * xv + shift)
    if tape is not None:
        def bwd(g, _x=xv, _scale=scale, _rm=rm, _inv=inv):
            gx = g * _scale
            dgamma = (g * (_x - _rm.astype(_x.dtype).reshape(shape)) *
                      _inv.reshape(shape)).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return gx, dgamma, dbeta
        tape.append("batchnorm_infer", (x, bn.gamma, bn.beta), y, bwd)
    return y


def affine_forward(x, weight, bias, tape=None) -> Tensor:
    """y = x @ W.T + b for x (N,D), W (K,D), b (K)."""
    xv, wv, bv = _val(x), _val(weight), _val(bias)
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
        raise ShapeError(
            f"affine expects x (N,D), W (K,D), b (K); got {xv.shape}, {wv.shape}, {bv.shape}"
        )
    if xv.shape[1] != wv.shape[1] or wv.shape[0] != bv.shape[0]:
        raise ShapeError(
            f"dimension mismatch: x {xv.shape}, W {wv.shape}, b {bv.shape}"
        )
    y = Tensor(xv @ wv.T + bv)
    if tape is not None:
        def bwd(g, _x=xv, _w=wv):
            return g @ _w, g.T @ _x, g.sum(axis=0)
        tape.append("affine", (x, weight, bias), y, bwd)
    return y


def global_avg_pool(x, tape=None) -> Tensor:
    """Mean over T,H,W per sample and channel: (N,C,T,H,W) -> (N,C)."""
    xv = _val(x)
    if xv.ndim != 5:
        raise ShapeError(f"expected rank-5 N,C,T,H,W input, got {xv.shape}")
    y = Tensor(xv.mean(axis=(2, 3, 4)))
    if tape is not None:
        n, c, t, h, w = xv.shape
        count = t * h * w

        def bwd(g):
            return (np.broadcast_to(
                g[:, :, None, None, None] / count, (n, c, t, h, w)
            ).astype(g.dtype),)
        tape.append("global_avg_pool", (x,), y, bwd)
    return y


def add(a, b, tape=None) -> Tensor:
    """Elementwise sum of same-shape tensors (residual junctions)."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    y = Tensor(av + bv)
    if tape is not None:
        tape.append("add", (a, b), y, lambda g: (g, g))
    return y


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, tape=None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp.

    Backward produces (softmax - one_hot) / N.
    """
    lv = _val(logits)
    lab = np.asarray(labels)
    if lv.ndim != 2:
        raise ShapeError(f"logits must be (N,K), got {lv.shape}")
    n, k = lv.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {lab.min()}..{lab.max()}")
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), lab] - lse
    loss = Tensor(np.asarray(-logp.mean(), dtype=lv.dtype))
    if tape is not None:
        def bwd(g, _lv=lv, _lab=lab):
            p = softmax(_lv)
            p[np.arange(n), _lab] -= 1.0
            return (p * (g.reshape(()) if g.ndim == 0 else g[0]) / n, None)
        tape.append("softmax_xent", (logits, labels), loss, bwd)
    return loss


class Conv2Plus1dBlock:
    """Factorized (2+1)D convolution: spatial 1xdxd, then norm and activation
    on the midplane, then temporal tx1x1.
    """

    def __init__(self, spatial_w: Parameter, temporal_w: Parameter,
                 norm: BatchNorm | None, activation: str = "relu",
                 stride=(1, 1, 1)):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.spatial_w = spatial_w
        self.temporal_w = temporal_w
        self.norm = norm
        self.activation = activation
        self.stride = stride

    @property
    def in_channels(self) -> int:
        return self.spatial_w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.temporal_w.shape[0]


def conv2plus1d_forward(x, block: Conv2Plus1dBlock, mode: str = "train",
                        tape=None) -> Tensor:
    """temporal-conv(activation(norm(spatial-conv(x)))) with 'same' padding."""
    xv = _val(x)
    if xv.ndim != 5:
        raise ShapeError(f"expected rank-5 N,C,T,H,W input, got {xv.shape}")
    if xv.shape[1] != block.in_channels:
        raise ShapeError(
            f"input has {xv.shape[1]} channels but block expects {block.in_channels}"
        )
    st, sh, sw = block.stride
    h = conv_spatial(x, block.spatial_w, (sh, sw), tape)
    if block.norm is not None:
        h = batchnorm_forward(h, block.norm, mode, tape)
    if block.activation == "relu":
        h = relu_forward(h, tape)
    return conv_temporal(h, block.temporal_w, st, tape)


def midplane_channels(t: int, d: int, cin: int, cout: int) -> int:
    """Midplane width that matches the txdxd full 3D conv parameter count."""
    return int(round(t * d * d * cin * cout / (d * d * cin + t * cout)))
