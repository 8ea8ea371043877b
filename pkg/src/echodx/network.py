"""Factorized (2+1)D residual classifier.

Architecture: a stem (spatial 1x7x7 stride (1,2,2), then temporal 3x1x1),
four residual stages of factorized blocks, global average pooling (the
feature tap), and an affine classification head. All downsampling is via
strided convolutions; stages 2..4 halve T, H and W in their first block.

With the default config the grid schedule from 1x30x112x112 is:
stem (30,56,56) -> stage1 (30,56,56) -> stage2 (15,28,28)
-> stage3 (8,14,14) -> stage4 (4,7,7) -> pooled feature vector of width 512.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from echodx.autodiff import (
    BatchNorm,
    Conv2Plus1dBlock,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    _val,
    add,
    affine_forward,
    batchnorm_forward,
    conv2plus1d_forward,
    conv_spatial,
    global_avg_pool,
    midplane_channels,
    relu_forward,
)

CHECKPOINT_MAGIC = b"R21D"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid network configuration."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    stem_mid: int = 45
    num_classes: int = 3
    in_channels: int = 1
    frames: int = 30
    height: int = 112
    width: int = 112

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.validate()

    def validate(self) -> None:
        if not self.stage_channels or not self.blocks_per_stage:
            raise ConfigError("stage_channels and blocks_per_stage must be non-empty")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError("stage_channels and blocks_per_stage lengths differ")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"zero-channel stage in {self.stage_channels}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"empty stage in {self.blocks_per_stage}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem_mid < 1:
            raise ConfigError(f"stem_mid must be >= 1, got {self.stem_mid}")
        for name in ("in_channels", "frames", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.in_channels, self.frames, self.height, self.width)

    def to_text(self) -> str:
        lines = [
            f"stage_channels={','.join(map(str, self.stage_channels))}",
            f"blocks_per_stage={','.join(map(str, self.blocks_per_stage))}",
            f"stem_mid={self.stem_mid}",
            f"num_classes={self.num_classes}",
            f"in_channels={self.in_channels}",
            f"frames={self.frames}",
            f"height={self.height}",
            f"width={self.width}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key] = value
        try:
            return cls(
                stage_channels=tuple(int(v) for v in kv["stage_channels"].split(",")),
                blocks_per_stage=tuple(int(v) for v in kv["blocks_per_stage"].split(",")),
                stem_mid=int(kv["stem_mid"]),
                num_classes=int(kv["num_classes"]),
                in_channels=int(kv["in_channels"]),
                frames=int(kv["frames"]),
                height=int(kv["height"]),
                width=int(kv["width"]),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from None


def desk_config(**overrides) -> NetworkConfig:
    """Small config for desk-scale runs: 8-channel stages, one block each."""
    kv = dict(stage_channels=(8, 8, 8, 8), blocks_per_stage=(1, 1, 1, 1),
              stem_mid=12)
    kv.update(overrides)
    return NetworkConfig(**kv)


def grid_schedule(cfg: NetworkConfig) -> list[tuple[int, int, int]]:
    """(T,H,W) after the stem and after each stage, per the stride rules."""
    def down(n):
        return (n - 1) // 2 + 1

    t, h, w = cfg.frames, down(cfg.height), down(cfg.width)
    grids = [(t, h, w)]
    for i in range(len(cfg.stage_channels)):
        if i > 0:
            t, h, w = down(t), down(h), down(w)
        grids.append((t, h, w))
    return grids


# ---------------------------------------------------------------------------
# layers

class _BasicBlock:
    def __init__(self, conv1, bn1, conv2, bn2, down_w=None, down_bn=None,
                 stride=(1, 1, 1)):
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.down_w = down_w
        self.down_bn = down_bn
        self.stride = stride

    def forward(self, x, mode, tape):
        h = conv2plus1d_forward(x, self.conv1, mode, tape)
        h = batchnorm_forward(h, self.bn1, mode, tape)
        h = relu_forward(h, tape)
        h = conv2plus1d_forward(h, self.conv2, mode, tape)
        h = batchnorm_forward(h, self.bn2, mode, tape)
        if self.down_w is None:
            sc = x
        else:
            st, sh, sw = self.stride
            sc = conv_spatial(x, self.down_w, (sh, sw), tape)
            sc = temporal_subsample(sc, st, tape)
            sc = batchnorm_forward(sc, self.down_bn, mode, tape)
        return relu_forward(add(h, sc, tape), tape)


def temporal_subsample(x, stride: int, tape=None) -> Tensor:
    """Keep every stride-th frame; the temporal half of a strided 1x1x1 conv."""
    xv = _val(x)
    if stride == 1:
        return x if isinstance(x, Tensor) else Tensor(xv)
    y = Tensor(np.ascontiguousarray(xv[:, :, ::stride]))
    if tape is not None:
        def bwd(g, _shape=xv.shape, _s=stride):
            gx = np.zeros(_shape, dtype=g.dtype)
            gx[:, :, ::_s] = g
            return (gx,)
        tape.append("temporal_subsample", (x,), y, bwd)
    return y


class Network:
    """Built classifier: named parameters, named buffers, layer structure."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, Tensor] = {}
        self._entry_order: list[str] = []
        self.stem = None
        self.stages: list[list[_BasicBlock]] = []
        self.head_w: Parameter | None = None
        self.head_b: Parameter | None = None

    # registry -------------------------------------------------------------
    def _add_param(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(Tensor(value), name)
        self.params[name] = p
        self._entry_order.append(name)
        return p

    def _add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        t = Tensor(value)
        self.buffers[name] = t
        self._entry_order.append(name)
        return t

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self._entry_order:
            if name in self.params:
                out.append((name, self.params[name].value.data))
            else:
                out.append((name, self.buffers[name].data))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name in self._entry_order:
            target = (self.params[name].value.data if name in self.params
                      else self.buffers[name].data)
            target[...] = snap[name]

    def cast(self, dtype) -> "Network":
        for p in self.params.values():
            p.cast(dtype)
        for t in self.buffers.values():
            t.data = t.data.astype(dtype)
        return self

    def copy(self) -> "Network":
        dup = build_network(self.cfg, seed=0)
        if self.parameters()[0].value.dtype != np.float32:
            dup.cast(self.parameters()[0].value.dtype)
        dup.restore({k: v for k, v in self.state_items()})
        return dup

    # forward ----------------------------------------------------------------
    def _check_input(self, x) -> np.ndarray:
        xv = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xv.ndim != 5 or xv.shape[1:] != self.cfg.input_shape:
            raise ShapeError(
                f"input shape {xv.shape} does not match config "
                f"(N,{','.join(map(str, self.cfg.input_shape))})"
            )
        return xv

    def features(self, x, mode: str = "infer", tape: Tape | None = None) -> Tensor:
        self._check_input(x)
        h = x if isinstance(x, Tensor) else Tensor(x)
        h = conv2plus1d_forward(h, self.stem["block"], mode, tape)
        h = batchnorm_forward(h, self.stem["bn_out"], mode, tape)
        h = relu_forward(h, tape)
        for blocks in self.stages:
            for blk in blocks:
                h = blk.forward(h, mode, tape)
        return global_avg_pool(h, tape)

    def forward(self, x, mode: str = "infer", tape: Tape | None = None) -> Tensor:
        feats = self.features(x, mode, tape)
        return affine_forward(feats, self.head_w, self.head_b, tape)


def forward_logits(net: Network, batch, mode: str = "infer",
                   tape: Tape | None = None) -> Tensor:
    return net.forward(batch, mode, tape)


def extract_features(net: Network, batch, mode: str = "infer") -> Tensor:
    return net.features(batch, mode)


# ---------------------------------------------------------------------------
# builder

def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def build_network(cfg: NetworkConfig, seed: int) -> Network:
    """Construct the classifier with He fan-in init from a seeded PRNG."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    net = Network(cfg)

    def make_bn(prefix: str, channels: int) -> BatchNorm:
        gamma = net._add_param(f"{prefix}.gamma", np.ones(channels, np.float32))
        beta = net._add_param(f"{prefix}.beta", np.zeros(channels, np.float32))
        rm = net._add_buffer(f"{prefix}.running_mean", np.zeros(channels, np.float32))
        rv = net._add_buffer(f"{prefix}.running_var", np.ones(channels, np.float32))
        return BatchNorm(gamma, beta, rm, rv)

    def make_block(prefix, cin, mid, cout, kt, kd, stride, activation="relu",
                   with_norm=True) -> Conv2Plus1dBlock:
        ws = net._add_param(
            f"{prefix}.spatial.weight",
            _he_init(rng, (mid, cin, kd, kd), cin * kd * kd),
        )
        norm = make_bn(f"{prefix}.bn_mid", mid) if with_norm else None
        wt = net._add_param(
            f"{prefix}.temporal.weight",
            _he_init(rng, (cout, mid, kt), mid * kt),
        )
        return Conv2Plus1dBlock(ws, wt, norm, activation, stride)

    # stem: spatial 1x7x7 stride (1,2,2), temporal 3x1x1
    c0 = cfg.stage_channels[0]
    stem_block = make_block("stem", cfg.in_channels, cfg.stem_mid, c0,
                            kt=3, kd=7, stride=(1, 2, 2))
    net.stem = {"block": stem_block, "bn_out": make_bn("stem.bn_out", c0)}

    cin = c0
    for si, (cout, nblocks) in enumerate(
            zip(cfg.stage_channels, cfg.blocks_per_stage), start=1):
        blocks = []
        for bi in range(nblocks):
            stride = (2, 2, 2) if (si > 1 and bi == 0) else (1, 1, 1)
            prefix = f"stage{si}.block{bi}"
            m1 = midplane_channels(3, 3, cin, cout)
            m2 = midplane_channels(3, 3, cout, cout)
            conv1 = make_block(f"{prefix}.conv1", cin, m1, cout, 3, 3, stride)
            bn1 = make_bn(f"{prefix}.bn1", cout)
            conv2 = make_block(f"{prefix}.conv2", cout, m2, cout, 3, 3, (1, 1, 1))
            bn2 = make_bn(f"{prefix}.bn2", cout)
            if stride != (1, 1, 1) or cin != cout:
                dw = net._add_param(
                    f"{prefix}.down.weight",
                    _he_init(rng, (cout, cin, 1, 1), cin),
                )
                dbn = make_bn(f"{prefix}.down.bn", cout)
            else:
                dw = dbn = None
            blocks.append(_BasicBlock(conv1, bn1, conv2, bn2, dw, dbn, stride))
            cin = cout
        net.stages.append(blocks)

    d = cfg.feature_dim
    net.head_w = net._add_param("head.weight",
                                _he_init(rng, (cfg.num_classes, d), d))
    net.head_b = net._add_param("head.bias",
                                np.zeros(cfg.num_classes, np.float32))
    return net


# ---------------------------------------------------------------------------
# checkpoint I/O

def checkpoint_save(net: Network, path) -> None:
    """Serialize config echo plus all named tensors in canonical order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = net.cfg.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    items = net.state_items()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        a = np.ascontiguousarray(arr, dtype=np.float32)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated at byte {self.pos} (needed {n} more)"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_load(path) -> Network:
    """Rebuild a network from a checkpoint, validating structure throughout."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = NetworkConfig.from_text(r.take(r.u32()).decode("utf-8"))
    net = build_network(cfg, seed=0)
    expected = dict(net.state_items())
    n_entries = r.u32()
    if n_entries != len(expected):
        raise CheckpointShapeError(
            f"{path}: {n_entries} tensors but config implies {len(expected)}"
        )
    for _ in range(n_entries):
        name = r.take(r.u16()).decode("utf-8")
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        target = expected[name]
        if shape != target.shape:
            raise CheckpointShapeError(
                f"{path}: {name} has shape {shape}, config implies {target.shape}"
            )
        payload = r.take(4 * int(np.prod(shape)))
        target[...] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return net
