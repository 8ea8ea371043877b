"""Flat key=value run configuration with defaults for every field.

Unknown keys are rejected (a usage error at the CLI). Values are parsed by
the declared type of each field; tuples are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class UsageError(ValueError):
    """Bad configuration or command line; maps to exit code 2."""


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "on", "yes"):
        return True
    if s.lower() in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def _parse_tuple(s: str, conv):
    return tuple(conv(v) for v in s.split(",") if v != "")


@dataclass
class RunConfig:
    seed: int = 7
    out: str = "out"

    # network
    preset: str = "desk"  # desk | full
    stage_channels: tuple = ()        # empty = take from preset
    blocks_per_stage: tuple = ()
    stem_mid: int = 0                 # 0 = take from preset
    num_classes: int = 3

    # phantom
    per_class: int = 60
    phantom_task: str = "lv"
    noise_sigma: float = 8.0
    rest_radius: float = 28.0
    thickness: float = 5.0
    amplitudes: tuple = (0.35, 0.20, 0.08)
    flutters: tuple = (30.0, 15.0, 5.0)

    # preprocessing
    hist_match: bool = True
    sector: bool = False
    apex_row: float = 0.0
    apex_col: float = 56.0
    sector_radius: float = 110.0
    half_angle: float = 45.0
    max_shift: float = 8.0
    max_rotate: float = 10.0

    # training
    lr: float = 0.001
    batch_size: int = 16
    patience: int = 50
    max_epochs: int = 500

    # tSNE
    perplexity: float = 30.0
    tsne_iters: int = 1000
    tsne_lr: float = 200.0
    embed_source: str = "features"  # features | pixels
    embed_subset: str = "all"       # all | train | val | test

    # attribution
    attr_class: int = 0
    baseline: str = "zero"

    # reporting
    figures: bool = True

    def geometry(self):
        from echodx.preprocess import SectorGeometry
        if not self.sector:
            return None
        return SectorGeometry((self.apex_row, self.apex_col),
                              self.sector_radius, self.half_angle)

    def network_config(self, frames: int = 30, height: int = 112,
                       width: int = 112):
        from echodx.network import NetworkConfig, desk_config
        if self.preset not in ("desk", "full"):
            raise UsageError(f"unknown preset {self.preset!r}")
        if self.preset == "desk":
            base = desk_config(num_classes=self.num_classes, frames=frames,
                               height=height, width=width)
        else:
            base = NetworkConfig(num_classes=self.num_classes, frames=frames,
                                 height=height, width=width)
        kv = dict(stage_channels=base.stage_channels,
                  blocks_per_stage=base.blocks_per_stage,
                  stem_mid=base.stem_mid, num_classes=base.num_classes,
                  in_channels=1, frames=frames, height=height, width=width)
        if self.stage_channels:
            kv["stage_channels"] = self.stage_channels
        if self.blocks_per_stage:
            kv["blocks_per_stage"] = self.blocks_per_stage
        if self.stem_mid:
            kv["stem_mid"] = self.stem_mid
        return NetworkConfig(**kv)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(name: str, raw: str):
    f = _FIELDS[name]
    default = getattr(_DEFAULTS, name)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        conv = float if name in ("amplitudes", "flutters") else int
        return _parse_tuple(raw, conv)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in _FIELDS:
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        try:
            setattr(cfg, key, _convert(key, value))
        except UsageError:
            raise
        except ValueError as exc:
            raise UsageError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base)
