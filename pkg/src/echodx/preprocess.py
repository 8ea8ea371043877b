"""Deterministic cine-loop preprocessing and train-time augmentation.

The pipeline turns a raw loop into a normalized 30x112x112 clip in [0,1]:
sector overlay masking, temporal resampling of one cardiac cycle to 30
frames, histogram matching against a pooled reference, center crop plus
bilinear downsampling (skipped for inputs already at target size), and, in
train mode only, a circular clip-start roll plus one translation/rotation
warp. Everything is pure given the per-sample PRNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TARGET_FRAMES = 30
TARGET_SIZE = 112
CROP_SIZE = 549


@dataclass
class CineLoop:
    """A single-channel video with cardiac-cycle metadata, values in [0,255]."""

    frames: np.ndarray  # (T,H,W) float32
    cycle_start: int
    cycle_len: int
    sample_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T,H,W), got {self.frames.shape}")
        t = self.frames.shape[0]
        if not 0 <= self.cycle_start < t:
            raise ValueError(f"cycle_start {self.cycle_start} outside [0,{t})")
        if self.cycle_len < 2:
            raise ValueError(f"cycle_len must be >= 2, got {self.cycle_len}")
        if self.cycle_start + self.cycle_len > t:
            raise ValueError(
                f"cycle [{self.cycle_start},{self.cycle_start + self.cycle_len}) "
                f"exceeds {t} frames"
            )


@dataclass
class SectorGeometry:
    """Fan-shaped field of view: apex, radius, half-angle off the downward axis."""

    apex: tuple[float, float]  # (row, col)
    radius: float
    half_angle: float  # degrees

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 < self.half_angle < 90:
            raise ValueError(f"half_angle must be in (0,90), got {self.half_angle}")


def sector_mask(geom: SectorGeometry, height: int, width: int) -> np.ndarray:
    """Boolean (H,W) mask of pixels inside the sector."""
    ar, ac = geom.apex
    if not (0 <= ar < height and 0 <= ac < width):
        raise ValueError(f"apex {geom.apex} outside {height}x{width} frame")
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dr = rr - ar
    dc = cc - ac
    dist = np.hypot(dr, dc)
    # angle measured from the downward vertical axis (+row direction)
    ang = np.degrees(np.arctan2(np.abs(dc), dr))
    return (dist <= geom.radius) & (ang <= geom.half_angle)


def mask_overlay(clip: CineLoop, geom: SectorGeometry,
                 remove_static_bright: bool = True) -> CineLoop:
    """Zero pixels outside the sector; optionally also zero static bright
    overlays inside it (temporal variance < 1e-6 and mean > 200)."""
    t, h, w = clip.frames.shape
    keep = sector_mask(geom, h, w)
    if remove_static_bright:
        var = clip.frames.var(axis=0)
        mean = clip.frames.mean(axis=0)
        keep = keep & ~((var < 1e-6) & (mean > 200))
    out = clip.frames * keep.astype(np.float32)
    return CineLoop(out, clip.cycle_start, clip.cycle_len, clip.sample_id)


def resample_cycle(clip: CineLoop, target: int = TARGET_FRAMES) -> np.ndarray:
    """Resample one cardiac cycle to ``target`` frames by linear interpolation.

    Output frame k samples source time cycle_start + k*cycle_len/target;
    indexing wraps modulo the cycle, so the last output frames blend back
    toward the cycle start (the cycle is treated as periodic).
    """
    if clip.cycle_len < 2:
        raise ValueError(f"cycle_len must be >= 2, got {clip.cycle_len}")
    k = np.arange(target)
    pos = k * (clip.cycle_len / target)
    i0 = np.floor(pos).astype(np.int64)
    frac = (pos - i0).astype(np.float32)
    j0 = clip.cycle_start + (i0 % clip.cycle_len)
    j1 = clip.cycle_start + ((i0 + 1) % clip.cycle_len)
    f = clip.frames
    out = (1.0 - frac)[:, None, None] * f[j0] + frac[:, None, None] * f[j1]
    return out.astype(np.float32)


def sample_clip_start(mode: str, rng: np.random.Generator | None = None,
                      frames: int = TARGET_FRAMES) -> int:
    """Train: uniform start offset in [0,frames); eval: always 0."""
    if mode == "eval":
        return 0
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng")
        return int(rng.integers(0, frames))
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def roll_clip(clip: np.ndarray, start: int) -> np.ndarray:
    """Circularly shift frames so the clip begins at ``start``."""
    return np.roll(clip, -start, axis=0)


class ReferenceHistogram:
    """256-bin intensity counts pooled over a clip set, with its CDF."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (256,):
            raise ValueError(f"expected 256 bins, got {counts.shape}")
        if counts.min() < 0 or counts.sum() <= 0:
            raise ValueError("counts must be non-negative with positive total")
        self.counts = counts

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.counts, dtype=np.float64)
        return c / c[-1]

    @classmethod
    def from_clips(cls, clips, masks=None) -> "ReferenceHistogram":
        total = np.zeros(256, dtype=np.int64)
        for i, clip in enumerate(clips):
            mask = None if masks is None else masks[i]
            total += clip_histogram(clip, mask)
        return cls(total)

    def save(self, path) -> None:
        lines = ["# level\tcount"]
        lines += [f"{i}\t{int(c)}" for i, c in enumerate(self.counts)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceHistogram":
        counts = np.zeros(256, dtype=np.int64)
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                level, count = line.split("\t")
                counts[int(level)] = int(count)
        return cls(counts)


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.int64)


def clip_histogram(clip: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """256-bin counts of a clip's [0,255] intensities (rounded to levels)."""
    levels = _quantize(clip)
    if mask is not None:
        levels = levels[np.broadcast_to(mask, levels.shape)]
    return np.bincount(levels.ravel(), minlength=256)


def histogram_match(clip: np.ndarray, ref: ReferenceHistogram,
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Map clip levels so the intensity CDF follows the reference.

    The monotone level map is m(v) = min{u : G(u) >= F(v)} with F the clip's
    own 256-bin CDF. When ``mask`` is given, F is computed from in-mask
    pixels only (so overlay zeros do not skew it); the map is still applied
    to every pixel.
    """
    if clip.size == 0:
        raise ValueError("empty clip")
    levels = _quantize(clip)
    counts = clip_histogram(clip, mask)
    if counts.sum() == 0:
        raise ValueError("mask excludes every pixel")
    f = np.cumsum(counts, dtype=np.float64)
    f /= f[-1]
    g = ref.cdf
    level_map = np.searchsorted(g, f, side="left").astype(np.int64)
    return level_map[levels].astype(np.float32)


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of (H,W) or (T,H,W) arrays."""
    single = frames.ndim == 2
    stack = frames[None] if single else frames
    t, h, w = stack.shape
    sy, sx = h / out_h, w / out_w
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    tl = stack[:, y0c[:, None], x0c[None, :]]
    tr = stack[:, y0c[:, None], x1c[None, :]]
    bl = stack[:, y1c[:, None], x0c[None, :]]
    br = stack[:, y1c[:, None], x1c[None, :]]
    top = tl + (tr - tl) * fx[None, None, :]
    bot = bl + (br - bl) * fx[None, None, :]
    out = (top + (bot - top) * fy[None, :, None]).astype(np.float32)
    return out[0] if single else out


def crop_and_downsample(frames: np.ndarray, crop: int = CROP_SIZE,
                        out_size: int = TARGET_SIZE) -> np.ndarray:
    """Center-crop ``crop`` pixels then resize to ``out_size``, scaled to [0,1].

    Crop origin is (floor((H-crop)/2), floor((W-crop)/2)): (79,233) for a
    708x1016 frame.
    """
    single = frames.ndim == 2
    stack = frames[None] if single else frames
    h, w = stack.shape[1:]
    if h < crop or w < crop:
        raise ValueError(f"input {h}x{w} smaller than {crop}x{crop} crop window")
    r0, c0 = (h - crop) // 2, (w - crop) // 2
    cropped = stack[:, r0:r0 + crop, c0:c0 + crop]
    out = bilinear_resize(cropped, out_size, out_size) / np.float32(255.0)
    return out[0] if single else out


def crop_origin(height: int, width: int, crop: int = CROP_SIZE) -> tuple[int, int]:
    return (height - crop) // 2, (width - crop) // 2


def warp_frames(frames: np.ndarray, shift: tuple[float, float],
                angle_deg: float) -> np.ndarray:
    """Rotate about the image center then translate, identically per frame.

    Bilinear sampling with zero fill outside the source. Integer shifts with
    zero angle reproduce exact pixel shifts.
    """
    t, h, w = frames.shape
    dr, dc = shift
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    yr = rr - cy - dr
    xc = cc - cx - dc
    sy = c * yr + s * xc + cy
    sx = -s * yr + c * xc + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    tl = frames[:, y0c, x0c]
    tr = frames[:, y0c, x1c]
    bl = frames[:, y1c, x0c]
    br = frames[:, y1c, x1c]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    out = top + (bot - top) * fy
    out *= valid.astype(np.float32)
    return out.astype(np.float32)


def augment(clip: np.ndarray, rng: np.random.Generator,
            max_shift: float = 8.0, max_rotate: float = 10.0) -> np.ndarray:
    """One random translation and rotation applied to all frames identically."""
    dr, dc = rng.uniform(-max_shift, max_shift, size=2)
    angle = rng.uniform(-max_rotate, max_rotate)
    return warp_frames(clip, (dr, dc), angle)


def preprocess_clip(loop: CineLoop, ref: ReferenceHistogram | None = None,
                    geom: SectorGeometry | None = None, mode: str = "eval",
                    rng: np.random.Generator | None = None,
                    max_shift: float = 8.0, max_rotate: float = 10.0) -> np.ndarray:
    """Full pipeline: mask, resample, match, crop/downsample, roll, augment.

    Returns a (30,112,112) float32 clip in [0,1]. Inputs already at 112x112
    skip the crop stage; inputs between 112 and the 549 crop window are
    resized directly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    work = mask_overlay(loop, geom) if geom is not None else loop
    clip = resample_cycle(work, TARGET_FRAMES)
    if ref is not None:
        h, w = clip.shape[1:]
        in_sector = sector_mask(geom, h, w) if geom is not None else None
        clip = histogram_match(clip, ref, mask=in_sector)
    h, w = clip.shape[1:]
    if (h, w) == (TARGET_SIZE, TARGET_SIZE):
        clip = clip / np.float32(255.0)
    elif h >= CROP_SIZE and w >= CROP_SIZE:
        clip = crop_and_downsample(clip)
    else:
        clip = bilinear_resize(clip, TARGET_SIZE, TARGET_SIZE) / np.float32(255.0)
    if mode == "train":
        start = sample_clip_start("train", rng)
        clip = roll_clip(clip, start)
        clip = augment(clip, rng, max_shift, max_rotate)
    return clip.astype(np.float32)
