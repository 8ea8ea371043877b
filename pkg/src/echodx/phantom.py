"""Synthetic cine-loop phantoms: a pulsating bright annulus plus an optional
fluttering leaflet segment.

Classes differ along one of two axes. The wall-motion axis varies the
annulus contraction amplitude (normal 0.35, mild 0.20, severe 0.08); the
valve axis varies the leaflet flutter amplitude at fixed contraction. The
noiseless render also yields a ground-truth motion mask (pixels whose
noiseless temporal variance is positive) used by attribution localization
tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from echodx.ect import ManifestRow, write_ect, write_manifest
from echodx.preprocess import CineLoop
from echodx.seeding import derive_seed, stream

CLASS_NAMES = ("normal", "mild", "severe")


@dataclass
class PhantomParams:
    size: int = 112
    frames: int = 30
    center: tuple[float, float] = (56.0, 56.0)
    rest_radius: float = 28.0
    thickness: float = 5.0
    amplitudes: tuple[float, float, float] = (0.35, 0.20, 0.08)
    task: str = "lv"  # "lv": amplitude varies; "valve": flutter varies
    flutters: tuple[float, float, float] = (30.0, 15.0, 5.0)  # degrees
    valve_amplitude: float = 0.20
    leaflet_len_frac: float = 0.6
    leaflet_halfwidth: float = 1.5
    annulus_value: float = 180.0
    leaflet_value: float = 230.0
    speckle: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 8.0

    def __post_init__(self):
        if self.task not in ("lv", "valve"):
            raise ValueError(f"task must be 'lv' or 'valve', got {self.task!r}")
        if any(not 0 <= a < 1 for a in self.amplitudes):
            raise ValueError(f"amplitudes must be in [0,1), got {self.amplitudes}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        cy, cx = self.center
        reach = self.rest_radius + self.thickness
        if (cy - reach < 0 or cx - reach < 0
                or cy + reach > self.size - 1 or cx + reach > self.size - 1):
            raise ValueError("annulus geometry extends outside the frame")

    def class_motion(self, class_id: int) -> tuple[float, float]:
        """(contraction amplitude, flutter degrees) for a class."""
        if not 0 <= class_id < 3:
            raise ValueError(f"class_id must be 0..2, got {class_id}")
        if self.task == "lv":
            return self.amplitudes[class_id], 0.0
        return self.valve_amplitude, self.flutters[class_id]


def _dist_grid(params: PhantomParams) -> np.ndarray:
    cy, cx = params.center
    rr, cc = np.meshgrid(np.arange(params.size, dtype=np.float64),
                         np.arange(params.size, dtype=np.float64), indexing="ij")
    return np.hypot(rr - cy, cc - cx)


def _segment_mask(params: PhantomParams, angle_deg: float) -> np.ndarray:
    """Pixels within leaflet_halfwidth of the leaflet segment.

    The segment is anchored at the annulus center; at rest it points toward
    the top of the frame and flutter rotates it about the anchor.
    """
    cy, cx = params.center
    length = params.leaflet_len_frac * params.rest_radius
    th = np.deg2rad(angle_deg)
    # rest direction is "up" (negative row); rotate by the flutter angle
    ey = cy - length * np.cos(th)
    ex = cx + length * np.sin(th)
    rr, cc = np.meshgrid(np.arange(params.size, dtype=np.float64),
                         np.arange(params.size, dtype=np.float64), indexing="ij")
    vy, vx = ey - cy, ex - cx
    wy, wx = rr - cy, cc - cx
    seg_len2 = vy * vy + vx * vx
    t = np.clip((wy * vy + wx * vx) / seg_len2, 0.0, 1.0)
    dy = wy - t * vy
    dx = wx - t * vx
    return np.hypot(dy, dx) <= params.leaflet_halfwidth


def render_frame(params: PhantomParams, amplitude: float, flutter_deg: float,
                 t: int) -> np.ndarray:
    """Noiseless frame t: annulus of constant width whose inner radius
    follows r0*(1 - a*(1-cos(2*pi*t/frames))/2), plus the optional leaflet."""
    phase = (1.0 - np.cos(2.0 * np.pi * t / params.frames)) / 2.0
    r_in = params.rest_radius * (1.0 - amplitude * phase)
    dist = _dist_grid(params)
    img = np.where((dist >= r_in) & (dist <= r_in + params.thickness),
                   params.annulus_value, 0.0)
    if flutter_deg != 0.0:
        angle = flutter_deg * np.sin(2.0 * np.pi * t / params.frames)
        img = np.where(_segment_mask(params, angle), params.leaflet_value, img)
    return img.astype(np.float32)


def render_noiseless(params: PhantomParams, class_id: int,
                     frames: int | None = None) -> np.ndarray:
    amp, flut = params.class_motion(class_id)
    n = params.frames if frames is None else frames
    return np.stack([render_frame(params, amp, flut, t) for t in range(n)])


def generate_phantom_clip(params: PhantomParams, class_id: int,
                          seed: int) -> tuple[CineLoop, np.ndarray]:
    """Render one noisy clip and its ground-truth motion mask.

    Noise: multiplicative speckle uniform over ``params.speckle`` and
    additive Gaussian sigma ``params.noise_sigma``, both from the seeded
    stream; values clipped to [0,255]. The mask marks pixels whose noiseless
    temporal variance is positive.
    """
    clean = render_noiseless(params, class_id)
    mask = (clean.var(axis=0) > 1e-12).astype(np.float32)
    rng = stream(seed, "phantom", class_id)
    lo, hi = params.speckle
    noisy = clean * rng.uniform(lo, hi, size=clean.shape)
    if params.noise_sigma > 0:
        noisy = noisy + rng.normal(0.0, params.noise_sigma, size=clean.shape)
    noisy = np.clip(noisy, 0.0, 255.0).astype(np.float32)
    loop = CineLoop(noisy, cycle_start=0, cycle_len=params.frames)
    return loop, mask


def moving_region_mask(clip: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Pixels whose temporal variance exceeds tau."""
    return (np.asarray(clip).var(axis=0) > tau).astype(np.float32)


def generate_dataset(per_class: int, params: PhantomParams, out_dir,
                     seed: int) -> Path:
    """Write 3*per_class clips, their ground-truth masks, and a manifest.

    Clips are ``<class>_<idx>.ect`` with masks at ``<class>_<idx>.mask.ect``;
    the manifest is ``manifest.tsv``. Fully deterministic given the seed.
    """
    if per_class < 3:
        raise ValueError(f"per_class must be >= 3, got {per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for class_id, cname in enumerate(CLASS_NAMES):
        for i in range(per_class):
            clip_seed = _clip_seed(seed, class_id, i)
            loop, mask = generate_phantom_clip(params, class_id, clip_seed)
            stem = f"{cname}_{i:03d}"
            write_ect(out / f"{stem}.ect", loop.frames)
            write_ect(out / f"{stem}.mask.ect", mask)
            rows.append(ManifestRow(f"{stem}.ect", class_id, 0, params.frames))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def _clip_seed(seed: int, class_id: int, index: int) -> int:
    return derive_seed(seed, "clip", class_id, index)
