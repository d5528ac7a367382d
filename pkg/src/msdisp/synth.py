"""Synthetic pseudo-multispectral stereo pairs with exact sparse ground truth.

Each frame pair is rendered from one latent scene: a band-limited background
texture plus elliptical "warm objects".  The RGB channel sees the texture and
per-object albedo through a gamma curve with sensor noise; the LWIR channel
sees mostly the object temperatures on a flat ambient background (texture
strongly suppressed) through a different monotone curve.  Every object is
drawn into the LWIR frame shifted horizontally by its integer disparity, so
emitted ground-truth points are exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import GroundTruthPoint, SequenceData, rng_for

__all__ = ["SynthConfig", "SynthObject", "generate_sequence", "generate_dataset"]


@dataclass
class SynthConfig:
    width: int = 256
    height: int = 160
    n_frames: int = 12
    n_objects: int = 4
    points_per_frame: int = 14
    disp_low: int = -20          # inclusive signed disparity range
    disp_high: int = 20
    margin: int = 56             # keep point x/y and x+d this far from borders
    min_point_spacing: int = 3
    noise: float = 0.015
    seed: int = 0

    def validate(self, run_disp_max: Optional[int] = None) -> None:
        if self.disp_low > self.disp_high:
            raise ValueError(f"empty disparity range [{self.disp_low}, {self.disp_high}]")
        if self.margin <= 18:
            raise ValueError("margin must exceed the patch half-width (18)")
        if self.width <= 2 * self.margin or self.height <= 2 * self.margin:
            raise ValueError(
                f"{self.width}x{self.height} frame leaves no room inside margin {self.margin}"
            )
        if run_disp_max is not None:
            half = run_disp_max // 2
            if self.disp_low < -half or self.disp_high > half:
                raise ValueError(
                    f"disparity range [{self.disp_low}, {self.disp_high}] exceeds "
                    f"+-{half} for disp_max={run_disp_max}"
                )


@dataclass
class SynthObject:
    """One rendered object in one frame; ``d`` is its exact disparity."""

    cx: float
    cy: float
    rx: float
    ry: float
    albedo: np.ndarray  # (3,) RGB reflectance
    temp: float
    d: int


@dataclass
class SynthFrameInfo:
    objects: list = field(default_factory=list)


def _object_mask(cfg: SynthConfig, obj: SynthObject, shift: int = 0) -> np.ndarray:
    """Soft-edged ellipse indicator, horizontally shifted by `shift`."""
    ys = np.arange(cfg.height, dtype=np.float32)[:, None]
    xs = np.arange(cfg.width, dtype=np.float32)[None, :]
    r = np.sqrt(
        ((xs - (obj.cx + shift)) / obj.rx) ** 2 + ((ys - obj.cy) / obj.ry) ** 2
    )
    # smoothstep from 1 inside to 0 outside over ~1.5 px at the rim
    edge = 1.5 / min(obj.rx, obj.ry)
    t = np.clip((1.0 + edge - r) / (2 * edge), 0.0, 1.0)
    return (t * t * (3 - 2 * t)).astype(np.float32)


def _sample_objects(cfg: SynthConfig, rng: np.random.Generator) -> list:
    """Objects with non-overlapping footprints in both RGB and LWIR frames."""
    objects: list = []
    attempts = 0
    while len(objects) < cfg.n_objects and attempts < 200 * cfg.n_objects:
        attempts += 1
        rx = float(rng.uniform(9, 15))
        ry = float(rng.uniform(9, 15))
        cx = float(rng.uniform(cfg.margin, cfg.width - cfg.margin))
        cy = float(rng.uniform(cfg.margin, cfg.height - cfg.margin))
        d = int(rng.integers(cfg.disp_low, cfg.disp_high + 1))
        ok = True
        for other in objects:
            min_gap = rx + other.rx + abs(d) + abs(other.d) + 6
            if abs(cx - other.cx) < min_gap and abs(cy - other.cy) < ry + other.ry + 6:
                ok = False
                break
        if not ok:
            continue
        albedo = rng.uniform(0.35, 1.0, size=3).astype(np.float32)
        temp = float(rng.uniform(0.55, 0.95))
        objects.append(SynthObject(cx, cy, rx, ry, albedo, temp, d))
    return objects


def _render_frame(cfg: SynthConfig, rng: np.random.Generator, objects: list):
    """(rgb uint8 (H,W,3), lwir uint8 (H,W)) for one frame's object set."""
    h, w = cfg.height, cfg.width
    texture = gaussian_filter(rng.standard_normal((h, w)), sigma=3.0)
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-6)
    texture = texture.astype(np.float32)

    rgb = np.empty((h, w, 3), np.float32)
    base = 0.25 + 0.5 * texture
    for c in range(3):
        rgb[:, :, c] = base * np.float32(0.7 + 0.1 * c)
    lwir = 0.22 + 0.06 * texture

    for obj in objects:
        mask = _object_mask(cfg, obj)
        detail = 0.75 + 0.25 * texture
        for c in range(3):
            rgb[:, :, c] = rgb[:, :, c] * (1 - mask) + mask * obj.albedo[c] * detail
        shifted = _object_mask(cfg, obj, shift=obj.d)
        lwir = lwir * (1 - shifted) + shifted * obj.temp

    rgb = np.clip(rgb + rng.normal(0.0, cfg.noise, rgb.shape), 0, 1) ** 0.85
    lwir = np.clip(lwir + rng.normal(0.0, cfg.noise, lwir.shape), 0, 1) ** 1.25
    return (
        np.round(rgb * 255).astype(np.uint8),
        np.round(lwir * 255).astype(np.uint8),
    )


def _sample_points(
    cfg: SynthConfig,
    rng: np.random.Generator,
    objects: list,
    sequence: str,
    frame: int,
) -> list:
    """Ground-truth points on object pixels, margin-safe and spaced apart."""
    points: list = []
    taken: list = []
    per_obj = np.zeros(len(objects), np.int64)
    attempts = 0
    while len(points) < cfg.points_per_frame and attempts < 60 * cfg.points_per_frame:
        attempts += 1
        oi = int(np.argmin(per_obj + rng.uniform(0, 0.5, len(objects))))
        obj = objects[oi]
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1.0)) * 0.7
        x = int(round(obj.cx + rad * obj.rx * np.cos(ang)))
        y = int(round(obj.cy + rad * obj.ry * np.sin(ang)))
        if not (
            cfg.margin <= x < cfg.width - cfg.margin
            and cfg.margin <= y < cfg.height - cfg.margin
            and cfg.margin <= x + obj.d < cfg.width - cfg.margin
        ):
            continue
        if any(
            abs(x - tx) < cfg.min_point_spacing and abs(y - ty) < cfg.min_point_spacing
            for tx, ty in taken
        ):
            continue
        # the point must sit inside this object's footprint, unambiguously
        rr = ((x - obj.cx) / obj.rx) ** 2 + ((y - obj.cy) / obj.ry) ** 2
        if rr > 0.85:
            continue
        taken.append((x, y))
        per_obj[oi] += 1
        points.append(GroundTruthPoint(sequence, frame, x, y, obj.d))
    return points


def generate_sequence(cfg: SynthConfig, name: str, seq_seed_tag: str = "") -> tuple:
    """One synthetic sequence; returns (SequenceData, list[SynthFrameInfo])."""
    cfg.validate()
    rgb_frames, lwir_frames, points, infos = [], [], [], []
    for f in range(cfg.n_frames):
        rng = rng_for(cfg.seed, "synth", seq_seed_tag or name, f)
        objects = _sample_objects(cfg, rng)
        rgb, lwir = _render_frame(cfg, rng, objects)
        pts = _sample_points(cfg, rng, objects, name, f)
        rgb_frames.append(rgb)
        lwir_frames.append(lwir)
        points.extend(pts)
        infos.append(SynthFrameInfo(objects))
    return SequenceData(name, rgb_frames, lwir_frames, points), infos


def generate_dataset(cfg: SynthConfig, n_sequences: int = 3, prefix: str = "synth") -> dict:
    """Named synthetic sequences: {name: SequenceData}."""
    out = {}
    for i in range(1, n_sequences + 1):
        name = f"{prefix}{i:02d}"
        seq, _ = generate_sequence(cfg, name)
        out[name] = seq
    return out
