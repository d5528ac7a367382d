"""Dataset ingestion, sample construction, augmentation, and fold assembly.

A sequence is a directory of rectified frame pairs plus sparse ground truth:

    <seq>/rgb/000000.png   8-bit color frames
    <seq>/lwir/000000.png  8-bit grayscale frames (same size, rectified)
    <seq>/gt.csv           header ``frame,x,y,d``; the LWIR match of RGB
                           pixel (x, y) sits at (x + d, y)

Patches are 36x36, spanning columns [x-18, x+17]; a point is usable only if
both its RGB patch and its LWIR patch fit inside the frames.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence as Seq

import numpy as np
from PIL import Image

__all__ = [
    "GroundTruthPoint",
    "SequenceData",
    "LoadReport",
    "NormStats",
    "SampleSet",
    "FoldSpec",
    "FoldData",
    "NegativeOffsetPolicy",
    "DataFormatError",
    "load_sequence",
    "patch_fits",
    "point_usable",
    "extract_rgb_patch",
    "extract_lwir_patch",
    "cross_duplicate",
    "mirror_points",
    "mirror_sequence",
    "make_positives",
    "make_negative",
    "build_fold",
    "parse_fold_spec",
    "rng_for",
]

PATCH = 36
PATCH_LEFT = PATCH // 2         # patch spans [x - 18, x + 17]
PATCH_RIGHT = PATCH - PATCH_LEFT - 1

PROVENANCE = ("original", "jittered", "cross", "mirrored", "negative")

OFFSET_LOW = 10                 # negative offset band: |o| uniform in [10, 30]
OFFSET_HIGH = 30


class DataFormatError(ValueError):
    """Malformed dataset input; the message carries file/line context."""


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Deterministic child generator for (root seed, component tags)."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.append(zlib.crc32(t.encode()))
        else:
            words.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True, order=True)
class GroundTruthPoint:
    """Sparse annotation: RGB pixel (x, y) matches LWIR pixel (x + d, y)."""

    sequence: str
    frame: int
    x: int
    y: int
    d: int


@dataclass
class SequenceData:
    """Frames of one rectified video pair plus its usable ground truth."""

    name: str
    rgb: list  # (H, W, 3) uint8 per frame
    lwir: list  # (H, W) uint8 per frame
    points: list

    @property
    def height(self) -> int:
        return self.rgb[0].shape[0]

    @property
    def width(self) -> int:
        return self.rgb[0].shape[1]

    @property
    def n_frames(self) -> int:
        return len(self.rgb)


@dataclass
class LoadReport:
    n_points: int = 0
    n_usable: int = 0
    unusable: list = field(default_factory=list)

    @property
    def n_unusable(self) -> int:
        return len(self.unusable)


def patch_fits(x: int, y: int, width: int, height: int) -> bool:
    return (
        PATCH_LEFT <= x <= width - PATCH_LEFT
        and PATCH_LEFT <= y <= height - PATCH_LEFT
    )


def point_usable(pt: GroundTruthPoint, width: int, height: int) -> bool:
    """Both the RGB patch at x and the LWIR patch at x + d must fit."""
    return patch_fits(pt.x, pt.y, width, height) and patch_fits(
        pt.x + pt.d, pt.y, width, height
    )


def _load_frames(dir_path: Path, mode: str) -> list:
    files = sorted(
        p for p in dir_path.iterdir() if p.suffix.lower() in (".png", ".pgm", ".ppm", ".pnm")
    )
    if not files:
        raise DataFormatError(f"{dir_path}: no raster frames found")
    frames = []
    for p in files:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert(mode), dtype=np.uint8))
    return frames


def read_gt_csv(path: Path, sequence: str) -> list:
    """Parse a canonical ``frame,x,y,d`` file; malformed rows raise with context."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "x", "y", "d"]:
            raise DataFormatError(f"{path}:1: expected header 'frame,x,y,d', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                frame, x, y, d = (int(v) for v in row)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer field in {row!r}"
                ) from None
            points.append(GroundTruthPoint(sequence, frame, x, y, d))
    return points


def load_sequence(seq_dir, name: Optional[str] = None) -> tuple:
    """Load one sequence directory; returns (SequenceData, LoadReport).

    Unusable (border-adjacent) points are dropped from the sequence but
    counted in the report.  Malformed files and out-of-range coordinates
    raise DataFormatError.
    """
    seq_dir = Path(seq_dir)
    name = name or seq_dir.name
    rgb = _load_frames(seq_dir / "rgb", "RGB")
    lwir = _load_frames(seq_dir / "lwir", "L")
    if len(rgb) != len(lwir):
        raise DataFormatError(
            f"{seq_dir}: {len(rgb)} RGB frames but {len(lwir)} LWIR frames"
        )
    h, w = rgb[0].shape[:2]
    for i, (a, b) in enumerate(zip(rgb, lwir)):
        if a.shape[:2] != (h, w) or b.shape[:2] != (h, w):
            raise DataFormatError(f"{seq_dir}: frame {i} size differs from frame 0")

    gt_path = seq_dir / "gt.csv"
    points = read_gt_csv(gt_path, name)
    usable, unusable = [], []
    for lineno, pt in enumerate(points, start=2):
        if not (0 <= pt.frame < len(rgb)):
            raise DataFormatError(
                f"{gt_path}:{lineno}: frame {pt.frame} out of range (have {len(rgb)})"
            )
        if not (0 <= pt.x < w and 0 <= pt.y < h and 0 <= pt.x + pt.d < w):
            raise DataFormatError(
                f"{gt_path}:{lineno}: coordinates {(pt.x, pt.y, pt.d)} outside "
                f"the {w}x{h} frame"
            )
        if point_usable(pt, w, h):
            usable.append(pt)
        else:
            unusable.append(pt)
    report = LoadReport(n_points=len(points), n_usable=len(usable), unusable=unusable)
    return SequenceData(name, rgb, lwir, usable), report


# ---------------------------------------------------------------------------
# patch extraction and normalization
# ---------------------------------------------------------------------------


def extract_rgb_patch(frame: np.ndarray, x: int, y: int) -> np.ndarray:
    """(3, 36, 36) float32 in [0, 1] from an (H, W, 3) uint8 frame."""
    win = frame[y - PATCH_LEFT : y + PATCH_RIGHT + 1, x - PATCH_LEFT : x + PATCH_RIGHT + 1]
    if win.shape[:2] != (PATCH, PATCH):
        raise ValueError(f"patch at ({x}, {y}) exceeds the frame")
    return np.ascontiguousarray(win.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def extract_lwir_patch(frame: np.ndarray, x: int, y: int) -> np.ndarray:
    """(3, 36, 36) float32 in [0, 1]; the single LWIR channel replicated x3."""
    win = frame[y - PATCH_LEFT : y + PATCH_RIGHT + 1, x - PATCH_LEFT : x + PATCH_RIGHT + 1]
    if win.shape != (PATCH, PATCH):
        raise ValueError(f"patch at ({x}, {y}) exceeds the frame")
    plane = win.astype(np.float32) / np.float32(255)
    return np.ascontiguousarray(np.broadcast_to(plane, (3, PATCH, PATCH)))


@dataclass
class NormStats:
    """Per-channel standardization statistics computed on a train split."""

    rgb_mean: np.ndarray
    rgb_std: np.ndarray
    lwir_mean: np.ndarray
    lwir_std: np.ndarray

    @classmethod
    def from_samples(cls, rgb: np.ndarray, lwir: np.ndarray) -> "NormStats":
        def stats(batch):
            mean = batch.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            std = batch.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            return mean, np.maximum(std, np.float32(1e-6))

        rm, rs = stats(rgb)
        lm, ls = stats(lwir)
        return cls(rm, rs, lm, ls)

    def apply_rgb(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.rgb_mean[:, None, None]) / self.rgb_std[:, None, None]

    def apply_lwir(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.lwir_mean[:, None, None]) / self.lwir_std[:, None, None]

    def to_dict(self) -> dict:
        return {
            "rgb_mean": self.rgb_mean.tolist(),
            "rgb_std": self.rgb_std.tolist(),
            "lwir_mean": self.lwir_mean.tolist(),
            "lwir_std": self.lwir_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["rgb_mean"], np.float32),
            np.asarray(d["rgb_std"], np.float32),
            np.asarray(d["lwir_mean"], np.float32),
            np.asarray(d["lwir_std"], np.float32),
        )


@dataclass
class SampleSet:
    """Labeled patch pairs ready for training; patches are standardized."""

    rgb: np.ndarray  # (N, 3, 36, 36) float32
    lwir: np.ndarray
    labels: np.ndarray  # (N,) float32, 1=same 0=different
    provenance: np.ndarray  # (N,) uint8 index into PROVENANCE

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

CROSS_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))
DIAGONAL_NEIGHBORS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def cross_duplicate(
    points: Iterable[GroundTruthPoint],
    width: int,
    height: int,
    diagonal: bool = False,
) -> list:
    """Spawn the parent's disparity onto its 4-neighborhood.

    Default neighbors are the axis cross (x+-1, y) / (x, y+-1); the diagonal
    variant uses (x+-1, y+-1).  Duplicates collapse to the first occurrence
    and spawns that violate patch bounds are dropped, so output count is at
    most five times the input.
    """
    offsets = DIAGONAL_NEIGHBORS if diagonal else CROSS_NEIGHBORS
    out, seen = [], set()
    points = list(points)
    for pt in points:
        key = (pt.frame, pt.x, pt.y)
        if key not in seen:
            seen.add(key)
            out.append(pt)
    for pt in points:
        for dx, dy in offsets:
            nx, ny = pt.x + dx, pt.y + dy
            key = (pt.frame, nx, ny)
            if key in seen:
                continue
            spawned = GroundTruthPoint(pt.sequence, pt.frame, nx, ny, pt.d)
            if not point_usable(spawned, width, height):
                continue
            seen.add(key)
            out.append(spawned)
    return out


def mirror_points(points: Iterable[GroundTruthPoint], width: int, suffix: str = "") -> list:
    """Map points into horizontally flipped frames: (x, y, d) -> (W-x, y, -d).

    With 36-wide patches spanning [x-18, x+17], extraction at W-x in the
    flipped frame is the exact column-reversed original patch, and the map
    is an involution on the usable set.
    """
    return [
        GroundTruthPoint(pt.sequence + suffix, pt.frame, width - pt.x, pt.y, -pt.d)
        for pt in points
    ]


def mirror_sequence(seq: SequenceData, suffix: str = "~mirror") -> SequenceData:
    """Flipped copy of a sequence with remapped ground truth."""
    return SequenceData(
        seq.name + suffix,
        [np.ascontiguousarray(f[:, ::-1]) for f in seq.rgb],
        [np.ascontiguousarray(f[:, ::-1]) for f in seq.lwir],
        mirror_points(seq.points, seq.width, suffix),
    )


@dataclass
class NegativeOffsetPolicy:
    """Negative pairs displace the LWIR patch by o, |o| uniform in [10, 30].

    The pinned placement keeps the RGB patch at (x, y) and centers the LWIR
    patch at (x + d + o, y), so every negative is at least 10 px from the
    true match.  ``literal=True`` instead offsets both patches, placing them
    at (x + o, y) and (x - d + o, y).
    """

    low: int = OFFSET_LOW
    high: int = OFFSET_HIGH
    literal: bool = False
    retries: int = 16

    def sample_offset(self, rng: np.random.Generator) -> int:
        mag = int(rng.integers(self.low, self.high + 1))
        return mag if rng.integers(0, 2) == 1 else -mag


def make_positives(pt: GroundTruthPoint, width: int, height: int) -> list:
    """Up to three same-labeled pairs at disparities d-1, d, d+1.

    Returns (x_rgb, x_lwir, provenance) center columns; jittered pairs whose
    LWIR patch would leave the frame are dropped.
    """
    out = []
    for delta in (-1, 0, 1):
        lx = pt.x + pt.d + delta
        if patch_fits(lx, pt.y, width, height):
            prov = "original" if delta == 0 else "jittered"
            out.append((pt.x, lx, prov))
    return out


def make_negative(
    pt: GroundTruthPoint,
    width: int,
    height: int,
    policy: NegativeOffsetPolicy,
    rng: np.random.Generator,
) -> Optional[tuple]:
    """One different-labeled pair for this point, or None when no offset fits.

    Returns (x_rgb, x_lwir) center columns.
    """
    for _ in range(policy.retries):
        o = policy.sample_offset(rng)
        if policy.literal:
            rx, lx = pt.x + o, pt.x - pt.d + o
        else:
            rx, lx = pt.x, pt.x + pt.d + o
        if patch_fits(rx, pt.y, width, height) and patch_fits(lx, pt.y, width, height):
            return rx, lx
    return None


# ---------------------------------------------------------------------------
# fold assembly
# ---------------------------------------------------------------------------


@dataclass
class FoldSpec:
    """Declarative train/val/test split over sequence directories."""

    name: str
    train: list  # sequence paths
    val: list  # sequence paths (subset of train sequences, typically)
    val_images: int
    test: list  # sequence paths

    def validate(self) -> None:
        fit_names = {Path(p).name for p in self.train} | {Path(p).name for p in self.val}
        test_names = {Path(p).name for p in self.test}
        overlap = fit_names & test_names
        if overlap:
            raise ValueError(
                f"fold {self.name}: sequences {sorted(overlap)} appear in both "
                "train/val and test"
            )


def parse_fold_spec(path) -> FoldSpec:
    """Read a flat key=value fold file; paths resolve relative to the file."""
    from .config import parse_kv_file

    path = Path(path)
    kv = parse_kv_file(path)
    base = path.parent

    def paths(key):
        raw = kv.get(key, "").strip()
        if not raw:
            return []
        return [str((base / p.strip()).resolve()) for p in raw.split(",") if p.strip()]

    spec = FoldSpec(
        name=kv.get("name", path.stem),
        train=paths("train"),
        val=paths("val"),
        val_images=int(kv.get("val_images", "0")),
        test=paths("test"),
    )
    spec.validate()
    return spec


@dataclass
class FoldData:
    """Assembled fold: standardized train samples plus raw val/test points."""

    name: str
    train: SampleSet
    stats: NormStats
    sequences: dict  # name -> SequenceData for val/test lookup
    val_points: list
    test_points: list
    report: dict


def _emit_samples(
    seq: SequenceData,
    points: Seq[GroundTruthPoint],
    policy: NegativeOffsetPolicy,
    rng: np.random.Generator,
    jitter: str,
    mirrored: bool,
    original_keys: Optional[set] = None,
) -> tuple:
    """Positive/negative patch pairs for one sequence's point list."""
    w, h = seq.width, seq.height
    rgb_patches, lwir_patches, labels, prov = [], [], [], []
    n_dropped = 0
    for pt in points:
        frame_rgb = seq.rgb[pt.frame]
        frame_lwir = seq.lwir[pt.frame]
        pos = make_positives(pt, w, h)
        if not pos:
            n_dropped += 1
            continue
        if jitter == "random":
            pos = [pos[int(rng.integers(0, len(pos)))]]
        spawned = original_keys is not None and (pt.frame, pt.x, pt.y) not in original_keys
        for rx, lx, p in pos:
            neg = make_negative(pt, w, h, policy, rng)
            if neg is None:
                n_dropped += 1
                continue
            if mirrored:
                p = "mirrored"
            elif spawned:
                p = "cross"
            rgb_patches.append(extract_rgb_patch(frame_rgb, rx, pt.y))
            lwir_patches.append(extract_lwir_patch(frame_lwir, lx, pt.y))
            labels.append(1.0)
            prov.append(PROVENANCE.index(p))
            nrx, nlx = neg
            rgb_patches.append(extract_rgb_patch(frame_rgb, nrx, pt.y))
            lwir_patches.append(extract_lwir_patch(frame_lwir, nlx, pt.y))
            labels.append(0.0)
            prov.append(PROVENANCE.index("negative"))
    return rgb_patches, lwir_patches, labels, prov, n_dropped


def build_fold(
    spec: FoldSpec,
    seed: int = 0,
    jitter: str = "random",
    diagonal_cross: bool = False,
    policy: Optional[NegativeOffsetPolicy] = None,
    loaded: Optional[dict] = None,
) -> FoldData:
    """Assemble a fold: augmented, balanced train set plus raw val/test points.

    Train sequences go through cross duplication, mirroring, positive jitter,
    and negative mining; ``val_images`` whole frames are sampled (seeded) from
    the val sequences, removed from training, and kept as raw points; test
    sequences contribute raw points only.  ``loaded`` may pre-supply
    SequenceData objects keyed by path (or sequence name) to skip disk access.
    """
    spec.validate()
    policy = policy or NegativeOffsetPolicy()
    loaded = loaded or {}
    report: dict = {"dropped": 0, "unusable": 0}
    sequences: dict = {}

    def ensure(path) -> SequenceData:
        name = Path(path).name
        if name not in sequences:
            if path in loaded:
                seq = loaded[path]
            elif name in loaded:
                seq = loaded[name]
            else:
                seq, rep = load_sequence(path)
                report["unusable"] += rep.n_unusable
            sequences[name] = seq
        return sequences[name]

    train_names = sorted({ensure(p).name for p in spec.train})
    val_names = sorted({ensure(p).name for p in spec.val})
    test_names = sorted({ensure(p).name for p in spec.test})

    # seeded validation frame selection, pooled over the val sequences
    val_pool = [(n, f) for n in val_names for f in range(sequences[n].n_frames)]
    val_frames: set = set()
    if spec.val_images and val_pool:
        rng = rng_for(seed, "val-frames", spec.name)
        picks = rng.choice(
            len(val_pool), size=min(spec.val_images, len(val_pool)), replace=False
        )
        val_frames = {val_pool[i] for i in np.sort(picks)}
    val_points = [
        pt
        for n in val_names
        for pt in sequences[n].points
        if (n, pt.frame) in val_frames
    ]

    all_rgb, all_lwir, all_labels, all_prov = [], [], [], []
    for name in train_names:
        seq = sequences[name]
        train_pts = [pt for pt in seq.points if (name, pt.frame) not in val_frames]
        original_keys = {(pt.frame, pt.x, pt.y) for pt in train_pts}
        crossed = cross_duplicate(
            train_pts, seq.width, seq.height, diagonal=diagonal_cross
        )
        mirrored_keys = {(f, seq.width - x, y) for f, x, y in original_keys}
        variants = [
            (seq, crossed, False, original_keys, rng_for(seed, "samples", spec.name, name)),
            (
                mirror_sequence(seq),
                mirror_points(crossed, seq.width, "~mirror"),
                True,
                mirrored_keys,
                rng_for(seed, "samples-mirror", spec.name, name),
            ),
        ]
        for vseq, vpoints, mirrored, keys, rng in variants:
            r, l, lab, pv, dropped = _emit_samples(
                vseq, vpoints, policy, rng, jitter, mirrored, keys
            )
            all_rgb.extend(r)
            all_lwir.extend(l)
            all_labels.extend(lab)
            all_prov.extend(pv)
            report["dropped"] += dropped

    if not all_labels:
        raise ValueError(f"fold {spec.name}: no usable training samples")

    rgb = np.stack(all_rgb)
    lwir = np.stack(all_lwir)
    labels = np.asarray(all_labels, np.float32)
    prov = np.asarray(all_prov, np.uint8)
    stats = NormStats.from_samples(rgb, lwir)
    rgb = stats.apply_rgb(rgb).astype(np.float32)
    lwir = stats.apply_lwir(lwir).astype(np.float32)

    test_points = [pt for n in test_names for pt in sequences[n].points]
    report["train_samples"] = int(len(labels))
    report["val_points"] = len(val_points)
    report["test_points"] = len(test_points)
    return FoldData(
        name=spec.name,
        train=SampleSet(rgb, lwir, labels, prov),
        stats=stats,
        sequences=sequences,
        val_points=val_points,
        test_points=test_points,
        report=report,
    )
