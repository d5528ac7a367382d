"""Widened-patch inference, disparity regression, and recall evaluation.

At a query point the RGB patch stays 36x36 while the LWIR patch is widened
by half of ``disp_max`` on each side.  One fully convolutional pass over the
widened patch yields a 256-D feature column per candidate disparity
(``disp_max + 1`` columns); each column is fused with the RGB feature and
scored by the heads.  Per head, the "same" scores are normalized into a
probability vector and the prediction is its expectation (soft argmax);
the final disparity averages the active heads.  Candidate index ``i``
corresponds to signed disparity ``i - disp_max/2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .data import (
    PATCH_LEFT,
    PATCH_RIGHT,
    GroundTruthPoint,
    NormStats,
    SequenceData,
    extract_lwir_patch,
    extract_rgb_patch,
)
from .model import PatchMatcher, CLASS_SAME
from .tensor import ScratchArena, Tensor

__all__ = [
    "DisparityPrediction",
    "RecallReport",
    "regress_disparity",
    "average_heads",
    "recall",
    "predict",
    "predict_points",
    "evaluate_points",
    "combine_reports",
    "write_predictions_csv",
    "write_recall_csv",
]


def regress_disparity(p: np.ndarray) -> float:
    """Expectation of the candidate index under a normalized probability vector."""
    p = np.asarray(p, np.float64).reshape(-1)
    total = p.sum()
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"probability vector is not normalized (sum {total:.6f})")
    return float(np.dot(p, np.arange(p.size)))


def average_heads(d_corr: Optional[float], d_concat: Optional[float]) -> float:
    """Mean of both head predictions; pass-through when one head is absent."""
    if d_corr is None and d_concat is None:
        raise ValueError("no head produced a disparity")
    if d_corr is None:
        return float(d_concat)
    if d_concat is None:
        return float(d_corr)
    return 0.5 * (float(d_corr) + float(d_concat))


def recall(predictions, ground_truths, t: float) -> float:
    """Fraction of predictions within t pixels of ground truth."""
    preds = np.asarray(predictions, np.float64)
    gts = np.asarray(ground_truths, np.float64)
    if preds.shape != gts.shape:
        raise ValueError(
            f"predictions and ground truths differ in length: {preds.shape} vs {gts.shape}"
        )
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    if preds.size == 0:
        raise ValueError("recall of an empty prediction set is undefined")
    return float(np.mean(np.abs(preds - gts) <= t))


@dataclass
class DisparityPrediction:
    """Per-head and averaged disparities, in candidate-index units [0, disp_max]."""

    point: GroundTruthPoint
    disp_max: int
    d_corr: Optional[float]
    d_concat: Optional[float]
    d_final: float

    def signed(self, value: float) -> float:
        return value - self.disp_max / 2

    @property
    def signed_final(self) -> float:
        return self.signed(self.d_final)


@dataclass
class RecallReport:
    """Recall at each threshold plus per-sequence breakdown."""

    name: str
    n: int
    thresholds: tuple
    recalls: dict
    per_sequence: list = field(default_factory=list)  # (sequence, n, {t: recall})
    n_skipped: int = 0


def _normalize_scores(scores: np.ndarray, mode: str) -> np.ndarray:
    """Rows of candidate scores -> probability vectors."""
    if mode == "softmax":
        z = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    total = scores.sum(axis=1, keepdims=True)
    return scores / np.maximum(total, 1e-20)


def _widened_bounds_ok(pt: GroundTruthPoint, seq: SequenceData, disp_max: int) -> bool:
    half = disp_max // 2
    return (
        PATCH_LEFT <= pt.x <= seq.width - PATCH_LEFT
        and PATCH_LEFT <= pt.y <= seq.height - PATCH_LEFT
        and pt.x - half >= PATCH_LEFT
        and pt.x + half <= seq.width - PATCH_LEFT
    )


def _head_scores(model: PatchMatcher, head_name: str, fused: np.ndarray) -> np.ndarray:
    head = model.head_corr if head_name == "corr" else model.head_concat
    probs = head.forward(Tensor(fused))
    return probs.data[:, CLASS_SAME].copy()


def predict_points(
    model: PatchMatcher,
    sequences: dict,
    points: Iterable[GroundTruthPoint],
    disp_max: int,
    stats: NormStats,
    normalize: str = "sum",
    batch: int = 32,
) -> list:
    """Batched widened-patch inference; returns DisparityPrediction per point.

    The model must be in eval mode.  Points whose widened patch leaves the
    frame raise ValueError naming the query point.
    """
    if model.training:
        raise RuntimeError("predict requires the model in eval mode")
    pts = list(points)
    half = disp_max // 2
    n_cand = disp_max + 1
    idx = np.arange(n_cand, dtype=np.float64)
    out: list = []
    heads = model.active_heads()
    arena = ScratchArena()

    for start in range(0, len(pts), batch):
        chunk = pts[start : start + batch]
        rgb_in = np.empty((len(chunk), 3, 36, 36), np.float32)
        lwir_in = np.empty((len(chunk), 3, 36, 36 + disp_max), np.float32)
        for i, pt in enumerate(chunk):
            seq = sequences[pt.sequence]
            if not _widened_bounds_ok(pt, seq, disp_max):
                raise ValueError(
                    f"widened patch out of bounds for query point "
                    f"{pt.sequence}/frame{pt.frame} ({pt.x}, {pt.y})"
                )
            rgb_in[i] = stats.apply_rgb(extract_rgb_patch(seq.rgb[pt.frame], pt.x, pt.y))
            lo, hi = pt.x - PATCH_LEFT - half, pt.x + PATCH_RIGHT + half + 1
            wide = seq.lwir[pt.frame][
                pt.y - PATCH_LEFT : pt.y + PATCH_RIGHT + 1, lo:hi
            ].astype(np.float32) / np.float32(255)
            lwir_in[i] = stats.apply_lwir(
                np.broadcast_to(wide, (3,) + wide.shape)
            )

        with arena:
            f_rgb = model.tower_rgb.features(Tensor(rgb_in)).data.copy()
            fmap = model.tower_lwir.forward(Tensor(lwir_in)).data
            # (N, 256, 1, n_cand) -> candidate-major (N, n_cand, 256)
            cols = np.ascontiguousarray(fmap[:, :, 0, :].transpose(0, 2, 1))
            n = len(chunk)
            scores = {}
            if "corr" in heads:
                fused = (f_rgb[:, None, :] * cols).reshape(n * n_cand, -1)
                scores["corr"] = _head_scores(model, "corr", fused).reshape(n, n_cand)
            if "concat" in heads:
                tiled = np.broadcast_to(f_rgb[:, None, :], cols.shape)
                fused = np.concatenate([tiled, cols], axis=2).reshape(n * n_cand, -1)
                scores["concat"] = _head_scores(model, "concat", fused).reshape(n, n_cand)

        d_hat = {
            k: (_normalize_scores(v, normalize) * idx).sum(axis=1)
            for k, v in scores.items()
        }
        for i, pt in enumerate(chunk):
            dc = float(d_hat["corr"][i]) if "corr" in d_hat else None
            dk = float(d_hat["concat"][i]) if "concat" in d_hat else None
            out.append(
                DisparityPrediction(pt, disp_max, dc, dk, average_heads(dc, dk))
            )
    return out


def predict(
    model: PatchMatcher,
    sequence: SequenceData,
    point: GroundTruthPoint,
    disp_max: int,
    stats: NormStats,
    normalize: str = "sum",
) -> DisparityPrediction:
    """Single-point inference over one rectified frame pair."""
    return predict_points(
        model, {point.sequence: sequence}, [point], disp_max, stats, normalize
    )[0]


def evaluate_points(
    model: PatchMatcher,
    sequences: dict,
    points: Iterable[GroundTruthPoint],
    disp_max: int,
    stats: NormStats,
    thresholds=(1, 3, 5),
    normalize: str = "sum",
    name: str = "fold",
    skip_out_of_bounds: bool = True,
) -> tuple:
    """Recall over a point set; returns (RecallReport, predictions).

    Points whose widened patch exits the frame are excluded and counted in
    ``n_skipped`` (they cannot be scored without padding).
    """
    pts = list(points)
    if not pts:
        raise ValueError("cannot evaluate an empty test set")
    usable, skipped = [], 0
    for pt in pts:
        if _widened_bounds_ok(pt, sequences[pt.sequence], disp_max):
            usable.append(pt)
        elif skip_out_of_bounds:
            skipped += 1
        else:
            raise ValueError(
                f"widened patch out of bounds for query point "
                f"{pt.sequence}/frame{pt.frame} ({pt.x}, {pt.y})"
            )
    preds = predict_points(model, sequences, usable, disp_max, stats, normalize)
    signed = np.array([p.signed_final for p in preds])
    gts = np.array([p.point.d for p in preds], np.float64)
    recalls = {t: recall(signed, gts, t) for t in thresholds}

    per_seq = []
    seq_names = sorted({p.point.sequence for p in preds})
    for sn in seq_names:
        mask = np.array([p.point.sequence == sn for p in preds])
        per_seq.append(
            (sn, int(mask.sum()), {t: recall(signed[mask], gts[mask], t) for t in thresholds})
        )
    report = RecallReport(
        name=name,
        n=len(preds),
        thresholds=tuple(thresholds),
        recalls=recalls,
        per_sequence=per_seq,
        n_skipped=skipped,
    )
    return report, preds


def combine_reports(reports: Iterable[RecallReport], name: str = "overall") -> RecallReport:
    """Overall recall as the test-point-count weighted average across folds."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to combine")
    thresholds = reports[0].thresholds
    total = sum(r.n for r in reports)
    recalls = {
        t: sum(r.recalls[t] * r.n for r in reports) / total for t in thresholds
    }
    return RecallReport(
        name=name,
        n=total,
        thresholds=thresholds,
        recalls=recalls,
        per_sequence=[(r.name, r.n, dict(r.recalls)) for r in reports],
        n_skipped=sum(r.n_skipped for r in reports),
    )


def write_predictions_csv(path, predictions: Iterable[DisparityPrediction]) -> None:
    """Rows of ``sequence,frame,x,y,gt_d,d_corr,d_concat,d_final`` (signed)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", "x", "y", "gt_d", "d_corr", "d_concat", "d_final"])
        for p in predictions:
            w.writerow(
                [
                    p.point.sequence,
                    p.point.frame,
                    p.point.x,
                    p.point.y,
                    p.point.d,
                    "" if p.d_corr is None else f"{p.signed(p.d_corr):.4f}",
                    "" if p.d_concat is None else f"{p.signed(p.d_concat):.4f}",
                    f"{p.signed_final:.4f}",
                ]
            )


def write_recall_csv(path, reports: Iterable[RecallReport]) -> None:
    """One row per scope (fold and per-sequence), one column per threshold."""
    reports = list(reports)
    thresholds = reports[0].thresholds
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["scope", "n", "skipped"] + [f"recall_le_{t:g}px" for t in thresholds]
        )
        for r in reports:
            w.writerow(
                [r.name, r.n, r.n_skipped] + [f"{r.recalls[t]:.6f}" for t in thresholds]
            )
            for sn, n, rec in r.per_sequence:
                w.writerow(
                    [f"{r.name}/{sn}", n, ""] + [f"{rec[t]:.6f}" for t in thresholds]
                )
