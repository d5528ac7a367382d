"""Two-headed cross-entropy training with Adam and a halving LR schedule.

Each head contributes a binary cross-entropy term computed from its softmax
"same" probability; with both heads active the total loss is their sum.
The learning rate starts at ``lr0`` and halves every ``halve_every`` epochs.
After every epoch the model is evaluated on the validation points and the
checkpoint with the best validation recall@3 is retained.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import predict as P
from .data import FoldData, rng_for
from .model import PatchMatcher, save_checkpoint
from .tensor import NumericalError, ScratchArena, Tape, Tensor

__all__ = [
    "TrainConfig",
    "Adam",
    "EpochRecord",
    "TrainResult",
    "head_loss",
    "total_loss",
    "lr_at",
    "train",
]

SELECTION_THRESHOLD = 3  # model selection uses validation recall@3


@dataclass
class TrainConfig:
    lr0: float = 0.01
    halve_every: int = 40
    epochs: int = 200
    batch_size: int = 128
    disp_max: int = 64
    patch: int = 36
    seed: int = 0
    head_mode: str = "both"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    prob_clamp: float = 1e-7
    val_thresholds: tuple = (1, 3, 5)
    candidate_normalize: str = "sum"

    def validate(self) -> None:
        for name in ("lr0", "halve_every", "epochs", "batch_size", "disp_max", "patch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_mode not in ("both", "corr", "concat"):
            raise ValueError(f"unknown head mode {self.head_mode!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 halved once per completed ``halve_every`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.halve_every))


def head_loss(p_same: Tensor, labels, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy from "same" probabilities.

    The probability assigned to the true class is p for label 1 and 1-p for
    label 0; it is clamped below before the log for numerical safety.
    """
    if p_same.size == 0:
        raise ValueError("head_loss of an empty batch is undefined")
    y = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, np.float32))
    if y.shape != p_same.shape:
        raise ValueError(f"labels shape {y.shape} does not match probabilities {p_same.shape}")
    p_true = p_same * y + (1.0 - p_same) * (1.0 - y)
    return -(p_true.clamp_min(clamp).log().mean())


def total_loss(
    loss_corr: Optional[Tensor], loss_concat: Optional[Tensor], mode: str = "both"
) -> Tensor:
    """Sum of the active heads' losses; a single-head run passes through."""
    if mode == "corr":
        out = loss_corr
    elif mode == "concat":
        out = loss_concat
    elif mode == "both":
        if loss_corr is None or loss_concat is None:
            raise ValueError("both-head mode requires both losses")
        out = loss_corr + loss_concat
    else:
        raise ValueError(f"unknown head mode {mode!r}")
    if out is None:
        raise ValueError(f"mode {mode!r} requires that head's loss")
    if not np.isfinite(out.data).all():
        parts = {
            "corr": None if loss_corr is None else float(loss_corr.data),
            "concat": None if loss_concat is None else float(loss_concat.data),
        }
        raise NumericalError(f"non-finite loss: {parts}")
    return out


class Adam:
    """Standard Adam with bias correction; gradients are cleared after a step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 / (1.0 - self.beta1**t))
        c2 = np.float32(1.0 / (1.0 - self.beta2**t))
        lr32 = np.float32(lr)
        eps32 = np.float32(self.eps)
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name} has no gradient; run backward first")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p.data -= lr32 * (m * c1) / (np.sqrt(v * c2) + eps32)
            p.grad = None

    def state_arrays(self):
        return [(name, self.m[name], self.v[name]) for name, _ in self.params]

    def load_from_checkpoint(self, meta) -> None:
        arrays = meta["arrays"]
        self.step_count = int(meta.get("adam_step") or 0)
        for name, _ in self.params:
            mk, vk = f"adam.m.{name}", f"adam.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise ValueError(f"checkpoint lacks optimizer state for {name}")
            self.m[name][:] = arrays[mk]
            self.v[name][:] = arrays[vk]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_corr: float
    loss_concat: float
    loss_total: float
    val_recall: dict
    seconds: float


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_recall: float
    model: PatchMatcher
    checkpoint_path: Optional[str] = None
    diverged: bool = False


LOG_NAME = "train_log.csv"
TIMING_NAME = "train_timing.csv"
BEST_NAME = "best.ckpt"


def _log_row(rec: EpochRecord, thresholds) -> list:
    row = [
        rec.epoch,
        f"{rec.lr:.8g}",
        f"{rec.loss_corr:.6f}",
        f"{rec.loss_concat:.6f}",
        f"{rec.loss_total:.6f}",
    ]
    row += [f"{rec.val_recall.get(t, float('nan')):.6f}" for t in thresholds]
    return row


def train(
    fold: FoldData,
    cfg: TrainConfig,
    out_dir=None,
    config_hash: str = "",
    quiet: bool = False,
) -> TrainResult:
    """Run the full training loop; returns history plus the best model.

    Deterministic for a fixed config: initialization, shuffling, and the
    sample pipeline all derive from ``cfg.seed``.  Wall-clock timings go to a
    sidecar CSV so the main log stays byte-reproducible.  On divergence the
    loop stops and the best checkpoint so far is kept.
    """
    cfg.validate()
    n = len(fold.train)
    if n == 0:
        raise ValueError("training set is empty")

    model = PatchMatcher(cfg.head_mode, seed=cfg.seed)
    adam = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = rng_for(cfg.seed, "shuffle")
    arena = ScratchArena()
    thresholds = cfg.val_thresholds

    out_dir = Path(out_dir) if out_dir else None
    log_fh = timing_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / LOG_NAME, "w", newline="")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(
            ["epoch", "lr", "loss_corr", "loss_concat", "loss_total"]
            + [f"val_recall_le_{t:g}px" for t in thresholds]
        )
        timing_fh = open(out_dir / TIMING_NAME, "w", newline="")
        timing_writer = csv.writer(timing_fh)
        timing_writer.writerow(["epoch", "seconds"])

    labels_all = fold.train.labels
    history: list = []
    best_epoch, best_recall = -1, -1.0
    ckpt_path = str(out_dir / BEST_NAME) if out_dir else None
    diverged = False

    def save_best(epoch):
        if ckpt_path:
            save_checkpoint(
                ckpt_path,
                model,
                epoch=epoch,
                seed=cfg.seed,
                config_hash=config_hash,
                norm=fold.stats.to_dict(),
                adam=adam,
                extra={"fold": fold.name, "disp_max": cfg.disp_max},
            )

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, cfg)
            model.train()
            perm = shuffle_rng.permutation(n)
            sums = {"corr": 0.0, "concat": 0.0, "total": 0.0}
            n_seen = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                if idx.size < 2:
                    continue  # train-mode batch norm needs >= 2 samples
                rgb = fold.train.rgb[idx]
                lwir = fold.train.lwir[idx]
                labels = labels_all[idx]
                with arena:
                    with Tape() as tape:
                        probs = model.forward_pair(Tensor(rgb), Tensor(lwir))
                        lc = (
                            head_loss(probs["corr"], labels, cfg.prob_clamp)
                            if "corr" in probs
                            else None
                        )
                        lk = (
                            head_loss(probs["concat"], labels, cfg.prob_clamp)
                            if "concat" in probs
                            else None
                        )
                        loss = total_loss(lc, lk, cfg.head_mode)
                    if cfg.head_mode == "both":
                        gap = abs(loss.item() - (lc.item() + lk.item()))
                        if gap > 1e-6:
                            raise AssertionError(
                                f"loss identity violated: |total-(corr+concat)|={gap}"
                            )
                    tape.backward(loss)
                    adam.step(lr)
                    w = idx.size
                    sums["corr"] += (lc.item() if lc else 0.0) * w
                    sums["concat"] += (lk.item() if lk else 0.0) * w
                    sums["total"] += loss.item() * w
                    n_seen += w

            model.eval()
            val_recall: dict = {}
            if fold.val_points:
                report, _ = P.evaluate_points(
                    model,
                    fold.sequences,
                    fold.val_points,
                    cfg.disp_max,
                    fold.stats,
                    thresholds=thresholds,
                    normalize=cfg.candidate_normalize,
                    name="val",
                )
                val_recall = dict(report.recalls)

            rec = EpochRecord(
                epoch=epoch,
                lr=lr,
                loss_corr=sums["corr"] / max(n_seen, 1),
                loss_concat=sums["concat"] / max(n_seen, 1),
                loss_total=sums["total"] / max(n_seen, 1),
                val_recall=val_recall,
                seconds=time.perf_counter() - t0,
            )
            history.append(rec)
            if log_fh:
                log_writer.writerow(_log_row(rec, thresholds))
                log_fh.flush()
                timing_writer.writerow([rec.epoch, f"{rec.seconds:.3f}"])
                timing_fh.flush()
            if not quiet:
                val_str = " ".join(
                    f"r@{t:g}={val_recall[t]:.3f}" for t in thresholds if t in val_recall
                )
                print(
                    f"epoch {epoch:3d} lr {lr:.5f} loss {rec.loss_total:.4f} {val_str}",
                    flush=True,
                )

            if fold.val_points:
                score = val_recall.get(SELECTION_THRESHOLD, -1.0)
                improved = score > best_recall or best_epoch < 0
            else:
                # no validation split: retain the latest epoch
                score, improved = -1.0, True
            if improved:
                best_epoch, best_recall = epoch, score
                save_best(epoch)
    except NumericalError:
        diverged = True
        if best_epoch < 0 and ckpt_path:
            ckpt_path = None  # nothing good to keep
    finally:
        if log_fh:
            log_fh.close()
            timing_fh.close()

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_recall=best_recall,
        model=model,
        checkpoint_path=ckpt_path,
        diverged=diverged,
    )
