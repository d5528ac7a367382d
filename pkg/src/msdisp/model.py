"""Domain-siamese patch matcher: two feature towers, two fusion heads.

Each imaging domain (RGB, LWIR) has its own nine-conv tower with identical
structure but independent weights; a 36x36x3 patch maps to a 256-D feature
vector.  Feature pairs are fused by elementwise product (correlation) and by
stacking (concatenation, RGB first), and each fused vector goes through its
own fully connected head ending in a 2-way softmax over same/different.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, Linear, relu
from .tensor import Tensor

__all__ = [
    "TOWER_LAYOUT",
    "HEAD_LAYOUT",
    "PARAM_COUNTS",
    "DomainTower",
    "ClassificationHead",
    "PatchMatcher",
    "fuse_correlation",
    "fuse_concatenation",
    "classify",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointMeta",
]

# (kernel, channels) per conv row; every row but the last is followed by
# batch norm and ReLU.  A 36x36 input shrinks 36->32->28->24->20->16->12->8->4->1.
TOWER_LAYOUT = [
    (5, 32),
    (5, 64),
    (5, 64),
    (5, 64),
    (5, 128),
    (5, 128),
    (5, 256),
    (5, 256),
    (4, 256),
]

PATCH = 36
FEATURE_DIM = 256

# fc widths: fused input -> 128 -> 64 -> 2
HEAD_LAYOUT = (128, 64, 2)

# trainable parameter totals per head mode, derived from the layouts above
# (tower: 4 382 208 each incl. BN affine; heads: 41 282 corr / 74 050 concat)
PARAM_COUNTS = {"both": 8_879_748, "corr": 8_805_698, "concat": 8_838_466}

HEAD_MODES = ("both", "corr", "concat")

# softmax class indices: column 1 is "same", column 0 is "different",
# matching the 1=same / 0=different sample labels
CLASS_SAME = 1
CLASS_DIFF = 0


class DomainTower:
    """Nine-conv feature extractor for one imaging domain."""

    def __init__(self, domain: str):
        self.domain = domain
        self.convs: list[Conv2d] = []
        self.bns: list[BatchNorm2d] = []
        c_in = 3
        for i, (k, c_out) in enumerate(TOWER_LAYOUT, start=1):
            self.convs.append(Conv2d(c_in, c_out, k, name=f"{domain}.conv{i}"))
            if i < len(TOWER_LAYOUT):
                self.bns.append(BatchNorm2d(c_out, name=f"{domain}.bn{i}"))
            c_in = c_out

    def forward(self, x: Tensor) -> Tensor:
        """Feature map (B, 256, H-35, W-35) for input (B, 3, H, W), H,W >= 36."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"{self.domain} tower expects (B, 3, H, W), got {x.shape}")
        if x.shape[2] < PATCH or x.shape[3] < PATCH:
            raise ValueError(
                f"{self.domain} tower needs spatial extent >= {PATCH}, got "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        for i, conv in enumerate(self.convs):
            x = conv.forward(x)
            if i < len(self.bns):
                x = self.bns[i].forward(x)
                x = relu(x)
        return x

    def features(self, x: Tensor) -> Tensor:
        """256-D feature vectors (B, 256) for exact 36x36 patches."""
        fmap = self.forward(x)
        b, c, h, w = fmap.shape
        if (h, w) != (1, 1):
            raise ValueError(
                f"features requires 36x36 input (got feature map {h}x{w}); "
                "use forward() for widened inputs"
            )
        return fmap.reshape((b, c))

    def set_training(self, flag: bool) -> None:
        for bn in self.bns:
            bn.training = flag

    def init(self, rng: np.random.Generator) -> None:
        for conv in self.convs:
            conv.init(rng)
        for bn in self.bns:
            bn.init(rng)

    def parameters(self):
        out = []
        for i, conv in enumerate(self.convs):
            out.extend(conv.parameters())
            if i < len(self.bns):
                out.extend(self.bns[i].parameters())
        return out

    def state(self):
        out = []
        for bn in self.bns:
            out.extend(bn.state())
        return out


class ClassificationHead:
    """fc stack mapping a fused vector to same/different probabilities."""

    def __init__(self, n_in: int, name: str):
        self.name = name
        n1, n2, n3 = HEAD_LAYOUT
        self.fc1 = Linear(n_in, n1, name=f"{name}.fc1")
        self.fc2 = Linear(n1, n2, name=f"{name}.fc2")
        self.fc3 = Linear(n2, n3, name=f"{name}.fc3")

    def forward(self, fused: Tensor) -> Tensor:
        """(N, 2) probabilities; rows sum to 1."""
        if fused.shape[1] != self.fc1.n_in:
            raise ValueError(
                f"{self.name} expects width {self.fc1.n_in}, got {fused.shape[1]}"
            )
        h = relu(self.fc1.forward(fused))
        h = relu(self.fc2.forward(h))
        return T.softmax(self.fc3.forward(h), axis=1)

    def init(self, rng: np.random.Generator) -> None:
        for fc in (self.fc1, self.fc2, self.fc3):
            fc.init(rng)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters() + self.fc3.parameters()


def fuse_correlation(f_rgb: Tensor, f_lwir: Tensor) -> Tensor:
    """Elementwise product of two (N, 256) feature batches."""
    return T.mul(f_rgb, f_lwir)


def fuse_concatenation(f_rgb: Tensor, f_lwir: Tensor) -> Tensor:
    """Stack feature vectors RGB-first into (N, 512)."""
    if f_rgb.shape != f_lwir.shape:
        raise ValueError(
            f"fuse_concatenation: feature shapes differ, {f_rgb.shape} vs {f_lwir.shape}"
        )
    return T.concat(f_rgb, f_lwir, axis=1)


def classify(head: ClassificationHead, fused: Tensor):
    """(p_same, p_diff) for a batch of fused vectors."""
    probs = head.forward(fused)
    return T.take_column(probs, CLASS_SAME), T.take_column(probs, CLASS_DIFF)


class PatchMatcher:
    """Full model: RGB tower, LWIR tower, correlation and concatenation heads."""

    def __init__(self, head_mode: str = "both", seed: Optional[int] = None):
        if head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {head_mode!r}")
        self.head_mode = head_mode
        self.tower_rgb = DomainTower("rgb")
        self.tower_lwir = DomainTower("lwir")
        self.head_corr = ClassificationHead(FEATURE_DIM, "head_corr")
        self.head_concat = ClassificationHead(2 * FEATURE_DIM, "head_concat")
        self.training = True
        n = sum(p.size for _, p in self.parameters())
        assert n == PARAM_COUNTS[head_mode], (
            f"parameter count {n} does not match the expected "
            f"{PARAM_COUNTS[head_mode]} for mode {head_mode}"
        )
        if seed is not None:
            self.init(seed)

    def init(self, seed: int) -> None:
        """Deterministic init of every component from one root seed."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
        self.tower_rgb.init(rng)
        self.tower_lwir.init(rng)
        self.head_corr.init(rng)
        self.head_concat.init(rng)

    def train(self) -> None:
        self.training = True
        self.tower_rgb.set_training(True)
        self.tower_lwir.set_training(True)

    def eval(self) -> None:
        self.training = False
        self.tower_rgb.set_training(False)
        self.tower_lwir.set_training(False)

    def active_heads(self) -> list[str]:
        return ["corr", "concat"] if self.head_mode == "both" else [self.head_mode]

    def parameters(self, head_mode: Optional[str] = None):
        """Ordered (name, tensor) pairs for the trainable set of a head mode."""
        mode = head_mode or self.head_mode
        out = self.tower_rgb.parameters() + self.tower_lwir.parameters()
        if mode in ("both", "corr"):
            out.extend(self.head_corr.parameters())
        if mode in ("both", "concat"):
            out.extend(self.head_concat.parameters())
        return out

    def named_state(self):
        """Every persistent array: parameters plus BN running statistics."""
        out = [(n, p.data) for n, p in self.parameters("both")]
        out.extend(self.tower_rgb.state())
        out.extend(self.tower_lwir.state())
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters("both"):
            p.zero_grad()

    def forward_pair(self, rgb: Tensor, lwir: Tensor) -> dict:
        """p_same per active head for batches of 36x36 patch pairs."""
        f_rgb = self.tower_rgb.features(rgb)
        f_lwir = self.tower_lwir.features(lwir)
        out = {}
        if "corr" in self.active_heads():
            p, _ = classify(self.head_corr, fuse_correlation(f_rgb, f_lwir))
            out["corr"] = p
        if "concat" in self.active_heads():
            p, _ = classify(self.head_concat, fuse_concatenation(f_rgb, f_lwir))
            out["concat"] = p
        return out


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + raw little-endian float32 records
# ---------------------------------------------------------------------------

_MAGIC = b"MSDCKPT1"


class CheckpointMeta(dict):
    """Header of a checkpoint file (epoch, seed, config hash, extras)."""


def save_checkpoint(
    path,
    model: PatchMatcher,
    epoch: int = 0,
    seed: int = 0,
    config_hash: str = "",
    norm: Optional[dict] = None,
    adam=None,
    extra: Optional[dict] = None,
) -> None:
    """Write model parameters, BN statistics, and optional optimizer state."""
    records = list(model.named_state())
    header = {
        "format": 1,
        "epoch": int(epoch),
        "seed": int(seed),
        "config_hash": config_hash,
        "head_mode": model.head_mode,
        "norm": norm,
        "adam_step": None,
        "extra": extra or {},
    }
    if adam is not None:
        header["adam_step"] = int(adam.step_count)
        for name, m, v in adam.state_arrays():
            records.append((f"adam.m.{name}", m))
            records.append((f"adam.v.{name}", v))
    header["tensors"] = [[name, list(arr.shape)] for name, arr in records]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in records:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, model: Optional[PatchMatcher] = None, adam=None) -> CheckpointMeta:
    """Read a checkpoint; optionally restore a model and optimizer in place.

    The stored name set must match the model's exactly; a mismatch raises.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated record {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f4").astype(
                np.float32
            ).reshape(shape)

    meta = CheckpointMeta(header)
    meta["arrays"] = arrays
    if model is not None:
        if header["head_mode"] != model.head_mode:
            raise ValueError(
                f"checkpoint head_mode {header['head_mode']!r} does not match "
                f"model {model.head_mode!r}"
            )
        expected = dict(model.named_state())
        stored = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        if missing or unexpected:
            raise ValueError(
                "checkpoint parameter names do not match the model "
                f"(missing {missing[:4]}, unexpected {unexpected[:4]})"
            )
        for name, dst in expected.items():
            src = stored[name]
            if tuple(src.shape) != tuple(dst.shape):
                raise ValueError(
                    f"checkpoint record {name} has shape {src.shape}, "
                    f"model expects {dst.shape}"
                )
            dst[:] = src
    if adam is not None:
        adam.load_from_checkpoint(meta)
    return meta
