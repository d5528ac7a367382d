"""Flat key-value config files, resolved run configuration, and hashing.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Every key can be overridden by a CLI flag; whatever a run actually used is
written back out next to its artifacts, and its hash rides in checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["parse_kv_file", "write_kv_file", "config_hash", "RunConfig"]


def parse_kv_file(path) -> dict:
    """Parse ``key = value`` lines; later keys win, comments and blanks skipped."""
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, kv: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(kv):
            fh.write(f"{key} = {kv[key]}\n")


def config_hash(kv: dict) -> str:
    """Stable short hash of a resolved configuration."""
    text = "\n".join(f"{k} = {kv[k]}" for k in sorted(kv))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """Command-independent settings shared by the CLI subcommands."""

    seed: int = 0
    patch: int = 36
    disp_max: int = 64
    heads: str = "both"
    fold: str = ""
    out: str = "runs/out"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    halve_every: int = 40
    jitter: str = "random"
    diagonal_cross: bool = False
    literal_negatives: bool = False
    candidate_softmax: bool = False
    threads: int = 0
    thresholds: str = "1,3,5"

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        """File values first, then non-None CLI overrides."""
        kv: dict = {}
        if config_path:
            kv.update(parse_kv_file(config_path))
        for key, val in (overrides or {}).items():
            if val is not None:
                kv[key] = str(val)
        cfg = cls()
        known = {f.name: f.type for f in fields(cls)}
        for key, val in kv.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            if isinstance(cur, bool):
                setattr(cfg, key, str(val).lower() in ("1", "true", "yes", "on"))
            elif isinstance(cur, int):
                setattr(cfg, key, int(val))
            elif isinstance(cur, float):
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, str(val))
        return cfg

    def as_kv(self) -> dict:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    def hash(self) -> str:
        return config_hash(self.as_kv())

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_kv_file(path, self.as_kv())

    def threshold_list(self) -> list:
        return [float(t) for t in self.thresholds.split(",") if t.strip()]
