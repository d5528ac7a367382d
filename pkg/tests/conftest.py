import numpy as np
import pytest

from msdisp.data import FoldSpec, SampleSet, build_fold
from msdisp.synth import SynthConfig, generate_dataset


def subset(samples: SampleSet, n: int, seed: int = 0) -> SampleSet:
    """Balanced random subset of a sample set."""
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(samples.labels == 1)
    neg = np.flatnonzero(samples.labels == 0)
    k = n // 2
    idx = np.concatenate([rng.choice(pos, k, replace=False), rng.choice(neg, k, replace=False)])
    idx.sort()
    return SampleSet(
        samples.rgb[idx], samples.lwir[idx], samples.labels[idx], samples.provenance[idx]
    )


@pytest.fixture(scope="session")
def synth_seqs():
    """Small synthetic dataset shared across tests (disparities within +-8)."""
    cfg = SynthConfig(
        width=208, height=128, n_frames=6, n_objects=3, points_per_frame=8,
        disp_low=-8, disp_high=8, margin=48, seed=5,
    )
    return generate_dataset(cfg, 3)


@pytest.fixture(scope="session")
def small_fold(synth_seqs):
    spec = FoldSpec(
        name="unit-fold",
        train=["synth01", "synth02"],
        val=["synth01", "synth02"],
        val_images=2,
        test=["synth03"],
    )
    return build_fold(spec, seed=5, loaded=synth_seqs)
