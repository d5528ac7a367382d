"""Sparse RGB-LWIR disparity estimation with a domain-siamese patch network."""

__version__ = "0.1.0"

# Lazy re-exports keep `import msdisp` light so the CLI can cap BLAS threads
# via environment variables before numpy loads.
_EXPORTS = {
    "Tensor": "tensor",
    "Tape": "tensor",
    "ScratchArena": "tensor",
    "NumericalError": "tensor",
    "gradient_check": "gradcheck",
    "check_parameter_slice": "gradcheck",
    "GradCheckReport": "gradcheck",
    "PatchMatcher": "model",
    "DomainTower": "model",
    "ClassificationHead": "model",
    "fuse_correlation": "model",
    "fuse_concatenation": "model",
    "classify": "model",
    "save_checkpoint": "model",
    "load_checkpoint": "model",
    "GroundTruthPoint": "data",
    "SequenceData": "data",
    "NormStats": "data",
    "FoldSpec": "data",
    "build_fold": "data",
    "load_sequence": "data",
    "parse_fold_spec": "data",
    "SynthConfig": "synth",
    "generate_sequence": "synth",
    "generate_dataset": "synth",
    "TrainConfig": "train",
    "Adam": "train",
    "train": "train",
    "head_loss": "train",
    "total_loss": "train",
    "lr_at": "train",
    "predict": "predict",
    "predict_points": "predict",
    "evaluate_points": "predict",
    "regress_disparity": "predict",
    "average_heads": "predict",
    "recall": "predict",
    "RunConfig": "config",
    "run_gradcheck_suite": "verify",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'msdisp' has no attribute {name!r}")
    import importlib

    mod = importlib.import_module(f".{module}", __name__)
    value = getattr(mod, name)
    globals()[name] = value
    return value
