"""Operator entry point: synth, convert, train, eval, predict, gradcheck.

Every subcommand reads an optional flat key=value config file; any key can
be overridden by a flag.  The resolved configuration is written next to the
artifacts each command produces.  Exit codes: 0 success, 1 usage error,
2 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_thread_cap(threads: int) -> None:
    # must run before numpy is imported anywhere in this process
    if threads and threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msdisp", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sp.add_argument("--sequences", type=int, default=3)
    sp.add_argument("--frames", type=int, default=12)
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--height", type=int, default=160)
    sp.add_argument("--objects", type=int, default=4)
    sp.add_argument("--points-per-frame", type=int, default=14)
    sp.add_argument("--disp-range", type=int, default=20, help="max |signed disparity|")
    sp.add_argument("--val-images", type=int, default=6)

    cv = sub.add_parser("convert", parents=[common], help="convert annotations to gt.csv")
    cv.add_argument("--format", choices=("pairs", "disp"), required=True)
    cv.add_argument("--input", required=True)
    cv.add_argument("--output", required=True)

    tr = sub.add_parser("train", parents=[common], help="train on a fold")
    tr.add_argument("--fold", default=None, help="fold spec file")
    tr.add_argument("--heads", choices=("both", "corr", "concat"), default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--disp-max", type=int, default=None)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a fold")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--fold", default=None)
    ev.add_argument("--thresholds", default=None, help="comma list, e.g. 1,3,5")
    ev.add_argument("--disp-max", type=int, default=None)

    pr = sub.add_parser("predict", parents=[common], help="predict disparities for a sequence")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--sequence", required=True, help="sequence directory")
    pr.add_argument("--points", default=None, help="gt.csv-format query points")
    pr.add_argument("--disp-max", type=int, default=None)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification")
    return p


def _run_config(args, extra: dict):
    from .config import RunConfig

    overrides = {"seed": args.seed, "out": args.out}
    overrides.update(extra)
    return RunConfig.load(args.config, overrides)


def cmd_synth(args) -> int:
    import numpy as np
    from PIL import Image

    from .config import write_kv_file
    from .synth import SynthConfig, generate_sequence

    cfg = _run_config(args, {})
    out = Path(args.out or "synth_data")
    scfg = SynthConfig(
        width=args.width,
        height=args.height,
        n_frames=args.frames,
        n_objects=args.objects,
        points_per_frame=args.points_per_frame,
        disp_low=-args.disp_range,
        disp_high=args.disp_range,
        seed=cfg.seed,
    )
    scfg.validate()
    names = []
    for i in range(1, args.sequences + 1):
        name = f"seq{i:02d}"
        names.append(name)
        seq, _ = generate_sequence(scfg, name)
        (out / name / "rgb").mkdir(parents=True, exist_ok=True)
        (out / name / "lwir").mkdir(parents=True, exist_ok=True)
        for f in range(seq.n_frames):
            Image.fromarray(seq.rgb[f]).save(out / name / "rgb" / f"{f:06d}.png")
            Image.fromarray(seq.lwir[f]).save(out / name / "lwir" / f"{f:06d}.png")
        with open(out / name / "gt.csv", "w") as fh:
            fh.write("frame,x,y,d\n")
            for pt in seq.points:
                fh.write(f"{pt.frame},{pt.x},{pt.y},{pt.d}\n")
    # fold spec: last sequence is the held-out test video
    folds = out / "folds"
    folds.mkdir(exist_ok=True)
    train_names = names[:-1] if len(names) > 1 else names
    spec_kv = {
        "name": "fold1",
        "train": ", ".join(f"../{n}" for n in train_names),
        "val": ", ".join(f"../{n}" for n in train_names),
        "val_images": str(args.val_images),
        "test": f"../{names[-1]}" if len(names) > 1 else "",
    }
    write_kv_file(folds / "fold1.cfg", spec_kv)
    manifest = {
        "sequences": names,
        "seed": cfg.seed,
        "width": args.width,
        "height": args.height,
        "frames": args.frames,
        "disp_range": args.disp_range,
        "fold_specs": ["folds/fold1.cfg"],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    cfg.write(out / "resolved.cfg")
    print(f"wrote {len(names)} sequences to {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .data import DataFormatError

    src, dst = Path(args.input), Path(args.output)
    rows_out = []
    with open(src) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.replace(";", ",").replace("\t", ",").split(",") if p != ""]
            if lineno == 1 and any(not _is_int(p) for p in parts):
                continue  # header line
            try:
                vals = [int(float(p)) for p in parts]
            except ValueError:
                raise DataFormatError(f"{src}:{lineno}: non-numeric row {line!r}") from None
            if args.format == "pairs":
                if len(vals) != 5:
                    raise DataFormatError(
                        f"{src}:{lineno}: pairs format needs frame,x_rgb,y_rgb,x_lwir,y_lwir"
                    )
                frame, xr, yr, xl, yl = vals
                if yr != yl:
                    raise DataFormatError(
                        f"{src}:{lineno}: correspondence rows differ ({yr} vs {yl}); "
                        "input must be rectified"
                    )
                rows_out.append((frame, xr, yr, xl - xr))
            else:
                if len(vals) != 4:
                    raise DataFormatError(f"{src}:{lineno}: disp format needs frame,x,y,d")
                rows_out.append(tuple(vals))
    dst.parent.mkdir(parents=True, exist_ok=True)
    with open(dst, "w") as fh:
        fh.write("frame,x,y,d\n")
        for row in rows_out:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"wrote {len(rows_out)} points to {dst}")
    return EXIT_OK


def _is_int(s: str) -> bool:
    try:
        int(float(s))
        return True
    except ValueError:
        return False


def cmd_train(args) -> int:
    from .data import build_fold, parse_fold_spec
    from .train import TrainConfig, train

    cfg = _run_config(args, _train_overrides(args))
    if not cfg.fold:
        print("error: train requires --fold (or fold= in the config)", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = parse_fold_spec(cfg.fold)
    fold = build_fold(
        spec,
        seed=cfg.seed,
        jitter=cfg.jitter,
        diagonal_cross=cfg.diagonal_cross,
    )
    print(
        f"fold {fold.name}: {len(fold.train)} train samples "
        f"({fold.train.n_positive} pos / {fold.train.n_negative} neg), "
        f"{len(fold.val_points)} val points, {len(fold.test_points)} test points"
    )
    tcfg = TrainConfig(
        lr0=cfg.lr,
        halve_every=cfg.halve_every,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        disp_max=cfg.disp_max,
        patch=cfg.patch,
        seed=cfg.seed,
        head_mode=cfg.heads,
        candidate_normalize="softmax" if cfg.candidate_softmax else "sum",
    )
    cfg.write(out / "resolved.cfg")
    result = train(fold, tcfg, out_dir=out, config_hash=cfg.hash())
    if result.diverged:
        print("training diverged (non-finite loss); best checkpoint kept", file=sys.stderr)
        return EXIT_NUMERICAL
    print(
        f"best epoch {result.best_epoch} (val recall@3 {result.best_recall:.4f}) "
        f"-> {result.checkpoint_path}"
    )
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        "fold": args.fold,
        "heads": args.heads,
        "epochs": args.epochs,
        "batch_size": getattr(args, "batch_size", None),
        "lr": args.lr,
        "disp_max": getattr(args, "disp_max", None),
    }


def _load_model_from_checkpoint(path):
    from .data import NormStats
    from .model import PatchMatcher, load_checkpoint

    probe = load_checkpoint(path)
    model = PatchMatcher(probe["head_mode"])
    load_checkpoint(path, model)
    model.eval()
    stats = NormStats.from_dict(probe["norm"]) if probe.get("norm") else None
    return model, stats, probe


def cmd_eval(args) -> int:
    from .data import load_sequence, parse_fold_spec
    from .predict import evaluate_points, write_predictions_csv, write_recall_csv

    cfg = _run_config(
        args,
        {"fold": args.fold, "thresholds": args.thresholds, "disp_max": getattr(args, "disp_max", None)},
    )
    if not cfg.fold:
        print("error: eval requires --fold (or fold= in the config)", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model, stats, meta = _load_model_from_checkpoint(args.checkpoint)
    if stats is None:
        print("error: checkpoint carries no normalization statistics", file=sys.stderr)
        return EXIT_USAGE
    if meta.get("config_hash") and meta["config_hash"] != cfg.hash():
        print(
            "warning: checkpoint was trained under a different configuration "
            f"(hash {meta['config_hash']} vs {cfg.hash()}); normalization statistics "
            "come from the checkpoint",
            file=sys.stderr,
        )
    spec = parse_fold_spec(cfg.fold)
    sequences, test_points = {}, []
    for path in spec.test:
        seq, _ = load_sequence(path)
        sequences[seq.name] = seq
        test_points.extend(seq.points)
    thresholds = cfg.threshold_list()
    report, preds = evaluate_points(
        model,
        sequences,
        test_points,
        cfg.disp_max,
        stats,
        thresholds=thresholds,
        normalize="softmax" if cfg.candidate_softmax else "sum",
        name=spec.name,
    )
    write_predictions_csv(out / "predictions.csv", preds)
    write_recall_csv(out / "recall_report.csv", [report])
    cfg.write(out / "resolved.cfg")
    header = " | ".join(f"<={t:g} px" for t in thresholds)
    print(f"{'scope':<16} {'n':>6} | {header}")
    rows = [(report.name, report.n, report.recalls)] + report.per_sequence
    for name, n, recalls in rows:
        vals = " | ".join(f"{recalls[t]:.3f}" for t in thresholds)
        print(f"{name:<16} {n:>6} | {vals}")
    if report.n_skipped:
        print(f"skipped {report.n_skipped} points whose widened patch leaves the frame")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_sequence, read_gt_csv
    from .predict import predict_points, write_predictions_csv

    cfg = _run_config(args, {"disp_max": getattr(args, "disp_max", None)})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model, stats, _ = _load_model_from_checkpoint(args.checkpoint)
    if stats is None:
        print("error: checkpoint carries no normalization statistics", file=sys.stderr)
        return EXIT_USAGE
    seq, report = load_sequence(args.sequence)
    points = (
        read_gt_csv(Path(args.points), seq.name) if args.points else seq.points
    )
    preds = predict_points(model, {seq.name: seq}, points, cfg.disp_max, stats)
    write_predictions_csv(out / "predictions.csv", preds)
    print(f"wrote {len(preds)} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_gradcheck_suite

    cfg = _run_config(args, {})
    t0 = time.perf_counter()
    checks = run_gradcheck_suite(seed=cfg.seed)
    failed = []
    for name, report in checks.items():
        status = "ok" if report.passed else "FAIL"
        print(f"{name:<28} max_rel_err {report.max_rel_err:.3e}  {status}")
        if not report.passed:
            failed.append(name)
    print(f"gradcheck finished in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "convert": cmd_convert,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        _apply_thread_cap(args.threads)
    from .tensor import NumericalError

    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
