"""Desk-scale convergence probe: how fast does val recall@3 rise per epoch?"""

import sys
import time

from msdisp.data import FoldSpec, build_fold
from msdisp.synth import SynthConfig, generate_dataset
from msdisp.train import TrainConfig, train

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 2e-3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 4
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 64
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 11
mode = sys.argv[5] if len(sys.argv) > 5 else "both"

t0 = time.time()
cfg = SynthConfig(n_frames=13, points_per_frame=15, seed=seed)
seqs = generate_dataset(cfg, 3)
spec = FoldSpec("fold1", ["synth01", "synth02"], ["synth01", "synth02"], 6, ["synth03"])
fold = build_fold(spec, seed=seed, loaded=seqs)
print(f"data: {fold.report} ({time.time()-t0:.0f}s)", flush=True)

tcfg = TrainConfig(
    lr0=lr, epochs=epochs, batch_size=batch, disp_max=40, seed=seed, head_mode=mode,
)
res = train(fold, tcfg)

from msdisp.predict import evaluate_points

res.model.eval()
report, _ = evaluate_points(
    res.model, fold.sequences, fold.test_points, 40, fold.stats, thresholds=(1, 3, 5)
)
print(f"TEST recall: {report.recalls} n={report.n} ({time.time()-t0:.0f}s total)", flush=True)
