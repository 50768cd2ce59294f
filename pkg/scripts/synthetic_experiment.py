"""Desk-scale end-to-end run on the planted-waveform dataset.

Generates 6 subjects x 200 epochs, trains fold 0 of a subject-wise 3-fold split
(3 train / 1 validation / 2 test subjects) and reports test metrics.

    python scripts/synthetic_experiment.py --out runs/synth --max-epochs 30
"""

import argparse
import json
import logging
import time
from pathlib import Path

from protosleep.checkpoint import save_checkpoint, to_model
from protosleep.data import DatasetConfig, assign_folds, load_dataset, normalize_recording
from protosleep.evaluation import metrics
from protosleep.losses import LossWeights
from protosleep.model import ModelConfig
from protosleep.synth import SynthConfig, generate_dataset
from protosleep.training import TrainConfig, fold_windows, run_inference, train_fold


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/synth")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--max-epochs", type=int, default=30)
    ap.add_argument("--patience", type=int, default=50)
    ap.add_argument("--projection-period", type=int, default=10)
    ap.add_argument("--l1", type=float, default=0.3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(SynthConfig(seed=args.data_seed), data_dir)
    recs = [normalize_recording(r) for r in load_dataset(data_dir)]
    dcfg = DatasetConfig()
    folds = assign_folds(recs, k=3, val_subjects=1, seed=args.data_seed)
    train, val, test = fold_windows(recs, folds, 0, dcfg)
    print(f"windows: train {len(train)} val {len(val)} test {len(test)}")

    cfg = TrainConfig(
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
        projection_period=args.projection_period or None,
        weights=LossWeights(l1=args.l1),
    )
    t0 = time.perf_counter()
    ckpt = train_fold(train, val, ModelConfig(), dcfg, cfg, log_path=out / "train.log.jsonl")
    elapsed = time.perf_counter() - t0
    save_checkpoint(ckpt, out / "model.ckpt")
    rep = metrics(run_inference(to_model(ckpt), test).confusion())
    summary = {"train_seconds": round(elapsed, 1), **ckpt.training["summary"], **rep.to_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("train_seconds", "best_epoch", "acc", "mf1", "kappa")}, indent=2))


if __name__ == "__main__":
    main()
