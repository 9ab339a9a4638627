#!/usr/bin/env python3
"""Produce benchmarks/pinned.json: the committed reference run.

Runs the pinned pretraining, the shift-recovery experiment (strategy
comparison on the mri-like stream) and the calibration experiment (frozen
vs curve-only adaptation on the ct-like stream), then derives the margins
the acceptance suite asserts against. Rerun after any change that affects
data generation, the model, or the adaptation loop, and commit the result.
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ttaseg import pretrain, synthdata  # noqa: E402
from ttaseg.adapt import AdaptConfig, AdaptEngine, run_calibration  # noqa: E402
from ttaseg.model import load_checkpoint  # noqa: E402

PRETRAIN_CONFIG = dict(epochs=10, lr=1e-3, seed=0, n_train=400, n_val=120)
SHIFT = dict(profile="mri-like", n_images=120, seeds=[0, 1, 2], stream_seed_base=1000)
CALIBRATION = dict(profile="ct-like", n_images=120, seeds=[0, 1, 2], stream_seed_base=2000)
# acceptance thresholds fixed up front, not tuned after the fact
PRETRAIN_MIN_DICE = 0.85
PRETRAIN_MIN_IOU_R = 0.6


def run_shift(model) -> dict:
    per_seed = {}
    for seed in SHIFT["seeds"]:
        stream = synthdata.gen_target(SHIFT["stream_seed_base"] + seed, SHIFT["n_images"], SHIFT["profile"])
        entry = {}
        for strategy in ("none", "mean-teacher", "sam-tta"):
            engine = AdaptEngine(model, AdaptConfig(strategy=strategy, seed=seed))
            rows = [engine.process(s)[1] for s in stream]
            entry[strategy] = float(np.mean([r.dice for r in rows]))
        entry["gain"] = entry["sam-tta"] - entry["none"]
        per_seed[str(seed)] = entry
        print(f"shift seed {seed}: {entry}")
    gains = [per_seed[str(s)]["gain"] for s in SHIFT["seeds"]]
    # margin: 80% of the worst observed per-seed gain, so small platform
    # deviations from the reference run still pass
    margin = round(0.8 * min(gains), 4)
    return {**SHIFT, "per_seed": per_seed, "min_gain": min(gains), "margin_dice": margin}


def run_calib(model) -> dict:
    per_seed = {}
    for seed in CALIBRATION["seeds"]:
        stream = synthdata.gen_target(CALIBRATION["stream_seed_base"] + seed,
                                      CALIBRATION["n_images"], CALIBRATION["profile"])
        report = run_calibration(model, stream, seed)
        per_seed[str(seed)] = {
            "r_off": report["modes"]["off"]["pearson_r"],
            "r_sbct_only": report["modes"]["sbct-only"]["pearson_r"],
            "delta": report["delta"],
        }
        print(f"calibration seed {seed}: {per_seed[str(seed)]}")
    return {**CALIBRATION, "per_seed": per_seed}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "benchmarks" / "pinned.json"))
    args = parser.parse_args()

    t0 = time.time()
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "reference.ckpt"
        summary = pretrain.pretrain(pretrain.PretrainConfig(**PRETRAIN_CONFIG), ckpt)
        print(f"pretrain: best_val_dice={summary['best_val_dice']:.4f} "
              f"iou_r={summary['final_val_pearson_r']:.4f} ({time.time()-t0:.0f}s)")
        model = load_checkpoint(ckpt)
        payload = {
            "pretrain": {
                "config": PRETRAIN_CONFIG,
                "best_val_dice": summary["best_val_dice"],
                "final_val_dice": summary["final_val_dice"],
                "final_val_pearson_r": summary["final_val_pearson_r"],
                "thresholds": {"min_val_dice": PRETRAIN_MIN_DICE, "min_val_iou_r": PRETRAIN_MIN_IOU_R},
            },
            "shift_recovery": run_shift(model),
            "calibration": run_calib(model),
            "wall_clock_sec": time.time() - t0,
        }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {out} ({time.time()-t0:.0f}s total)")


if __name__ == "__main__":
    main()
