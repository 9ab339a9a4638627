"""Supervised source-domain pretraining of the toy segmenter.

Trains every weight (no adapters at this stage) on synthetic color scenes
with oracle box prompts: soft Dice plus BCE on the fine mask, soft Dice on
the coarse mask against a box-averaged target, and a squared-error term
teaching the IoU head to predict the true IoU of its own binarized output.
The best-validation parameters are what gets checkpointed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import losses, metrics, synthdata
from .model import ModelConfig, SegModel, save_checkpoint
from .tensor import AdamState, adam_step, no_grad

# fixed offset separating the held-out validation stream from training data
VAL_SEED_OFFSET = 500_009


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    n_train: int = 2000
    n_val: int = 200
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    iou_weight: float = 1.0

    def __post_init__(self):
        if self.n_val <= 0:
            raise ValueError("PretrainConfig: n_val must be positive")
        if min(self.dice_weight, self.bce_weight, self.iou_weight) <= 0:
            raise ValueError("PretrainConfig: loss weights must be positive")


def downsample_mask(gt: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a binary mask into a soft low-resolution target."""
    h, w = gt.shape
    return gt.astype(np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def sample_loss(model: SegModel, sample: synthdata.StreamSample, cfg: PretrainConfig):
    out = model.forward(sample.image, sample.box)
    gt = sample.gt_mask
    factor = model.config.highres_size // model.config.lowres_size
    gt_low = downsample_mask(gt, factor)
    loss = (cfg.dice_weight * losses.soft_dice(out.m_high.sigmoid(), losses.Tensor(gt.astype(np.float64)))
            + cfg.bce_weight * losses.bce_with_logits(out.m_high, gt)
            + cfg.dice_weight * losses.soft_dice(out.m_low.sigmoid(), losses.Tensor(gt_low))
            + cfg.iou_weight * losses.iou_head_loss(out.s_iou, out.m_high, gt))
    return loss, out


def evaluate(model: SegModel, samples) -> dict:
    """Frozen inference over samples: mean Dice and IoU-head calibration.

    Grayscale inputs go through plain channel replication (the baseline
    convention for a three-channel model)."""
    rows = []
    for i, s in enumerate(samples):
        image = np.stack([s.image] * 3) if s.image.ndim == 2 else s.image
        with no_grad():
            out = model.forward(image, s.box)
        pred = out.m_high.data > 0.0
        rows.append(metrics.MetricsRow(
            index=i,
            dice=metrics.dice(pred, s.gt_mask),
            hd95=metrics.hd95(pred, s.gt_mask),
            pred_iou=float(out.s_iou.data),
            true_iou=metrics.binary_iou(pred, s.gt_mask),
            l_icm=1.0 - float(out.s_iou.data),
            l_dpc=0.0,
            l_ifc=0.0,
            lambda_dpc=0.0,
        ))
    sentinel = metrics.hd95_sentinel(samples[0].gt_mask.shape)
    summary = metrics.summarize(rows, sentinel)
    summary["rows"] = rows
    return summary


def pretrain(cfg: PretrainConfig, out_path, model_config: ModelConfig | None = None) -> dict:
    """Train from scratch and write the best-validation checkpoint.

    Returns a summary dict (per-epoch validation Dice, final calibration).
    Aborts with RuntimeError if the loss goes non-finite.
    """
    config = model_config or ModelConfig()
    if config.image_size != synthdata.CANVAS:
        raise ValueError(f"pretrain: model image_size {config.image_size} must match "
                         f"the {synthdata.CANVAS}px generator canvas")
    model = SegModel.build(config, seed=[cfg.seed, 23])
    train = synthdata.gen_source(cfg.seed, cfg.n_train)
    val = synthdata.gen_source(cfg.seed + VAL_SEED_OFFSET, cfg.n_val)

    state = AdamState()
    all_params = dict(model.params)
    for p in all_params.values():
        p.requires_grad = True

    best_dice = -1.0
    best_params = None
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 37, epoch]).permutation(len(train))
        for idx in order:
            loss, _ = sample_loss(model, train[idx], cfg)
            if not math.isfinite(float(loss.data)):
                raise RuntimeError(f"pretrain: non-finite loss at epoch {epoch}, sample {int(idx)}")
            loss.backward()
            adam_step(all_params, state, cfg.lr)
        val_summary = evaluate(model, val)
        history.append(val_summary["mean_dice"])
        if val_summary["mean_dice"] > best_dice:
            best_dice = val_summary["mean_dice"]
            best_params = {k: p.data.copy() for k, p in model.params.items()}

    for name, data in best_params.items():
        model.params[name].data = data
        model.params[name].requires_grad = False
    save_checkpoint(model, out_path)

    final = evaluate(model, val)
    return {
        "config": asdict(cfg),
        "val_dice_history": history,
        "best_val_dice": best_dice,
        "final_val_dice": final["mean_dice"],
        "final_val_pearson_r": final["pearson_r"],
        "checkpoint": str(out_path),
    }


def validate(model: SegModel, manifest_path, pad: int = 2) -> dict:
    """Frozen inference over a manifest, summarized."""
    pairs = synthdata.load_manifest(manifest_path)
    samples = [synthdata.load_sample(img, mask, pad) for img, mask in pairs]
    return evaluate(model, samples)
