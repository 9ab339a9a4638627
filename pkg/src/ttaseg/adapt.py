"""Streaming test-time adaptation engine.

Per image: remap the input through the learnable curves, run the student,
run the EMA teacher on the same remapped image under stop-gradient, form
the combined objective, take one Adam step per parameter group (curve
scalars at their own rate; adapters and prompt encoder with weight
decay), EMA the teacher toward the student, and save a fresh post-update
forward as the prediction. State (parameters, optimizer moments, the
confidence running max) carries across the stream; a non-finite loss
skips the update for that image and logs the skip rather than aborting.

Baselines share the skeleton: entropy minimization with no teacher
("tent"), plain teacher-student consistency ("mean-teacher"), frozen
inference ("none"), and a calibration variant that freezes every model
weight and adapts only the curve scalars ("sbct-only").
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import losses, metrics, netpbm, sbct, synthdata
from .model import SegModel, save_checkpoint
from .tensor import AdamState, Tensor, adam_step, no_grad

log = logging.getLogger("ttaseg.adapt")

STRATEGIES = ("sam-tta", "tent", "mean-teacher", "none")
_ALL_STRATEGIES = STRATEGIES + ("sbct-only",)


@dataclass
class AdaptConfig:
    strategy: str = "sam-tta"
    lr_sbct: float = 0.01
    lr_lora_prompt: float = 0.001
    weight_decay: float = 1e-4
    ema_alpha: float = 0.95
    steps_per_image: int = 1
    lambda_ifc: float = 1.0
    seed: int = 0
    prompt_pad: int = 2
    reset_optimizer: bool = False
    update_max_every_step: bool = False

    def __post_init__(self):
        if self.strategy not in _ALL_STRATEGIES:
            raise ValueError(f"AdaptConfig: unknown strategy {self.strategy!r}")
        if min(self.lr_sbct, self.lr_lora_prompt) <= 0 or self.steps_per_image < 1:
            raise ValueError("AdaptConfig: rates and steps_per_image must be positive")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("AdaptConfig: ema_alpha must lie in (0, 1)")


def replicate_channels(image: np.ndarray) -> np.ndarray:
    """The plain channel-duplication baseline input."""
    image = np.asarray(image, dtype=np.float64)
    return np.stack([image] * 3) if image.ndim == 2 else image


def ema_update(teacher: SegModel, student: SegModel, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, every parameter."""
    if teacher.params.keys() != student.params.keys():
        raise ValueError("ema_update: parameter tree mismatch")
    for name in sorted(teacher.params):
        t = teacher.params[name]
        t.data = alpha * t.data + (1.0 - alpha) * student.params[name].data


class _StepResult:
    def __init__(self, ok, logged=None, outputs=None, reason=None):
        self.ok = ok
        self.logged = logged
        self.outputs = outputs
        self.reason = reason


_NAN_LOGGED = {"l_icm": float("nan"), "l_dpc": float("nan"), "l_ifc": float("nan"),
               "lambda_dpc": float("nan")}


class AdaptEngine:
    """Holds the adaptation state and processes one sample at a time."""

    def __init__(self, base_model: SegModel, config: AdaptConfig):
        self.cfg = config
        strategy = config.strategy
        self.uses_teacher = strategy in ("sam-tta", "mean-teacher", "sbct-only")
        self.uses_sbct = strategy in ("sam-tta", "sbct-only")
        self.uses_lora = strategy in ("sam-tta", "tent", "mean-teacher")

        self.student = base_model.clone()
        self.student.set_trainable(lambda name: False)
        if self.uses_lora:
            self.student.attach_lora(seed=[config.seed, 31])
            self.student.set_trainable(lambda name: ".lora_" in name or name.startswith("prompt."))
        self.sbct = sbct.init_identity() if self.uses_sbct else None
        self.teacher = self.student.clone() if self.uses_teacher else None
        if self.teacher is not None:
            self.teacher.set_trainable(lambda name: False)
        if strategy == "sbct-only":
            self.teacher_sbct = sbct.SbctParams(Tensor(self.sbct.u.data))
        else:
            self.teacher_sbct = None

        self.opt_sbct = AdamState()
        self.opt_model = AdamState()
        self.running_max = losses.RunningMax()
        self.index = 0
        self.skipped = []
        self.records = []  # per-image LossBreakdown, combined-objective strategies only

    def _student_input(self, image: np.ndarray) -> Tensor:
        if self.sbct is not None:
            return sbct.transform(image, self.sbct)
        return Tensor(replicate_channels(image))

    def _teacher_forward(self, image: np.ndarray, x_student: Tensor, box):
        with no_grad():
            if self.cfg.strategy == "sbct-only":
                x_t = sbct.transform(image, self.teacher_sbct)
            else:
                # same remapped input as the student, under stop-gradient
                x_t = x_student.detach()
            return self.teacher.forward(x_t, box)

    def _train_step(self, sample: synthdata.StreamSample, step: int) -> _StepResult:
        cfg = self.cfg
        x_s = self._student_input(sample.image)
        s_out = self.student.forward(x_s, sample.box)
        s_val = float(s_out.s_iou.data)
        if not math.isfinite(s_val):
            return _StepResult(False, outputs=s_out, reason="non-finite forward")

        if cfg.strategy == "tent":
            total = losses.entropy_loss(s_out.m_high)
            logged = {"l_icm": 1.0 - s_val, "l_dpc": 0.0, "l_ifc": 0.0, "lambda_dpc": 0.0}
        elif cfg.strategy == "mean-teacher":
            t_out = self._teacher_forward(sample.image, x_s, sample.box)
            total = losses.l_dpc(s_out, t_out)
            logged = {"l_icm": 1.0 - s_val, "l_dpc": float(total.data), "l_ifc": 0.0,
                      "lambda_dpc": 0.0}
        elif cfg.strategy == "sam-tta":
            t_out = self._teacher_forward(sample.image, x_s, sample.box)
            if step == 0 or cfg.update_max_every_step:
                self.running_max.update(s_val)
            total, bd = losses.total_tta_loss(s_out, t_out, self.running_max, cfg.lambda_ifc)
            self.records.append(bd)
            logged = {"l_icm": bd.l_icm, "l_dpc": bd.l_dpc, "l_ifc": bd.l_ifc,
                      "lambda_dpc": bd.lambda_dpc}
        else:  # sbct-only
            t_out = self._teacher_forward(sample.image, x_s, sample.box)
            if step == 0 or cfg.update_max_every_step:
                self.running_max.update(s_val)
            weight = losses.lambda_dpc(s_val, self.running_max)
            dpc = losses.l_dpc(s_out, t_out)
            total = losses.l_icm(s_out.s_iou) + weight * dpc
            self.records.append(losses.LossBreakdown(
                l_icm=1.0 - s_val, l_dpc=float(dpc.data), l_ifc=0.0,
                lambda_dpc=weight, total=float(total.data), s_iou=s_val))
            logged = {"l_icm": 1.0 - s_val, "l_dpc": float(dpc.data), "l_ifc": 0.0,
                      "lambda_dpc": weight}

        if not math.isfinite(float(total.data)):
            return _StepResult(False, outputs=s_out, reason="non-finite loss")

        total.backward()
        if self.sbct is not None and self.sbct.u.requires_grad:
            adam_step({"sbct.u": self.sbct.u}, self.opt_sbct, cfg.lr_sbct)
        model_trainable = self.student.trainable()
        if model_trainable:
            adam_step(model_trainable, self.opt_model, cfg.lr_lora_prompt, cfg.weight_decay)
        if cfg.strategy in ("sam-tta", "mean-teacher"):
            ema_update(self.teacher, self.student, cfg.ema_alpha)
        elif cfg.strategy == "sbct-only":
            u = self.teacher_sbct.u
            u.data = cfg.ema_alpha * u.data + (1.0 - cfg.ema_alpha) * self.sbct.u.data
        return _StepResult(True, logged=logged)

    def process(self, sample: synthdata.StreamSample):
        """Adapt on one sample and return (prediction mask, metrics row)."""
        i = self.index
        self.index += 1
        if self.cfg.reset_optimizer:
            self.opt_sbct = AdamState()
            self.opt_model = AdamState()

        if sample.box is None:
            # empty-mask sentinel: no prompt can be formed, nothing to adapt
            self._record_skip(i, "empty ground-truth mask, no prompt")
            pred = np.zeros(sample.gt_mask.shape, dtype=bool)
            return pred, self._row(i, pred, sample.gt_mask, float("nan"), _NAN_LOGGED)

        logged = {"l_icm": float("nan"), "l_dpc": 0.0, "l_ifc": 0.0, "lambda_dpc": 0.0}
        if self.cfg.strategy != "none":
            for step in range(self.cfg.steps_per_image):
                result = self._train_step(sample, step)
                if not result.ok:
                    self._record_skip(i, result.reason)
                    pred = result.outputs.m_high.data > 0.0
                    s_val = float(result.outputs.s_iou.data)
                    return pred, self._row(i, pred, sample.gt_mask,
                                           s_val if math.isfinite(s_val) else float("nan"),
                                           _NAN_LOGGED)
                logged = result.logged

        with no_grad():
            x = self._student_input(sample.image)
            out = self.student.forward(x, sample.box)
        pred = out.m_high.data > 0.0
        s_final = float(out.s_iou.data)
        if self.cfg.strategy == "none":
            logged = {"l_icm": 1.0 - s_final, "l_dpc": 0.0, "l_ifc": 0.0, "lambda_dpc": 0.0}
        return pred, self._row(i, pred, sample.gt_mask, s_final, logged)

    def _record_skip(self, index: int, reason: str):
        self.skipped.append({"index": index, "reason": reason})
        log.warning("image %d: adaptation skipped (%s)", index, reason)

    def _row(self, index, pred, gt, pred_iou, logged) -> metrics.MetricsRow:
        return metrics.MetricsRow(
            index=index,
            dice=metrics.dice(pred, gt),
            hd95=metrics.hd95(pred, gt),
            pred_iou=pred_iou,
            true_iou=metrics.binary_iou(pred, gt),
            **logged,
        )

    def dump_sbct(self, index: int, image: np.ndarray, out_dir):
        """Diagnostic export: curve samples as CSV plus the remapped
        pseudo-color composite (LUT path, not differentiable)."""
        if self.sbct is None:
            return
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        samples = sbct.curve_samples(self.sbct, n=65)
        lines = ["t,c1,c2,c3"]
        lines += [",".join(repr(v) for v in row) for row in samples]
        (out / f"sbct_{index:05d}.csv").write_text("\n".join(lines) + "\n")
        composite = sbct.apply_lut(image, sbct.curve_lut(self.sbct))
        netpbm.write_ppm(out / f"composite_{index:05d}.ppm", composite)


def adapt_stream(model: SegModel, samples, config: AdaptConfig, out_dir,
                 dump_sbct_dir=None, extra_run_info: dict | None = None) -> dict:
    """Run a whole stream in order, writing predictions, metrics.csv,
    the adapted checkpoint, and a replayable run.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    engine = AdaptEngine(model, config)
    rows = []
    shape = None
    t0 = time.time()
    for i, sample in enumerate(samples):
        if isinstance(sample, Exception):
            raise RuntimeError(f"adapt_stream: unreadable sample at index {i}") from sample
        shape = sample.gt_mask.shape
        pred, row = engine.process(sample)
        rows.append(row)
        netpbm.write_pgm(out / f"pred_{i:05d}.pgm", pred)
        if dump_sbct_dir is not None:
            engine.dump_sbct(i, sample.image, dump_sbct_dir)
    if not rows:
        raise ValueError("adapt_stream: empty stream")
    metrics.write_metrics_csv(rows, out / "metrics.csv")
    save_checkpoint(engine.student, out / "adapted.ckpt")
    summary = metrics.summarize(rows, metrics.hd95_sentinel(shape))
    run_info = {
        "config": asdict(config),
        "n_images": len(rows),
        "skipped": engine.skipped,
        "summary": summary,
        "wall_clock_sec": time.time() - t0,
    }
    if engine.sbct is not None:
        run_info["sbct_u"] = engine.sbct.u.data.tolist()
        run_info["sbct_heights"] = engine.sbct.heights_array().tolist()
    if extra_run_info:
        run_info.update(extra_run_info)
    (out / "run.json").write_text(json.dumps(run_info, indent=2) + "\n")
    return {"rows": rows, "summary": summary, "engine": engine, "out_dir": str(out)}


def load_stream(manifest_path, pad: int = 2):
    """Samples from a manifest, in manifest order; unreadable files abort
    with their index."""
    pairs = synthdata.load_manifest(manifest_path)
    out = []
    for i, (img, mask) in enumerate(pairs):
        try:
            out.append(synthdata.load_sample(img, mask, pad))
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"stream sample {i} unreadable ({img}): {exc}") from exc
    return out


def run_calibration(model: SegModel, samples, seed: int, modes=("off", "sbct-only"),
                    base_config: AdaptConfig | None = None) -> dict:
    """Correlation between the model's IoU estimate and true IoU with the
    model frozen, input curves either fixed (off) or adapted (sbct-only)."""
    report = {"seed": seed, "n": len(samples), "modes": {}}
    for mode in modes:
        if mode not in ("off", "sbct-only"):
            raise ValueError(f"run_calibration: invalid mode {mode!r}")
        strategy = "none" if mode == "off" else "sbct-only"
        cfg_kwargs = asdict(base_config) if base_config else {}
        cfg_kwargs.update(strategy=strategy, seed=seed)
        engine = AdaptEngine(model, AdaptConfig(**cfg_kwargs))
        rows = [engine.process(s)[1] for s in samples]
        pairs = [(r.pred_iou, r.true_iou) for r in rows
                 if math.isfinite(r.pred_iou) and math.isfinite(r.true_iou)]
        r_val = metrics.pearson_r([p for p, _ in pairs], [t for _, t in pairs])
        report["modes"][mode] = {"pearson_r": r_val, "rows": rows}
    if {"off", "sbct-only"} <= set(report["modes"]):
        report["delta"] = (report["modes"]["sbct-only"]["pearson_r"]
                           - report["modes"]["off"]["pearson_r"])
    return report
