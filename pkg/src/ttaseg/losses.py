"""Training and adaptation objectives.

The test-time objective is a confidence term (one minus the model's own
IoU estimate), a dual-resolution soft-Dice consistency term against an
EMA teacher weighted by the stream-normalized confidence, and a
channel-wise spatial-KL feature consistency term whose temperature is the
IoU estimate itself. The consistency weight and the temperature are
treated as detached scalars: they steer the loss but receive no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import binary_iou
from .model import SegOutputs
from .tensor import Tensor, log_softmax

EPSILON = 1e-6


@dataclass
class LossBreakdown:
    l_icm: float
    l_dpc: float
    l_ifc: float
    lambda_dpc: float
    total: float
    s_iou: float


class RunningMax:
    """Nondecreasing maximum of the confidence statistic over the stream."""

    def __init__(self):
        self.m = 0.0
        self.count = 0

    def update(self, s_iou: float):
        if not math.isfinite(s_iou):
            raise ValueError(f"RunningMax.update: non-finite confidence {s_iou}")
        self.m = max(self.m, -math.log(1.0 - s_iou + EPSILON))
        self.count += 1


def lambda_dpc(s_iou: float, running_max: RunningMax) -> float:
    """Per-image consistency weight, normalized by the stream maximum.

    The running max must already include the current sample, which makes
    the first image's weight exactly 1.
    """
    if running_max.count == 0:
        raise ValueError("lambda_dpc: running max was never updated")
    return -math.log(1.0 - s_iou + EPSILON) / running_max.m


def l_icm(s_iou: Tensor) -> Tensor:
    """Confidence maximization: 1 - S_IoU."""
    return 1.0 - s_iou


def soft_dice(a: Tensor, b: Tensor) -> Tensor:
    """1 - (2*sum(ab)+eps)/(sum(a)+sum(b)+eps) over probability maps."""
    if a.shape != b.shape:
        raise ValueError(f"soft_dice: shape mismatch {a.shape} vs {b.shape}")
    num = 2.0 * (a * b).sum() + EPSILON
    den = a.sum() + b.sum() + EPSILON
    return 1.0 - num / den


def l_dpc(student: SegOutputs, teacher: SegOutputs) -> Tensor:
    """Dual-resolution prediction consistency; the teacher side is detached."""
    if student.m_high.shape != teacher.m_high.shape or student.m_low.shape != teacher.m_low.shape:
        raise ValueError("l_dpc: student/teacher resolution mismatch")
    return (soft_dice(student.m_high.sigmoid(), teacher.m_high.detach().sigmoid())
            + soft_dice(student.m_low.sigmoid(), teacher.m_low.detach().sigmoid()))


def l_ifc(z_student: Tensor, z_teacher: Tensor, s_iou: float) -> Tensor:
    """Channel-wise spatial softmax KL(teacher || student), temperature = S_IoU.

    Inputs are (D, H, W) feature grids; each channel is normalized over
    its spatial positions independently and the divergence is averaged
    over all D*H*W entries.
    """
    if z_student.shape != z_teacher.shape:
        raise ValueError(f"l_ifc: shape mismatch {z_student.shape} vs {z_teacher.shape}")
    d, h, w = z_student.shape
    tau = float(s_iou) + EPSILON
    logp_s = log_softmax(z_student.reshape(d, h * w), axis=1, temperature=tau)
    logp_t = log_softmax(z_teacher.detach().reshape(d, h * w), axis=1, temperature=tau)
    p_t = logp_t.exp()
    return (p_t * (logp_t - logp_s)).sum() * (1.0 / (d * h * w))


def total_tta_loss(student: SegOutputs, teacher: SegOutputs, running_max: RunningMax,
                   lambda_ifc: float = 1.0):
    """Combined objective; returns the loss tensor and a float breakdown.

    The caller is responsible for updating ``running_max`` with the
    current sample first.
    """
    from .model import tokens_to_grid

    s_val = float(student.s_iou.data)
    weight = lambda_dpc(s_val, running_max)
    icm = l_icm(student.s_iou)
    dpc = l_dpc(student, teacher)
    ifc = l_ifc(tokens_to_grid(student.z), tokens_to_grid(teacher.z), s_val)
    total = icm + weight * dpc + lambda_ifc * ifc
    breakdown = LossBreakdown(
        l_icm=float(icm.data),
        l_dpc=float(dpc.data),
        l_ifc=float(ifc.data),
        lambda_dpc=weight,
        total=float(total.data),
        s_iou=s_val,
    )
    return total, breakdown


# -- pretraining and baseline objectives -------------------------------------


def iou_head_loss(s_iou: Tensor, m_high: Tensor, gt: np.ndarray) -> Tensor:
    """Squared error between the IoU estimate and the true IoU of the
    binarized fine mask; the target is a detached constant."""
    if m_high.shape != gt.shape:
        raise ValueError(f"iou_head_loss: shape mismatch {m_high.shape} vs {gt.shape}")
    target = binary_iou(m_high.data > 0.0, gt.astype(bool))
    return (s_iou - target) ** 2


def bce_with_logits(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Stable binary cross-entropy, mean over pixels."""
    y = Tensor(gt.astype(np.float64))
    return (y * (-logits).softplus() + (1.0 - y) * logits.softplus()).mean()


def entropy_loss(m_high: Tensor) -> Tensor:
    """Mean binary entropy of the fine-mask probabilities (TENT objective)."""
    p = m_high.sigmoid().clip(EPSILON, 1.0 - EPSILON)
    return -(p * p.log() + (1.0 - p) * (1.0 - p).log()).mean()
