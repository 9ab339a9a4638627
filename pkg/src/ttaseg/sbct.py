"""Self-adaptive per-channel intensity remapping via cubic Bezier curves.

Twelve unconstrained scalars u[c, j] parameterize three cubic curves, one
per output channel; sigmoid keeps the control heights inside (0, 1) and
the convex-hull property of Bezier curves keeps every remapped intensity
in [0, 1]. The curve is a pure function of pixel intensity, so two pixels
with equal value always map to equal outputs regardless of position.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, concat

# Control-point x coordinates: fixed, never trained.
X_NODES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)

N_CHANNELS = 3
N_POINTS = 4


class SbctParams:
    """Trainable curve heights in unconstrained (pre-sigmoid) form."""

    def __init__(self, u: Tensor):
        if u.shape != (N_CHANNELS, N_POINTS):
            raise ValueError(f"SbctParams: expected shape (3, 4), got {u.shape}")
        self.u = u

    @property
    def n_trainable(self) -> int:
        return self.u.size

    def heights(self) -> Tensor:
        """Control heights P[c, j] = sigmoid(u[c, j]), shape (3, 4)."""
        return self.u.sigmoid()

    def heights_array(self) -> np.ndarray:
        return _np_sigmoid(self.u.data)

    def clone(self) -> "SbctParams":
        t = Tensor(self.u.data, requires_grad=self.u.requires_grad)
        return SbctParams(t)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, s, 1.0 - s)


def init_identity(delta: float = 1e-3) -> SbctParams:
    """Parameters whose curves are each (nearly) the identity mapping.

    Heights j/3 give exact linear precision; endpoints are clamped to
    (delta, 1 - delta) so the logit is finite, which bounds the deviation
    from identity by delta.
    """
    heights = np.clip(np.array(X_NODES), delta, 1.0 - delta)
    u = np.log(heights / (1.0 - heights))
    return SbctParams(Tensor(np.tile(u, (N_CHANNELS, 1)), requires_grad=True))


def _bernstein_rows(t: np.ndarray) -> np.ndarray:
    """Cubic Bernstein basis evaluated at flat t, shape (4, t.size)."""
    t = t.reshape(-1)
    omt = 1.0 - t
    return np.stack([omt**3, 3.0 * t * omt**2, 3.0 * t**2 * omt, t**3])


def _check_unit_range(x: np.ndarray, what: str):
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{what}: values must lie in [0, 1], got range [{x.min():.6g}, {x.max():.6g}]")


def eval_curve(t, heights: Tensor) -> Tensor:
    """Evaluate one cubic curve at t in [0, 1]; differentiable in both arguments."""
    t = as_tensor(t)
    _check_unit_range(t.data, "eval_curve: t")
    if heights.shape != (N_POINTS,):
        raise ValueError(f"eval_curve: expected 4 control heights, got shape {heights.shape}")
    shape = t.shape
    n = max(t.size, 1)
    tf = t.reshape(1, n)
    omt = 1.0 - tf
    basis = concat([omt**3, 3.0 * tf * omt**2, 3.0 * tf**2 * omt, tf**3], axis=0)
    return (heights.reshape(1, N_POINTS) @ basis).reshape(shape)


def transform_gray(x: np.ndarray, params: SbctParams) -> Tensor:
    """Remap a single-channel image into three channels, one curve each.

    Output channel c at (h, w) is the c-th curve evaluated at x[h, w].
    Gradient flows into the 12 curve scalars.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"transform_gray: expected an HxW image, got shape {x.shape}")
    _check_unit_range(x, "transform_gray: input")
    basis = Tensor(_bernstein_rows(x))  # (4, H*W), constant
    out = params.heights() @ basis  # (3, H*W)
    return out.reshape(N_CHANNELS, *x.shape)


def transform_color(x: np.ndarray, params: SbctParams) -> Tensor:
    """Remap a three-channel image, channel c through its own curve."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != N_CHANNELS:
        raise ValueError(f"transform_color: expected a 3xHxW image, got shape {x.shape}")
    _check_unit_range(x, "transform_color: input")
    h, w = x.shape[1:]
    basis = np.stack([_bernstein_rows(x[c]) for c in range(N_CHANNELS)])  # (3, 4, H*W)
    out = (params.heights().reshape(N_CHANNELS, N_POINTS, 1) * Tensor(basis)).sum(axis=1)
    return out.reshape(N_CHANNELS, h, w)


def transform(x: np.ndarray, params: SbctParams) -> Tensor:
    return transform_gray(x, params) if np.asarray(x).ndim == 2 else transform_color(x, params)


def curve_samples(params: SbctParams, n: int = 65) -> np.ndarray:
    """Dense curve samples for diagnostics: columns (t, c1, c2, c3)."""
    t = np.linspace(0.0, 1.0, n)
    values = params.heights_array() @ _bernstein_rows(t)  # (3, n)
    return np.column_stack([t, values.T])


def curve_lut(params: SbctParams, bins: int = 256) -> np.ndarray:
    """Quantized lookup table (3, bins) for the image-export path.

    Not differentiable; the adaptation path always evaluates the curve
    analytically per pixel.
    """
    t = np.arange(bins, dtype=np.float64) / (bins - 1)
    return params.heights_array() @ _bernstein_rows(t)


def apply_lut(x: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Apply a curve LUT to a gray (HxW) or color (3xHxW) image."""
    bins = lut.shape[1]
    idx = np.clip(np.floor(x * (bins - 1) + 0.5).astype(int), 0, bins - 1)
    if x.ndim == 2:
        return np.stack([lut[c][idx] for c in range(N_CHANNELS)])
    return np.stack([lut[c][idx[c]] for c in range(N_CHANNELS)])
