"""Synthetic source/target scenes with a controlled domain shift.

The source domain is sharp, colored objects on textured backgrounds
(a stand-in for natural images); target domains are grayscale versions
degraded by an intensity nonlinearity t -> t**gamma, boundary blur and
additive noise. Geometry and appearance draws are shared across profiles
so the same (seed, index) denotes the same underlying scene everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import netpbm

CANVAS = 64
MIN_AREA = 16
KINDS = ("ellipse", "blob", "lesion")

# luma weights for color -> gray conversion (Rec. 601)
_LUMA = np.array([0.299, 0.587, 0.114])

# sub-stream tags so each random decision has its own generator
_TAG_APPEARANCE = 11
_TAG_SHIFT = 13
_TAG_GEOMETRY = 17
_TAG_NOISE = 19


@dataclass(frozen=True)
class ShiftProfile:
    """Degradation recipe applied on top of the shared scene rendering."""

    name: str
    grayscale: bool
    gamma_range: tuple
    blur_range: tuple
    noise_sigma: float


PROFILES = {
    "source": ShiftProfile("source", grayscale=False, gamma_range=(1.0, 1.0), blur_range=(0.0, 0.0), noise_sigma=0.01),
    "mri-like": ShiftProfile("mri-like", grayscale=True, gamma_range=(0.4, 0.7), blur_range=(1.0, 2.0), noise_sigma=0.05),
    "ct-like": ShiftProfile("ct-like", grayscale=True, gamma_range=(1.5, 2.5), blur_range=(0.5, 1.5), noise_sigma=0.03),
}


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box in pixel coordinates, exclusive upper bounds."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"BoxPrompt: degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")
        if min(self.x0, self.y0) < 0:
            raise ValueError("BoxPrompt: negative coordinates")

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


@dataclass
class StreamSample:
    """One test item: the prompt box is derived from gt once, up front;
    gt itself is only ever consumed by evaluation code. An all-background
    gt yields box=None (no prompt can be formed)."""

    image: np.ndarray  # (H, W) or (3, H, W), values in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    box: BoxPrompt | None


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one scene deterministically."""

    stream_seed: int
    index: int
    kind: str
    bg_color: tuple
    obj_color: tuple
    texture_amp: float
    gamma: float
    blur_sigma: float
    noise_sigma: float
    grayscale: bool
    canvas: int = CANVAS


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(list(key))


def sample_spec(seed: int, index: int, profile: ShiftProfile) -> SceneSpec:
    g = _rng(seed, index, _TAG_APPEARANCE)
    kind = KINDS[int(g.integers(len(KINDS)))]
    bg = g.uniform(0.15, 0.85, 3)
    # redraw until the object is visible in luminance too; hard (low-contrast)
    # scenes stay in the mix because 0.1 is a weak floor
    for _ in range(20):
        sign = np.where(g.uniform(size=3) < 0.5, -1.0, 1.0)
        sep = g.uniform(0.15, 0.55, 3)
        obj = np.clip(bg + sign * sep, 0.02, 0.98)
        if abs(float(_LUMA @ obj) - float(_LUMA @ bg)) >= 0.1:
            break
    tex = float(g.uniform(0.02, 0.12))
    s = _rng(seed, index, _TAG_SHIFT)
    gamma = float(s.uniform(*profile.gamma_range))
    blur = float(s.uniform(*profile.blur_range))
    return SceneSpec(
        stream_seed=seed,
        index=index,
        kind=kind,
        bg_color=tuple(bg),
        obj_color=tuple(obj),
        texture_amp=tex,
        gamma=gamma,
        blur_sigma=blur,
        noise_sigma=profile.noise_sigma,
        grayscale=profile.grayscale,
    )


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 7) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, (cells, cells))
    xs = np.linspace(0.0, cells - 1.0, size)
    i0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    f = xs - i0
    rows = coarse[i0] * (1.0 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _polar_mask(size: int, center, radius_fn) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    return np.hypot(dy, dx) <= radius_fn(np.arctan2(dy, dx))


def _blob(rng: np.random.Generator, size: int, center, r0: float) -> np.ndarray:
    amp = rng.uniform(0.0, 0.22, 4)
    pha = rng.uniform(0.0, 2.0 * np.pi, 4)

    def radius(ang):
        return r0 * (1.0 + sum(amp[k] * np.cos((k + 2) * ang + pha[k]) for k in range(4)))

    return _polar_mask(size, center, radius)


def _draw_mask(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    size = spec.canvas
    while True:
        center = rng.uniform(size * 0.3, size * 0.7, 2)
        if spec.kind == "ellipse":
            a, b = rng.uniform(6.0, 18.0, 2)
            theta = rng.uniform(0.0, np.pi)
            yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
            dy, dx = yy - center[0], xx - center[1]
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
            mask = u * u + v * v <= 1.0
        elif spec.kind == "blob":
            mask = _blob(rng, size, center, rng.uniform(7.0, 16.0))
        else:  # lesion: blob plus an overlapping satellite
            r0 = rng.uniform(7.0, 14.0)
            mask = _blob(rng, size, center, r0)
            offset = rng.uniform(-1.0, 1.0, 2) * r0
            mask |= _blob(rng, size, center + offset, r0 * rng.uniform(0.3, 0.6))
        if mask.sum() >= MIN_AREA:
            return mask


def render_scene(spec: SceneSpec):
    """Pre-degradation RGB rendering, returns (image (3,S,S), mask (S,S))."""
    rng = _rng(spec.stream_seed, spec.index, _TAG_GEOMETRY)
    size = spec.canvas
    field = _smooth_field(rng, size)
    mask = _draw_mask(rng, spec)
    shade = rng.uniform(0.0, 0.3)
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.hypot(yy - cy, xx - cx)
    dmax = d[mask].max() if d[mask].size else 1.0
    radial = 1.0 - shade * d / max(dmax, 1.0)
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = spec.bg_color[c] + spec.texture_amp * field
        img[c][mask] = (spec.obj_color[c] * radial)[mask]
    return np.clip(img, 0.0, 1.0), mask


def degrade(image: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Apply the shift recipe: grayscale, gamma, blur, then noise."""
    out = _LUMA @ image.reshape(3, -1) if spec.grayscale else image
    out = out.reshape((spec.canvas, spec.canvas) if spec.grayscale else image.shape)
    if spec.gamma != 1.0:
        out = out ** spec.gamma
    if spec.blur_sigma > 0:
        if out.ndim == 2:
            out = gaussian_filter(out, spec.blur_sigma)
        else:
            out = np.stack([gaussian_filter(out[c], spec.blur_sigma) for c in range(3)])
    if spec.noise_sigma > 0:
        noise = _rng(spec.stream_seed, spec.index, _TAG_NOISE).standard_normal(out.shape)
        out = out + spec.noise_sigma * noise
    return np.clip(out, 0.0, 1.0)


def _resolve_profile(profile) -> ShiftProfile:
    if isinstance(profile, ShiftProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown shift profile {profile!r}; known: {sorted(PROFILES)}") from None


def generate(seed: int, n: int, profile, pad: int = 2) -> list:
    """n StreamSamples drawn from the given profile, pure in (seed, index)."""
    prof = _resolve_profile(profile)
    samples = []
    for i in range(n):
        spec = sample_spec(seed, i, prof)
        rgb, mask = render_scene(spec)
        samples.append(StreamSample(degrade(rgb, spec), mask, oracle_box(mask, pad)))
    return samples


def gen_source(seed: int, n: int, pad: int = 2) -> list:
    return generate(seed, n, PROFILES["source"], pad)


def gen_target(seed: int, n: int, profile="mri-like", pad: int = 2) -> list:
    return generate(seed, n, profile, pad)


def oracle_box(gt_mask: np.ndarray, pad: int = 2) -> BoxPrompt:
    """Tight bounding box of the foreground, padded and clipped to the canvas."""
    ys, xs = np.nonzero(gt_mask)
    if ys.size == 0:
        raise ValueError("oracle_box: empty mask")
    h, w = gt_mask.shape
    return BoxPrompt(
        x0=float(max(xs.min() - pad, 0)),
        y0=float(max(ys.min() - pad, 0)),
        x1=float(min(xs.max() + 1 + pad, w)),
        y1=float(min(ys.max() + 1 + pad, h)),
    )


def boundary_gradient_stat(image: np.ndarray, mask: np.ndarray, band: int = 1) -> float:
    """Strong-edge Sobel response (90th percentile of the gradient
    magnitude) in a band around the mask contour.

    Gradients are aggregated across channels (root mean square), so a
    color image gets credit for chroma edges its grayscale collapse has
    lost; the upper percentile tracks the boundary's peak response, which
    a crisp step dominates while staying robust to the additive-noise
    floor that would swamp a plain band mean.
    """
    from scipy.ndimage import binary_dilation, sobel

    channels = image[None] if image.ndim == 2 else image
    mag2 = sum(sobel(c, axis=0) ** 2 + sobel(c, axis=1) ** 2 for c in channels) / len(channels)
    contour = mask & ~binary_dilation(~mask)
    zone = binary_dilation(contour, iterations=band)
    return float(np.percentile(np.sqrt(mag2[zone]), 90))


# -- dataset files ---------------------------------------------------------


def write_dataset(samples, out_dir) -> Path:
    """Write images/masks plus a manifest.csv with relative paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        ext = "pgm" if s.image.ndim == 2 else "ppm"
        img_name = f"img_{i:05d}.{ext}"
        mask_name = f"mask_{i:05d}.pgm"
        netpbm.write_image(out / img_name, s.image)
        netpbm.write_pgm(out / mask_name, s.gt_mask)
        rows.append((img_name, mask_name))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "mask"])
        writer.writerows(rows)
    return manifest


def load_manifest(path) -> list:
    """Pairs of (image_path, mask_path) resolved relative to the manifest."""
    path = Path(path)
    base = path.parent
    pairs = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["image", "mask"]:
            raise ValueError(f"manifest {path}: expected header image,mask")
        for row in reader:
            pairs.append((base / row["image"], base / row["mask"]))
    if not pairs:
        raise ValueError(f"manifest {path}: no samples")
    return pairs


def load_sample(img_path, mask_path, pad: int = 2) -> StreamSample:
    image = netpbm.read_pnm(img_path)
    mask = netpbm.read_pnm(mask_path) > 0.5
    box = oracle_box(mask, pad) if mask.any() else None
    return StreamSample(image, mask, box)
