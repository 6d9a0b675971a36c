"""Forward degradation models and their bijective data-fidelity companions.

Each task pairs a forward map f with a lossless companion g_inverse that
lifts the observation back into output space: identity for inpainting and
additive noise, gray-channel duplication for colorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagestack import (
    CS_GRAY,
    CS_LAB,
    CS_RGB,
    Image,
    ImageError,
    RANGE_CENTERED,
    RANGE_RAW,
    RANGE_UNIT,
)

TASK_COLORIZATION = "colorization"
TASK_INPAINTING = "inpainting"
TASK_AWGN = "awgn"

MIN_PATCH_SIDE = 9

_RANGE_MIDPOINT = {RANGE_RAW: 127.5, RANGE_UNIT: 0.5, RANGE_CENTERED: 0.0}


@dataclass
class Mask:
    """Binary (H, W) grid; 1 marks masked (unobserved) pixels."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ImageError(f"mask must be 2-D, got shape {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ImageError("mask entries must be 0 or 1")
        self.data = self.data.astype(np.uint8)
        if self.data.size and self.data.min() == 1:
            raise ImageError("mask leaves no observed pixel")

    @property
    def shape(self):
        return self.data.shape

    def masked_fraction(self) -> float:
        return float(self.data.mean())


@dataclass
class DegradationSpec:
    """Task descriptor pairing the forward model with its bijective companion."""

    task: str
    mask: Mask | None = None
    sigma_n: float | None = None

    def __post_init__(self):
        if self.task not in (TASK_COLORIZATION, TASK_INPAINTING, TASK_AWGN):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == TASK_AWGN and self.sigma_n is not None and self.sigma_n < 0:
            raise ValueError("sigma_n must be nonnegative")
        if self.task == TASK_INPAINTING and self.mask is None:
            raise ValueError("inpainting spec requires a mask")

    def g_inverse(self, y: Image) -> Image:
        if self.task == TASK_COLORIZATION:
            return g_inverse_colorization(y)
        return g_inverse_identity(y)

    def to_dict(self) -> dict:
        d = {"task": self.task}
        if self.sigma_n is not None:
            d["sigma_n"] = float(self.sigma_n)
        return d


def degrade_colorization(x: Image) -> Image:
    """Drop color: return the CIELAB luminance channel of a unit-range RGB image."""
    from .imagestack import rgb_to_lab

    if x.colorspace != CS_RGB or x.value_range != RANGE_UNIT:
        raise ImageError("colorization degradation expects a unit-range RGB image")
    lab = rgb_to_lab(x)
    return Image(lab.data[:1].copy(), RANGE_UNIT, CS_GRAY, check_bounds=False)


def g_inverse_colorization(y: Image) -> Image:
    """Lift a luminance observation back to an achromatic RGB image.

    Each output channel equals the intensity-mapped gray channel; the map is
    injective, so no observed information is lost.
    """
    from .imagestack import lab_to_rgb

    if y.channels != 1:
        raise ImageError("g_inverse_colorization expects a single-channel input")
    lab = np.concatenate([y.data, np.zeros_like(y.data), np.zeros_like(y.data)])
    rgb = lab_to_rgb(Image(lab, RANGE_UNIT, CS_LAB, check_bounds=False))
    # achromatic Lab maps to exactly equal channels up to float error
    mean = rgb.data.mean(axis=0, keepdims=True)
    return Image(np.repeat(mean, 3, axis=0), RANGE_UNIT, CS_RGB)


def g_inverse_identity(y: Image) -> Image:
    return y.copy()


def central_mask(height: int, width: int, patch: int) -> Mask:
    """Square patch of 1s centered in the grid (floor offsets for odd gaps)."""
    if patch > min(height, width):
        raise ValueError(f"patch {patch} exceeds image extent {height}x{width}")
    if patch < 0:
        raise ValueError("patch must be nonnegative")
    m = np.zeros((height, width), dtype=np.uint8)
    top = (height - patch) // 2
    left = (width - patch) // 2
    m[top:top + patch, left:left + patch] = 1
    return Mask(m)


def sample_random_patches(height: int, width: int,
                          rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Patch records (top, left, patch_height, patch_width) for a random mask.

    Patch count is uniform on {2,3,4}. Per patch: the corner is uniform over
    pixel positions and each side is drawn from N(64, 32) truncated to
    [9, +inf), rounded to the nearest integer. A patch that does not fit the
    image is fully re-sampled (corner and size).
    """
    if min(height, width) < MIN_PATCH_SIDE:
        raise ValueError(f"image must be at least {MIN_PATCH_SIDE} pixels per side")
    patches = []
    n_patches = int(rng.integers(2, 5))
    for _ in range(n_patches):
        while True:
            top = int(rng.integers(0, height))
            left = int(rng.integers(0, width))
            ph = _truncnorm_side(rng)
            pw = _truncnorm_side(rng)
            if top + ph <= height and left + pw <= width:
                break
        patches.append((top, left, ph, pw))
    return patches


def sample_random_masks(height: int, width: int, rng: np.random.Generator) -> Mask:
    """Union mask of the patches drawn by :func:`sample_random_patches`."""
    m = np.zeros((height, width), dtype=np.uint8)
    for top, left, ph, pw in sample_random_patches(height, width, rng):
        m[top:top + ph, left:left + pw] = 1
    if m.min() == 1:
        # keep the mask valid; a fully covered image is astronomically rare
        m[0, 0] = 0
    return Mask(m)


def _truncnorm_side(rng: np.random.Generator) -> int:
    while True:
        s = rng.normal(64.0, 32.0)
        if s >= MIN_PATCH_SIDE:
            return int(np.rint(s))


def apply_mask(x: Image, m: Mask) -> Image:
    """Zero out masked pixels (range midpoint in the image's declared range)."""
    if x.data.shape[1:] != m.data.shape:
        raise ImageError(f"mask shape {m.data.shape} does not match image {x.shape}")
    fill = _RANGE_MIDPOINT[x.value_range]
    out = x.data.copy()
    out[:, m.data == 1] = fill
    return Image(out, x.value_range, x.colorspace, check_bounds=x.check_bounds)


def add_awgn(x: Image, sigma: float, rng: np.random.Generator) -> Image:
    """Additive white Gaussian noise; sigma is in 8-bit intensity units.

    The noise is not clipped, so the observation can leave the nominal range;
    that keeps the noise exactly Gaussian and the fidelity companion bijective.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    scale = sigma if x.value_range == RANGE_RAW else sigma / 255.0
    if scale == 0:
        return x.copy()
    noise = rng.normal(0.0, scale, size=x.data.shape)
    return Image(x.data + noise.astype(np.float32), x.value_range, x.colorspace,
                 check_bounds=False)


def sample_blind_sigma(rng: np.random.Generator,
                       low: float = 5.0, high: float = 50.0) -> float:
    """Blind noise level: uniform on [5, 50] in 8-bit units."""
    return float(rng.uniform(low, high))
