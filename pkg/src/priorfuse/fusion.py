"""Convex per-pixel fusion of the data-fidelity image and the prior
projection, plus summary statistics of the fusion map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagestack import CS_LAB, Image, ImageError, PhiMap


@dataclass
class FusionInput:
    observation: Image        # already lifted through the bijective companion
    phi: PhiMap
    prior_img: Image

    def __post_init__(self):
        if not (self.observation.shape == self.phi.shape == self.prior_img.shape):
            raise ImageError(
                f"fusion shapes disagree: obs {self.observation.shape}, "
                f"phi {self.phi.shape}, prior {self.prior_img.shape}")


def fuse(inp: FusionInput) -> Image:
    """x_hat = (1 - phi) . fidelity + phi . prior, pixel-wise.

    Every output pixel lies in the closed interval between its two sources.
    """
    p = inp.phi.data
    data = (1.0 - p) * inp.observation.data + p * inp.prior_img.data
    return Image(data, inp.observation.value_range, inp.observation.colorspace,
                 check_bounds=False)


def fuse_colorization(luminance: Image, phi_ab: np.ndarray,
                      prior_lab: Image, fidelity_lab: Image) -> Image:
    """Colorization fusion in Lab: the luminance channel passes through from
    the observation bit-exactly (it is never hallucinated), and the fusion
    weights apply to the a and b channels only."""
    if luminance.channels != 1:
        raise ImageError("luminance observation must be single-channel")
    if prior_lab.colorspace != CS_LAB or fidelity_lab.colorspace != CS_LAB:
        raise ImageError("prior and fidelity images must be Lab")
    phi_ab = np.asarray(phi_ab, dtype=np.float32)
    if phi_ab.shape != prior_lab.data[1:].shape:
        raise ImageError(f"phi_ab shape {phi_ab.shape} does not match ab channels")
    if phi_ab.min() < 0 or phi_ab.max() > 1:
        raise ImageError("phi entries outside [0,1]")
    ab = (1.0 - phi_ab) * fidelity_lab.data[1:] + phi_ab * prior_lab.data[1:]
    data = np.concatenate([luminance.data, ab])
    return Image(data, prior_lab.value_range, CS_LAB, check_bounds=False)


def hallucination_report(phi: PhiMap, bins: int = 64) -> dict:
    """How much of the output, at worst, is prior-derived."""
    flat = phi.data.astype(np.float64)
    hist, edges = np.histogram(flat, bins=bins, range=(0.0, 1.0))
    return {
        "global_mean": float(flat.mean()),
        "channel_means": [float(c.mean()) for c in flat],
        "fraction_above_half": float((flat > 0.5).mean()),
        "histogram": hist.tolist(),
        "bin_edges": edges.tolist(),
    }


def format_hallucination_report(report: dict) -> str:
    lines = [
        f"global_mean {report['global_mean']:.6f}",
        "channel_means " + " ".join(f"{m:.6f}" for m in report["channel_means"]),
        f"fraction_above_half {report['fraction_above_half']:.6f}",
        "histogram " + " ".join(str(c) for c in report["histogram"]),
    ]
    return "\n".join(lines) + "\n"
