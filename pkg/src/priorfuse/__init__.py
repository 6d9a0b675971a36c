"""Image restoration with decoupled data fidelity and learned-prior
hallucination: prior backends, a learned per-pixel fusion map, and the
experiment pipeline around them."""

from .imagestack import (
    Image,
    PhiMap,
    denormalize,
    lab_to_rgb,
    load_array,
    load_image,
    normalize,
    rgb_to_lab,
    save_array,
    save_image,
)
from .fusion import FusionInput, fuse, fuse_colorization, hallucination_report
from .metrics import auc_colorization, pearson, psnr, ssim

__all__ = [
    "Image",
    "PhiMap",
    "FusionInput",
    "auc_colorization",
    "denormalize",
    "fuse",
    "fuse_colorization",
    "hallucination_report",
    "lab_to_rgb",
    "load_array",
    "load_image",
    "normalize",
    "pearson",
    "psnr",
    "rgb_to_lab",
    "save_array",
    "save_image",
    "ssim",
]

__version__ = "0.1.0"
