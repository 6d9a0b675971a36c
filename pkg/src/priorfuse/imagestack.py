"""Image containers, normalization, color conversion and array persistence.

Images are stored channel-first (C, H, W) as float arrays, tagged with the
value range they live in ("raw" [0,255], "unit" [0,1], "centered"
[-0.5,0.5]) and a colorspace tag. Fusion maps are separate containers with
a hard [0,1] bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from skimage import color as skcolor

RANGE_RAW = "raw"
RANGE_UNIT = "unit"
RANGE_CENTERED = "centered"

CS_RGB = "RGB"
CS_LAB = "Lab"
CS_GRAY = "Gray"

# (lo, hi) per channel is uniform except for Lab, handled separately
_RANGE_BOUNDS = {
    RANGE_RAW: (0.0, 255.0),
    RANGE_UNIT: (0.0, 1.0),
    RANGE_CENTERED: (-0.5, 0.5),
}

_BOUNDS_TOL = 1e-4


class ImageError(ValueError):
    pass


@dataclass
class Image:
    """A (C, H, W) float image with range and colorspace tags.

    `check_bounds=False` skips the range check; needed for observations that
    legitimately leave the nominal range (unclipped additive noise).
    Finiteness is always enforced.
    """

    data: np.ndarray
    value_range: str = RANGE_UNIT
    colorspace: str = CS_RGB
    check_bounds: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ImageError(f"expected (C, H, W) data, got shape {self.data.shape}")
        if self.data.shape[0] not in (1, 3):
            raise ImageError(f"unsupported channel count {self.data.shape[0]}")
        if not np.all(np.isfinite(self.data)):
            raise ImageError("image contains non-finite values")
        if self.value_range not in _RANGE_BOUNDS:
            raise ImageError(f"unknown value range tag {self.value_range!r}")
        if self.check_bounds:
            self._check_bounds()

    def _check_bounds(self):
        if self.colorspace == CS_LAB:
            l, ab = self.data[:1], self.data[1:]
            if l.min() < -_BOUNDS_TOL or l.max() > 100 + _BOUNDS_TOL:
                raise ImageError("Lab L channel outside [0, 100]")
            if ab.size and (ab.min() < -128 - _BOUNDS_TOL or ab.max() > 127 + _BOUNDS_TOL):
                raise ImageError("Lab a/b channels outside [-128, 127]")
        else:
            lo, hi = _RANGE_BOUNDS[self.value_range]
            if self.data.min() < lo - _BOUNDS_TOL or self.data.max() > hi + _BOUNDS_TOL:
                raise ImageError(
                    f"data outside declared {self.value_range} range "
                    f"[{lo}, {hi}]: min={self.data.min()}, max={self.data.max()}"
                )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def copy(self) -> "Image":
        return Image(self.data.copy(), self.value_range, self.colorspace,
                     check_bounds=self.check_bounds)


@dataclass
class PhiMap:
    """Per-pixel, per-channel fusion weights, structurally bounded to [0,1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ImageError(f"expected (C, H, W) phi map, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ImageError("phi map contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ImageError(
                f"phi entries outside [0,1]: min={self.data.min()}, max={self.data.max()}"
            )

    @property
    def shape(self) -> tuple:
        return self.data.shape


def load_image(path) -> Image:
    """Load an 8-bit RGB or grayscale raster as a raw-range Image."""
    with PILImage.open(path) as im:
        if im.mode not in ("RGB", "L"):
            if im.mode in ("RGBA", "P", "I", "LA"):
                im = im.convert("RGB")
            else:
                raise ImageError(f"unsupported image mode {im.mode!r} in {path}")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
        cs = CS_GRAY
    else:
        arr = arr.transpose(2, 0, 1)
        cs = CS_RGB
    return Image(arr, RANGE_RAW, cs)


def save_image(path, img: Image) -> None:
    """Save a raw-range image as an 8-bit raster. Values are rounded, not rescaled."""
    if img.value_range != RANGE_RAW:
        raise ImageError("save_image expects a raw [0,255] image; denormalize first")
    arr = np.clip(np.rint(img.data), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        PILImage.fromarray(arr[0], mode="L").save(path)
    else:
        PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def normalize(img: Image) -> Image:
    """Map raw [0,255] intensities to the centered [-0.5, 0.5] range."""
    if img.value_range != RANGE_RAW:
        raise ImageError(f"normalize expects raw range, got {img.value_range!r}")
    return Image(img.data / 255.0 - 0.5, RANGE_CENTERED, img.colorspace,
                 check_bounds=img.check_bounds)


def denormalize(img: Image) -> Image:
    """Exact inverse of :func:`normalize`."""
    if img.value_range != RANGE_CENTERED:
        raise ImageError(f"denormalize expects centered range, got {img.value_range!r}")
    return Image((img.data + 0.5) * 255.0, RANGE_RAW, img.colorspace,
                 check_bounds=img.check_bounds)


def rgb_to_lab(img: Image) -> Image:
    """sRGB (unit range) to CIELAB under D65."""
    if img.colorspace != CS_RGB or img.value_range != RANGE_UNIT:
        raise ImageError("rgb_to_lab expects a unit-range RGB image")
    lab = skcolor.rgb2lab(img.data.transpose(1, 2, 0).astype(np.float64))
    return Image(lab.transpose(2, 0, 1), RANGE_UNIT, CS_LAB)


def lab_to_rgb(img: Image) -> Image:
    """CIELAB (conventional ranges) back to unit-range sRGB."""
    if img.colorspace != CS_LAB:
        raise ImageError("lab_to_rgb expects a Lab image")
    rgb = skcolor.lab2rgb(img.data.transpose(1, 2, 0).astype(np.float64))
    return Image(np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1), RANGE_UNIT, CS_RGB)


# ---------------------------------------------------------------------------
# Portable float array files
#
# ASCII header line: PFAF1 <ndim> <d0> ... <dtype=f32|f64> <endianness=LE>
# followed by a newline and the raw row-major payload.
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ArrayIOError(IOError):
    pass


def save_array(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.dtype == np.float64:
        tag, dt = "f64", _DTYPES["f64"]
    else:
        tag, dt = "f32", _DTYPES["f32"]
    grid = np.ascontiguousarray(grid, dtype=dt)
    if grid.size and not np.all(np.isfinite(grid)):
        raise ArrayIOError("refusing to save non-finite array")
    dims = " ".join(str(d) for d in grid.shape)
    header = f"PFAF1 {grid.ndim}{' ' + dims if dims else ''} {tag} LE\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise ArrayIOError(f"truncated header in {path}")
            if ch == b"\n":
                break
            header += ch
        fields = header.decode("ascii").split()
        if not fields or fields[0] != "PFAF1":
            raise ArrayIOError(f"bad magic in {path}: {fields[:1]}")
        try:
            ndim = int(fields[1])
            dims = tuple(int(d) for d in fields[2:2 + ndim])
            tag, endian = fields[2 + ndim], fields[3 + ndim]
        except (IndexError, ValueError) as exc:
            raise ArrayIOError(f"malformed header in {path}: {header!r}") from exc
        if len(dims) != ndim or tag not in _DTYPES or endian not in ("LE", "BE"):
            raise ArrayIOError(f"malformed header in {path}: {header!r}")
        dt = _DTYPES[tag]
        if endian == "BE":
            dt = dt.newbyteorder(">")
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(count * dt.itemsize)
        if len(payload) != count * dt.itemsize:
            raise ArrayIOError(f"payload size mismatch in {path}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims)
        return arr.astype(dt.newbyteorder("="))


def save_phi_map(path_array, phi: PhiMap, path_heatmap=None) -> None:
    """Persist a phi map exactly as a float array, optionally plus an 8-bit
    heatmap raster for visualization (channel-averaged)."""
    save_array(path_array, phi.data)
    if path_heatmap is not None:
        heat = np.clip(np.rint(phi.data.mean(axis=0) * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(heat, mode="L").save(path_heatmap)


def load_phi_map(path_array) -> PhiMap:
    return PhiMap(load_array(path_array))
