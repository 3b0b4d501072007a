"""Image containers, Bayer CFA operators, bilinear demosaicking and noise synthesis.

Pixel values are normalized floating point in [0, 1]. Noise standard deviations
are expressed in 8-bit units and divided by 255 internally, following the usual
denoising-benchmark convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import convolve

from .errors import DataError, ShapeError

_CHANNEL_INDEX = {"R": 0, "G": 1, "B": 2}


class CfaPattern(Enum):
    """2x2 Bayer tile layout, naming the colors at offsets (0,0),(0,1),(1,0),(1,1)."""

    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"

    def channel_grid(self) -> np.ndarray:
        """2x2 array of RGB channel indices (0=R, 1=G, 2=B) for the tile."""
        s = self.value
        return np.array(
            [[_CHANNEL_INDEX[s[0]], _CHANNEL_INDEX[s[1]]],
             [_CHANNEL_INDEX[s[2]], _CHANNEL_INDEX[s[3]]]],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class PlanarImage:
    """Multi-channel float image stored channel-planar, shape (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ShapeError(f"expected (channels, height, width), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite samples")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def clipped(self) -> "PlanarImage":
        """Copy with all samples clamped to [0, 1]."""
        return PlanarImage(np.clip(self.data, 0.0, 1.0))


@dataclass(frozen=True)
class BayerFrame:
    """Single-channel mosaicked image plus the CFA phase it was sampled with.

    Width and height must be even so the frame splits exactly into 2x2 tiles.
    """

    data: np.ndarray
    pattern: CfaPattern = CfaPattern.RGGB

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"expected (height, width), got shape {arr.shape}")
        if arr.shape[0] % 2 or arr.shape[1] % 2:
            raise ShapeError(f"Bayer dimensions must be even, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("frame contains non-finite samples")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise: sigma in 8-bit units, optional range clipping."""

    sigma: float
    clip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def cfa_mask(pattern: CfaPattern, height: int, width: int) -> np.ndarray:
    """Binary (3, height, width) mask: 1 where the CFA samples that channel."""
    grid = pattern.channel_grid()
    mask = np.zeros((3, height, width), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            mask[grid[dy, dx], dy::2, dx::2] = 1.0
    return mask


def mosaic(rgb: PlanarImage, pattern: CfaPattern = CfaPattern.RGGB) -> BayerFrame:
    """Sample one color per pixel from an RGB image according to the CFA.

    The output at (r, c) is the input channel selected by the pattern at
    (r mod 2, c mod 2); the other two channels are discarded.
    """
    if rgb.channels != 3:
        raise ShapeError(f"mosaic expects 3 channels, got {rgb.channels}")
    if rgb.height % 2 or rgb.width % 2:
        raise ShapeError(f"mosaic expects even dimensions, got {rgb.height}x{rgb.width}")
    grid = pattern.channel_grid()
    out = np.empty((rgb.height, rgb.width), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy::2, dx::2] = rgb.data[grid[dy, dx], dy::2, dx::2]
    return BayerFrame(out, pattern)


def apply_mask(rgb: PlanarImage, pattern: CfaPattern = CfaPattern.RGGB) -> PlanarImage:
    """Zero every sample the CFA does not record, keeping the image 3-channel.

    Idempotent and linear; summing the result over channels reproduces the
    single-channel mosaic.
    """
    if rgb.channels != 3:
        raise ShapeError(f"apply_mask expects 3 channels, got {rgb.channels}")
    mask = cfa_mask(pattern, rgb.height, rgb.width)
    return PlanarImage(rgb.data * mask)


def embed_mosaic(frame: BayerFrame) -> np.ndarray:
    """Spread a mosaic into 3 channels: each sample sits in its CFA channel, rest 0."""
    out = np.zeros((3, frame.height, frame.width), dtype=np.float64)
    grid = frame.pattern.channel_grid()
    for dy in (0, 1):
        for dx in (0, 1):
            out[grid[dy, dx], dy::2, dx::2] = frame.data[dy::2, dx::2]
    return out


def pack_phases(frame: BayerFrame) -> PlanarImage:
    """Split a W x H mosaic into its four phase sub-images of size W/2 x H/2.

    Channel order follows the 2x2 offsets (0,0), (0,1), (1,0), (1,1).
    """
    d = frame.data
    planes = [d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2]]
    return PlanarImage(np.stack(planes, axis=0))


def unpack_phases(phases: PlanarImage, pattern: CfaPattern = CfaPattern.RGGB) -> BayerFrame:
    """Inverse of pack_phases: interleave four phase planes back into one mosaic."""
    if phases.channels != 4:
        raise ShapeError(f"unpack_phases expects 4 channels, got {phases.channels}")
    h, w = phases.height, phases.width
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2] = phases.data[0]
    out[0::2, 1::2] = phases.data[1]
    out[1::2, 0::2] = phases.data[2]
    out[1::2, 1::2] = phases.data[3]
    return BayerFrame(out, pattern)


# Interpolation kernels for bilinear demosaicking. Green uses the 4-neighbor
# cross, red/blue the row/column/diagonal neighbors. The same kernel convolved
# with the channel mask gives the normalization, which keeps border pixels
# defined (missing neighbors simply drop out of the average) and keeps the
# result exact at sampled positions.
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]])
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])


def demosaic_bilinear(frame: BayerFrame) -> PlanarImage:
    """Per-channel bilinear interpolation of the CFA samples.

    Output has the same spatial size as the input and reproduces every sampled
    value exactly.
    """
    mask = cfa_mask(frame.pattern, frame.height, frame.width)
    out = np.empty((3, frame.height, frame.width), dtype=np.float64)
    for c, kernel in enumerate((_KERNEL_RB, _KERNEL_G, _KERNEL_RB)):
        known = frame.data * mask[c]
        num = convolve(known, kernel, mode="constant", cval=0.0)
        den = convolve(mask[c], kernel, mode="constant", cval=0.0)
        out[c] = num / den
    return PlanarImage(out)


def add_noise(x, spec: NoiseSpec):
    """Add i.i.d. Gaussian noise N(0, (sigma/255)^2) to an image or frame.

    Deterministic for a fixed seed. With clip=True the result is clamped to
    [0, 1], modelling hardware range clipping.
    """
    if spec.sigma == 0:
        return x
    rng = np.random.default_rng(spec.seed)
    noisy = x.data + rng.normal(0.0, spec.sigma / 255.0, size=x.data.shape)
    if spec.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    if isinstance(x, BayerFrame):
        return BayerFrame(noisy, x.pattern)
    return PlanarImage(noisy)


# ---------------------------------------------------------------------------
# PNG I/O. RGB and single-channel, 8- or 16-bit. BayerFrames are persisted as
# 16-bit single-channel PNG plus a JSON sidecar carrying pattern and sigma.
# ---------------------------------------------------------------------------


def save_image(path, img: PlanarImage, bit_depth: int = 8) -> None:
    """Write a 1- or 3-channel image as PNG, clipping to [0, 1] first."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    peak = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    arr = np.clip(img.data, 0.0, 1.0)
    quant = np.round(arr * peak).astype(dtype)
    if img.channels == 1:
        pixels = quant[0]
    elif img.channels == 3:
        pixels = quant.transpose(1, 2, 0)[:, :, ::-1]  # cv2 wants BGR
    else:
        raise ShapeError(f"PNG export supports 1 or 3 channels, got {img.channels}")
    if not cv2.imwrite(str(path), pixels):
        raise DataError(f"failed to write {path}")


def load_image(path) -> PlanarImage:
    """Read an 8- or 16-bit PNG into a [0, 1] PlanarImage."""
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DataError(f"cannot read image {path}")
    peak = 255.0 if pixels.dtype == np.uint8 else 65535.0
    arr = pixels.astype(np.float64) / peak
    if arr.ndim == 2:
        return PlanarImage(arr[None])
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return PlanarImage(arr[:, :, ::-1].transpose(2, 0, 1))


def save_bayer(path, frame: BayerFrame, sigma: float = 0.0) -> None:
    """Write a mosaic as 16-bit PNG + `<basename>.json` sidecar with pattern/sigma."""
    path = Path(path)
    save_image(path, PlanarImage(frame.data[None]), bit_depth=16)
    sidecar = {"pattern": frame.pattern.value, "sigma": float(sigma)}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_bayer(path) -> tuple[BayerFrame, float]:
    """Read a mosaic PNG and its sidecar; returns (frame, sigma)."""
    path = Path(path)
    img = load_image(path)
    if img.channels != 1:
        raise DataError(f"{path} is not a single-channel mosaic")
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    frame = BayerFrame(img.data[0], CfaPattern(meta["pattern"]))
    return frame, float(meta.get("sigma", 0.0))
