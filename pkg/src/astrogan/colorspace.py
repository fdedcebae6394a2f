"""sRGB / grayscale / CIELAB conversions and the network normalization conventions.

All conversions use the sRGB primaries with a D65 reference white. The white
point is taken as the image of RGB (1, 1, 1) under the sRGB->XYZ matrix so
that reference white lands exactly on L=100, a=b=0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """Raised when an operation receives input violating its preconditions."""


class Space(str, enum.Enum):
    SRGB_8BIT = "srgb_8bit"
    SRGB_UNIT = "srgb_unit"
    LAB_RAW = "lab_raw"
    LAB_NORM = "lab_norm"
    GRAY_UNIT = "gray_unit"


# per-channel (low, high) bounds
_RANGES: dict[Space, tuple[tuple[float, float], ...]] = {
    Space.SRGB_8BIT: ((0.0, 255.0),) * 3,
    Space.SRGB_UNIT: ((0.0, 1.0),) * 3,
    Space.LAB_RAW: ((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)),
    Space.LAB_NORM: ((-1.0, 1.0),) * 3,
    Space.GRAY_UNIT: ((0.0, 1.0),),
}

LAB_L_SCALE = 50.0
LAB_AB_SCALE = 110.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """An H x W x C float raster tagged with its color space.

    Values are clamped into the declared range of ``space`` on construction
    and the stored array is read-only.
    """

    pixels: np.ndarray
    space: Space

    def __post_init__(self) -> None:
        space = Space(self.space)
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ContractError(f"pixels must be H x W x C, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        h, w, c = arr.shape
        if h <= 0 or w <= 0:
            raise ContractError(f"degenerate image dimensions {h}x{w}")
        if space is Space.LAB_NORM:
            # split_lab yields 1- and 2-channel pieces of a normalized Lab image
            if c not in (1, 2, 3):
                raise ContractError(f"{space.value} needs 1-3 channels, got {c}")
        elif c != len(_RANGES[space]):
            raise ContractError(
                f"{space.value} needs {len(_RANGES[space])} channels, got {c}"
            )
        ranges = _RANGES[space]
        if space is Space.LAB_NORM:
            lo = np.full(c, -1.0)
            hi = np.full(c, 1.0)
        else:
            lo = np.array([r[0] for r in ranges])
            hi = np.array([r[1] for r in ranges])
        arr = np.clip(arr, lo.astype(arr.dtype), hi.astype(arr.dtype))
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "space", space)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.space is other.space and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"ImageGrid({self.height}x{self.width}x{self.channels}, {self.space.value})"


def _expect(img: ImageGrid, *spaces: Space) -> None:
    if img.space not in spaces:
        names = " or ".join(s.value for s in spaces)
        raise ContractError(f"expected {names} image, got {img.space.value}")


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def srgb8_to_lab_array(rgb: np.ndarray) -> np.ndarray:
    """Array form of :func:`rgb_to_lab` for (..., 3) inputs in [0, 255]."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ SRGB_TO_XYZ.T / D65_WHITE
    fx, fy, fz = (_lab_f(xyz[..., i]) for i in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_srgb8_array(lab: np.ndarray) -> np.ndarray:
    """Array form of :func:`lab_to_rgb`; output clamped to [0, 255]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_finv(fx), _lab_finv(fy), _lab_finv(fz)], axis=-1) * D65_WHITE
    linear = np.clip(xyz @ XYZ_TO_SRGB.T, 0.0, 1.0)
    c = np.where(
        linear <= 0.0031308, 12.92 * linear, 1.055 * linear ** (1.0 / 2.4) - 0.055
    )
    return np.clip(c * 255.0, 0.0, 255.0)


def rgb_to_lab(img: ImageGrid) -> ImageGrid:
    _expect(img, Space.SRGB_8BIT)
    return ImageGrid(srgb8_to_lab_array(img.pixels), Space.LAB_RAW)


def lab_to_rgb(img: ImageGrid) -> ImageGrid:
    """Inverse of :func:`rgb_to_lab`. Out-of-gamut colors are clamped, never rejected."""
    _expect(img, Space.LAB_RAW)
    return ImageGrid(lab_to_srgb8_array(img.pixels), Space.SRGB_8BIT)


def normalize(img: ImageGrid, target: Space) -> ImageGrid:
    """Map between raw and network ranges.

    Supported pairs are LAB_RAW <-> LAB_NORM (L/50 - 1, a/110, b/110) and
    SRGB_8BIT <-> SRGB_UNIT (v/255). The reverse direction denormalizes.
    """
    target = Space(target)
    src = img.space
    px = np.asarray(img.pixels, dtype=np.float64)
    if src is Space.LAB_RAW and target is Space.LAB_NORM:
        out = np.empty_like(px)
        out[..., 0] = px[..., 0] / LAB_L_SCALE - 1.0
        out[..., 1:] = px[..., 1:] / LAB_AB_SCALE
    elif src is Space.LAB_NORM and target is Space.LAB_RAW:
        if img.channels != 3:
            raise ContractError("only full 3-channel LAB_NORM images can be denormalized")
        out = np.empty_like(px)
        out[..., 0] = (px[..., 0] + 1.0) * LAB_L_SCALE
        out[..., 1:] = px[..., 1:] * LAB_AB_SCALE
    elif src is Space.SRGB_8BIT and target is Space.SRGB_UNIT:
        out = px / 255.0
    elif src is Space.SRGB_UNIT and target is Space.SRGB_8BIT:
        out = px * 255.0
    else:
        raise ContractError(f"unsupported normalization {src.value} -> {target.value}")
    return ImageGrid(out, target)


def denormalize(img: ImageGrid) -> ImageGrid:
    """Undo :func:`normalize` for LAB_NORM or SRGB_UNIT images."""
    back = {Space.LAB_NORM: Space.LAB_RAW, Space.SRGB_UNIT: Space.SRGB_8BIT}
    if img.space not in back:
        raise ContractError(f"{img.space.value} is not a normalized space")
    return normalize(img, back[img.space])


def split_lab(img: ImageGrid) -> tuple[ImageGrid, ImageGrid]:
    """Split a normalized Lab image into the L condition and the (a, b) target."""
    _expect(img, Space.LAB_NORM)
    if img.channels != 3:
        raise ContractError(f"split_lab needs 3 channels, got {img.channels}")
    return (
        ImageGrid(img.pixels[..., :1], Space.LAB_NORM),
        ImageGrid(img.pixels[..., 1:], Space.LAB_NORM),
    )


def merge_lab(l_part: ImageGrid, ab_part: ImageGrid) -> ImageGrid:
    _expect(l_part, Space.LAB_NORM)
    _expect(ab_part, Space.LAB_NORM)
    if l_part.channels != 1 or ab_part.channels != 2:
        raise ContractError(
            f"merge_lab needs 1+2 channels, got {l_part.channels}+{ab_part.channels}"
        )
    if l_part.shape[:2] != ab_part.shape[:2]:
        raise ContractError(
            f"spatial mismatch: L {l_part.shape[:2]} vs ab {ab_part.shape[:2]}"
        )
    dtype = np.result_type(l_part.pixels, ab_part.pixels)
    merged = np.concatenate([l_part.pixels, ab_part.pixels], axis=-1).astype(dtype)
    return ImageGrid(merged, Space.LAB_NORM)


def rgb_to_gray(img: ImageGrid) -> ImageGrid:
    _expect(img, Space.SRGB_UNIT)
    return ImageGrid(img.pixels @ LUMA_WEIGHTS.astype(img.pixels.dtype), Space.GRAY_UNIT)


def to_uint8(img: ImageGrid) -> np.ndarray:
    """Round an SRGB_8BIT image to a uint8 H x W x 3 array."""
    _expect(img, Space.SRGB_8BIT)
    return np.rint(img.pixels).astype(np.uint8)
