"""
Color and radiometric primitives.

Holds the dense-array containers shared by every module (LinearImage,
GrayMap) and the conversions between them:
- gamma linearization and re-encoding (power law)
- grayscale conversion F() with Rec.709 weights on linear values
- rg chromaticity

All containers are immutable: their arrays are read-only float64.
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from iid_errors import ShapeMismatch, ValidationError

RANGE_EPS = 1e-6
CHROMA_EPS = 1e-4
REC709 = np.array([0.2126, 0.7152, 0.0722])


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _first_bad_pixel(bad: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(bad)[0])


@dataclass(frozen=True)
class GammaConfig:
    """Power-law display encoding."""

    gamma: float = 2.2

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValidationError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True, eq=False)
class LinearImage:
    """H x W x 3 linear-light RGB, clamped to [0, 1 + RANGE_EPS] on construction."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeMismatch(f"LinearImage needs an H x W x 3 array, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise ValidationError(f"LinearImage needs width and height >= 2, got {arr.shape[1]}x{arr.shape[0]}")
        bad = ~np.isfinite(arr)
        if bad.any():
            raise ValidationError(f"non-finite value at pixel {_first_bad_pixel(bad)}")
        object.__setattr__(self, 'data', _frozen(np.clip(arr, 0.0, 1.0 + RANGE_EPS)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True, eq=False)
class GrayMap:
    """H x W per-pixel scalar field (intensity, luminance, shade)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch(f"GrayMap needs an H x W array, got shape {arr.shape}")
        bad = ~np.isfinite(arr)
        if bad.any():
            raise ValidationError(f"non-finite value at pixel {_first_bad_pixel(bad)}")
        object.__setattr__(self, 'data', _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


ImageLike = Union[LinearImage, np.ndarray]
GrayLike = Union[GrayMap, np.ndarray]


def rgb_array(img: ImageLike) -> np.ndarray:
    """Return the float64 H x W x 3 array behind an image or raw array."""
    arr = img.data if isinstance(img, LinearImage) else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected an H x W x 3 array, got shape {arr.shape}")
    return arr


def gray_array(gray: GrayLike) -> np.ndarray:
    """Return the float64 H x W array behind a gray map or raw array."""
    arr = gray.data if isinstance(gray, GrayMap) else np.asarray(gray, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected an H x W array, got shape {arr.shape}")
    return arr


def validate_encoded(img: np.ndarray) -> np.ndarray:
    """Check an sRGB-encoded array is finite and within [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    bad = ~np.isfinite(arr) | (arr < 0.0) | (arr > 1.0)
    if bad.any():
        idx = _first_bad_pixel(bad)
        raise ValidationError(f"encoded value {arr[idx]!r} out of [0, 1] at pixel {idx[:2]}")
    return arr


def inverse_gamma(img: np.ndarray, cfg: GammaConfig = GammaConfig()) -> LinearImage:
    """
    Linearize a display-encoded image.

    Args:
        img: H x W x 3 encoded values in [0, 1]
        cfg: Power-law exponent

    Returns:
        LinearImage with out = in ** gamma
    """
    arr = validate_encoded(img)
    return LinearImage(np.power(arr, cfg.gamma))


def apply_gamma(img: ImageLike, cfg: GammaConfig = GammaConfig()) -> np.ndarray:
    """Re-encode linear values for display: out = in ** (1 / gamma)."""
    arr = img.data if isinstance(img, (LinearImage, GrayMap)) else np.asarray(img, dtype=np.float64)
    return np.power(np.clip(arr, 0.0, None), 1.0 / cfg.gamma)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """F(): Rec.709 luma of linear RGB along the last axis."""
    return np.asarray(rgb, dtype=np.float64) @ REC709


def luminance(img: ImageLike) -> GrayMap:
    """Grayscale conversion F() of a linear image."""
    return GrayMap(rgb_to_gray(rgb_array(img)))


def chromaticity(img: ImageLike) -> np.ndarray:
    """
    rg chromaticity (R, G) / (R + G + B).

    Pixels whose channel sum is below CHROMA_EPS take the neutral (1/3, 1/3).

    Returns:
        H x W x 2 array
    """
    rgb = rgb_array(img)
    total = rgb.sum(axis=-1, keepdims=True)
    degenerate = total < CHROMA_EPS
    safe = np.where(degenerate, 1.0, total)
    rg = rgb[..., :2] / safe
    return np.where(degenerate, 1.0 / 3.0, rg)


def neighbor_offsets(connectivity: int) -> Tuple[Tuple[int, int], ...]:
    """Offsets (dy, dx) that enumerate each unordered neighbour pair once."""
    if connectivity == 4:
        return ((0, 1), (1, 0))
    if connectivity == 8:
        return ((0, 1), (1, 0), (1, 1), (1, -1))
    raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")


def pair_slices(offset: Tuple[int, int]) -> Tuple[Tuple[slice, slice], Tuple[slice, slice]]:
    """
    Index pair (a, b) so that arr[a] and arr[b] are the two ends of every
    pixel pair at the given offset. Only dy >= 0 offsets are used.
    """
    dy, dx = offset
    rows_a = slice(None, -dy if dy else None)
    rows_b = slice(dy, None)
    if dx >= 0:
        cols_a, cols_b = slice(None, -dx if dx else None), slice(dx, None)
    else:
        cols_a, cols_b = slice(-dx, None), slice(None, dx)
    return (rows_a, cols_a), (rows_b, cols_b)


def check_same_shape(*arrays: np.ndarray, what: str = "inputs") -> None:
    """Raise ShapeMismatch unless all arrays share their leading H x W."""
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatch(f"{what} disagree in shape: {sorted(shapes)}")
