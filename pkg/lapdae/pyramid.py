"""
Gaussian/Laplacian pyramids and the corruptions injected through them

Images are numpy arrays whose last two axes are (height, width); any leading
axes (channels, batch) are carried along. Pyramid arithmetic runs in float64
so that reconstruct(laplacian_pyramid(x)) returns x to float32 precision.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from lapdae.errors import ConfigError, DimensionError, FlavorError, UsageError

logger = logging.getLogger(__name__)

# separable 5-tap binomial low-pass, unit DC gain
BINOMIAL_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
PIXEL_SCALE = 255.0
RANDOM_LEVEL = "random"


class PyramidDepthWarning(UserWarning):
    """Requested more pyramid levels than the image extents allow"""


class PyramidFlavor(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"


@dataclass
class Pyramid:
    """Per-level arrays, index 0 = finest (full resolution)"""

    levels: List[np.ndarray]
    flavor: PyramidFlavor
    base_shape: Tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.base_shape = tuple(self.levels[0].shape[-2:])

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> int:
        return len(self.levels) - 1

    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(level.shape[-2:]) for level in self.levels]


@dataclass(frozen=True)
class CorruptionSpec:
    """
    One corruption draw

    ``sigma`` is the noise standard deviation on the 0-255 pixel scale (images
    are stored in [0, 1], so the applied std is sigma / 255). ``level`` is a
    pyramid index or "random". ``level_scale`` optionally multiplies sigma per
    level (index = level).
    """

    kind: CorruptionKind = CorruptionKind.GAUSSIAN_NOISE
    level: Union[int, str] = RANDOM_LEVEL
    sigma: float = 25.0
    seed: int = 0
    level_scale: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not isinstance(self.kind, CorruptionKind):
            try:
                object.__setattr__(self, "kind", CorruptionKind(self.kind))
            except ValueError:
                valid = ", ".join(k.value for k in CorruptionKind)
                raise ConfigError(f"Unknown corruption kind '{self.kind}' (valid: {valid})") from None
        if not self.sigma > 0:
            raise ConfigError(f"Corruption sigma must be > 0, got {self.sigma}")
        if self.level != RANDOM_LEVEL and (not isinstance(self.level, (int, np.integer)) or self.level < 0):
            raise ConfigError(f"Corruption level must be a non-negative integer or '{RANDOM_LEVEL}', got {self.level!r}")

    @property
    def applied_std(self) -> float:
        return self.sigma / PIXEL_SCALE

    def with_seed(self, seed: int) -> "CorruptionSpec":
        return replace(self, seed=int(seed))

    def std_at(self, level: int) -> float:
        if self.level_scale is None:
            return self.applied_std
        scale = self.level_scale[min(level, len(self.level_scale) - 1)]
        return self.applied_std * scale


def max_levels(height: int, width: int) -> int:
    """Deepest pyramid that still halves down to a 1-pixel top: floor(log2(min extent)) + 1"""
    return int(math.floor(math.log2(min(height, width)))) + 1


def clamp_levels(num_levels: int, height: int, width: int) -> int:
    """
    Clamp a requested depth to what the image extents allow, warning when clamped

    Args:
        num_levels: Requested number of levels (>= 1)
        height: Image height
        width: Image width

    Returns:
        Usable number of levels
    """
    if num_levels < 1:
        raise ConfigError(f"Pyramid needs at least one level, got {num_levels}")
    if height < 1 or width < 1:
        raise DimensionError(f"Pyramid input extents must be >= 1, got {height}x{width}")
    limit = max_levels(height, width)
    if num_levels > limit:
        message = f"{num_levels} pyramid levels requested for {height}x{width} input; clamped to {limit}"
        logger.warning(message)
        warnings.warn(message, PyramidDepthWarning, stacklevel=3)
        return limit
    return num_levels


def _blur_axis(image: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * image.ndim
    pad[axis] = (2, 2)
    padded = np.pad(image, pad, mode="reflect")
    length = image.shape[axis]
    out = np.zeros_like(image)
    for offset, tap in enumerate(BINOMIAL_TAPS):
        out += tap * np.take(padded, np.arange(offset, offset + length), axis=axis)
    return out


def blur(image: np.ndarray) -> np.ndarray:
    """Separable binomial low-pass over the last two axes with reflect borders"""
    image = np.asarray(image, dtype=np.float64)
    return _blur_axis(_blur_axis(image, image.ndim - 2), image.ndim - 1)


def downsample(image: np.ndarray) -> np.ndarray:
    """Low-pass then keep even indices: (h, w) -> (ceil(h/2), ceil(w/2))"""
    return blur(image)[..., ::2, ::2]


def upsample(image: np.ndarray, target_hw: Tuple[int, int]) -> np.ndarray:
    """
    Zero-insert onto ``target_hw`` then low-pass with 4x the kernel (unit DC gain)

    The target must be the recorded finer-level shape, i.e. each extent is
    2n - 1 or 2n for a coarse extent n.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[-2:]
    target_h, target_w = target_hw
    if (target_h + 1) // 2 != height or (target_w + 1) // 2 != width:
        raise DimensionError(f"Cannot upsample {height}x{width} onto {target_h}x{target_w}")
    expanded = np.zeros(image.shape[:-2] + (target_h, target_w), dtype=np.float64)
    expanded[..., ::2, ::2] = image
    return 4.0 * blur(expanded)


def _spatial_extents(x: np.ndarray) -> Tuple[int, int]:
    if x.ndim < 2:
        raise DimensionError(f"Pyramid input needs (..., height, width) axes, got shape {x.shape}")
    return x.shape[-2], x.shape[-1]


def gaussian_pyramid(x: np.ndarray, num_levels: int) -> Pyramid:
    """
    Progressively low-passed and decimated copies of ``x``; level 0 is ``x`` itself

    Args:
        x: Image array (..., H, W)
        num_levels: Requested depth; clamped (with a warning) to the feasible depth

    Returns:
        Gaussian-flavor pyramid
    """
    x = np.asarray(x)
    height, width = _spatial_extents(x)
    depth = clamp_levels(num_levels, height, width)
    levels = [x.astype(np.float64)]
    for _ in range(depth - 1):
        levels.append(downsample(levels[-1]))
    return Pyramid(levels, PyramidFlavor.GAUSSIAN)


def laplacian_pyramid(x: np.ndarray, num_levels: int) -> Pyramid:
    """Band-pass levels G_l - up(G_{l+1}); the top level keeps the coarse residual G_N"""
    gaussian = gaussian_pyramid(x, num_levels)
    levels = []
    for fine, coarse in zip(gaussian.levels[:-1], gaussian.levels[1:]):
        levels.append(fine - upsample(coarse, fine.shape[-2:]))
    levels.append(gaussian.levels[-1].copy())
    return Pyramid(levels, PyramidFlavor.LAPLACIAN)


def reconstruct(pyramid: Pyramid) -> np.ndarray:
    """Collapse a Laplacian pyramid back to the level-0 image (float64)"""
    if pyramid.flavor != PyramidFlavor.LAPLACIAN:
        raise FlavorError(f"reconstruct() needs a Laplacian pyramid, got {pyramid.flavor.value}")
    image = pyramid.levels[-1]
    for band in reversed(pyramid.levels[:-1]):
        image = band + upsample(image, band.shape[-2:])
    return image


def _gaussian_noise(level: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    return level + rng.normal(0.0, std, size=level.shape)


CORRUPTIONS: Dict[CorruptionKind, Callable[[np.ndarray, float, np.random.Generator], np.ndarray]] = {
    CorruptionKind.GAUSSIAN_NOISE: _gaussian_noise,
}


def resolve_level(spec: CorruptionSpec, top: int, rng: np.random.Generator) -> int:
    """Pick the corrupted level: uniform over [0, top] for "random", else validated"""
    if spec.level == RANDOM_LEVEL:
        return int(rng.integers(0, top + 1))
    if not 0 <= spec.level <= top:
        raise UsageError(f"Corruption level {spec.level} out of range; valid levels are 0..{top}")
    return int(spec.level)


def lap_corrupt(x: np.ndarray, spec: CorruptionSpec, num_levels: int,
                clamp: bool = True) -> Tuple[np.ndarray, int]:
    """
    Corrupt one Laplacian level of ``x`` and rebuild the image

    Args:
        x: Clean image (..., H, W) with values in [0, 1]
        spec: Corruption draw (kind, level, sigma, seed)
        num_levels: Pyramid depth (clamped to the feasible depth)
        clamp: Clip the rebuilt image to [0, 1]

    Returns:
        (corrupted image with the dtype of ``x``, level actually corrupted)
    """
    x = np.asarray(x)
    rng = np.random.default_rng(spec.seed)
    pyramid = laplacian_pyramid(x, num_levels)
    level = resolve_level(spec, pyramid.top, rng)
    pyramid.levels[level] = CORRUPTIONS[spec.kind](pyramid.levels[level], spec.std_at(level), rng)
    corrupted = reconstruct(pyramid)
    if clamp:
        corrupted = np.clip(corrupted, 0.0, 1.0)
    return corrupted.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32), level


def spatial_corrupt(x: np.ndarray, sigma: float, seed: int, clamp: bool = True) -> np.ndarray:
    """
    Additive i.i.d. Gaussian pixel noise (the conventional DAE corruption)

    Args:
        x: Clean image(s) in [0, 1]
        sigma: Noise std on the 0-255 scale
        seed: RNG seed
        clamp: Clip to [0, 1]
    """
    if not sigma > 0:
        raise ConfigError(f"Corruption sigma must be > 0, got {sigma}")
    x = np.asarray(x)
    rng = np.random.default_rng(seed)
    corrupted = x.astype(np.float64) + rng.normal(0.0, sigma / PIXEL_SCALE, size=x.shape)
    if clamp:
        corrupted = np.clip(corrupted, 0.0, 1.0)
    return corrupted.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def correlation_length(residual: np.ndarray, max_lag: Optional[int] = None) -> float:
    """
    Integral correlation length of a residual field, in pixels

    Sums the normalised autocorrelation over lags -max_lag..max_lag along each
    spatial axis and averages the two axes; white noise gives ~1.

    Args:
        residual: Array (..., H, W), e.g. corrupted - clean
        max_lag: Largest lag considered; defaults to min(H, W) // 4
    """
    field_ = np.asarray(residual, dtype=np.float64)
    height, width = _spatial_extents(field_)
    field_ = field_ - field_.mean(axis=(-2, -1), keepdims=True)
    max_lag = max_lag or max(1, min(height, width) // 4)
    energy = np.mean(field_ * field_)
    if energy == 0:
        return 0.0

    lengths = []
    for axis in (-2, -1):
        extent = field_.shape[axis]
        total = 1.0
        for lag in range(1, min(max_lag, extent - 1) + 1):
            head = np.take(field_, np.arange(0, extent - lag), axis=axis)
            tail = np.take(field_, np.arange(lag, extent), axis=axis)
            total += 2.0 * np.mean(head * tail) / energy
        lengths.append(total)
    return float(np.mean(lengths))
