"""Dark-channel haze map extraction.

The haze map is the patchwise dark channel of the hazy image, refined with a
guided filter (grayscale guide). It is high in dense-haze regions and serves
both as a fourth input channel and, after flooring, as the per-pixel weight
of the transmission-aware loss.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import minimum_filter, uniform_filter

from .errors import ParameterError, ShapeError

DEFAULT_PATCH_SIZE = 15
DEFAULT_SMOOTH_RADIUS = 20
DEFAULT_SMOOTH_EPS = 1e-3
DEFAULT_WEIGHT_FLOOR = 0.1

# Rec.601 luma coefficients for the guide image
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class HazeMap:
    """Smoothed dark channel of an image, values in [0, 1]."""

    values: np.ndarray
    patch_size: int
    smooth_radius: int
    smooth_eps: float


def _check_rgb(image: np.ndarray, name: str = "image") -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"{name} must be HxWx3, got {image.shape}")


def dark_channel(image: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Patchwise minimum over channels and a square window (replicate borders)."""
    _check_rgb(image)
    h, w = image.shape[:2]
    if patch_size % 2 == 0 or patch_size < 1 or patch_size > min(h, w):
        raise ParameterError(
            f"patch_size must be odd and in [1, min(H,W)={min(h, w)}], got {patch_size}"
        )
    channel_min = image.min(axis=2)
    # mode="nearest" replicates edge values, so border windows never darken
    return minimum_filter(channel_min, size=patch_size, mode="nearest")


def _box_mean(a: np.ndarray, radius: int) -> np.ndarray:
    # (2r+1)^2 box mean with replicate padding
    return uniform_filter(a, size=2 * radius + 1, mode="nearest")


def smooth_map(raw: np.ndarray, guide: np.ndarray, radius: int = DEFAULT_SMOOTH_RADIUS,
               eps: float = DEFAULT_SMOOTH_EPS) -> np.ndarray:
    """Guided filter of `raw` steered by the grayscale of `guide`, clamped to [0, 1].

    Linear in `raw` for a fixed guide; approaches a double box mean as eps grows.
    """
    _check_rgb(guide, "guide")
    if raw.ndim != 2 or raw.shape != guide.shape[:2]:
        raise ShapeError(f"raw shape {raw.shape} does not match guide {guide.shape[:2]}")
    if radius < 1:
        raise ParameterError(f"radius must be >= 1, got {radius}")
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")

    p = raw.astype(np.float64)
    gray = (guide.astype(np.float64) @ _LUMA)

    mean_i = _box_mean(gray, radius)
    mean_p = _box_mean(p, radius)
    corr_ip = _box_mean(gray * p, radius)
    corr_ii = _box_mean(gray * gray, radius)

    var_i = corr_ii - mean_i * mean_i
    cov_ip = corr_ip - mean_i * mean_p

    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i

    out = _box_mean(a, radius) * gray + _box_mean(b, radius)
    return np.clip(out, 0.0, 1.0)


def extract_haze_map(image: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE,
                     radius: int = DEFAULT_SMOOTH_RADIUS,
                     eps: float = DEFAULT_SMOOTH_EPS) -> HazeMap:
    """Dark channel extraction followed by guided smoothing."""
    raw = dark_channel(image, patch_size)
    smoothed = smooth_map(raw, image, radius, eps)
    return HazeMap(values=smoothed, patch_size=patch_size,
                   smooth_radius=radius, smooth_eps=eps)


def make_loss_weight(hm: HazeMap, w_min: float = DEFAULT_WEIGHT_FLOOR) -> np.ndarray:
    """Floor the haze map at w_min so no pixel's loss is fully zeroed."""
    if not 0.0 < w_min < 1.0:
        raise ParameterError(f"w_min must lie in (0, 1), got {w_min}")
    return np.maximum(hm.values, w_min)


def haze_map_cache_path(image_path) -> Path:
    """Cache file naming convention: `<image-stem>.hazemap.png` beside the input."""
    p = Path(image_path)
    return p.with_name(p.stem + ".hazemap.png")


def save_haze_map_cache(hm: HazeMap, image_path) -> Path:
    path = haze_map_cache_path(image_path)
    quantized = np.round(255.0 * np.clip(hm.values, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)
    return path


def load_haze_map_cache(image_path, patch_size: int = DEFAULT_PATCH_SIZE,
                        radius: int = DEFAULT_SMOOTH_RADIUS,
                        eps: float = DEFAULT_SMOOTH_EPS) -> HazeMap | None:
    """Load a cached map if present; None otherwise."""
    path = haze_map_cache_path(image_path)
    if not path.exists():
        return None
    values = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return HazeMap(values=values, patch_size=patch_size,
                   smooth_radius=radius, smooth_eps=eps)
