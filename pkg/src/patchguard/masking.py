"""Foreground isolation: segment the instrument, upscale the mask, zero the rest.

Segmentation runs on a copy downsized to a fixed width (default 512, aspect
ratio preserved) for speed, and the resulting mask is upscaled back to the
input resolution with nearest-neighbor sampling so it stays binary.

Two segmenter backends exist behind one contract:

* ``builtin`` - classical pipeline (luma, Otsu threshold, minority side,
  largest 8-connected component, hole fill) that needs no model downloads;
* ``external`` - HTTP client for any promptable segmenter: POST the PNG body
  to ``<endpoint>/segment`` and get back a single-channel 0/255 PNG of
  identical dimensions.
"""

import io
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

from . import kernels
from .errors import (
    DegenerateImageError,
    DimensionMismatchError,
    EmptyMaskError,
    MalformedResponseError,
    SegmenterTransportError,
)
from .imgio import validate_image

__all__ = [
    "SegmenterConfig",
    "downsize_for_segmentation",
    "segment_builtin",
    "segment_external",
    "upscale_mask",
    "apply_mask",
    "compute_mask",
]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class SegmenterConfig:
    backend: str = "builtin"
    downsize_width: int = 512
    external_endpoint: str | None = None

    def __post_init__(self):
        if self.downsize_width < 64:
            raise ValueError("downsize_width must be >= 64")
        if self.backend not in ("builtin", "external"):
            raise ValueError(f"unknown segmenter backend {self.backend!r}")


def downsize_for_segmentation(img: np.ndarray, target_width: int) -> np.ndarray:
    """Bilinearly shrink so width == target_width, preserving aspect ratio.

    Height is rounded half-up. Images already at or below the target width
    pass through unchanged.
    """
    validate_image(img)
    if target_width < 1:
        raise ValueError("target_width must be >= 1")
    h, w = img.shape[:2]
    if w <= target_width:
        return img
    out_h = max(1, int(np.floor(h * target_width / w + 0.5)))
    return np.clip(kernels.bilinear_resize(img, out_h, target_width), 0.0, 1.0)


def to_luma(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


def otsu_threshold(gray: np.ndarray) -> float:
    """Otsu's threshold over a 256-bin histogram of values in [0, 1].

    Only cut points with both classes non-empty are considered; a constant
    image therefore has no threshold.
    """
    hist, edges = np.histogram(gray, bins=256, range=(0.0, 1.0))
    total = gray.size
    counts_below = np.cumsum(hist)[:-1].astype(np.float64)
    counts_above = total - counts_below
    valid = (counts_below > 0) & (counts_above > 0)
    if not valid.any():
        raise DegenerateImageError("constant image: no Otsu threshold exists")
    centers = (edges[:-1] + edges[1:]) / 2.0
    mass = hist * centers
    mass_below = np.cumsum(mass)[:-1]
    mean_below = np.where(valid, mass_below / np.maximum(counts_below, 1), 0.0)
    mean_above = np.where(valid, (mass.sum() - mass_below) / np.maximum(counts_above, 1), 0.0)
    between = counts_below * counts_above * (mean_below - mean_above) ** 2
    between[~valid] = -1.0
    return float(edges[1:][int(np.argmax(between))])


def segment_builtin(img: np.ndarray) -> np.ndarray:
    """Classical foreground segmentation.

    Grayscale via luma weights, Otsu split, the smaller side is the
    candidate foreground, keep its largest 8-connected component and fill
    enclosed holes.
    """
    validate_image(img)
    gray = to_luma(img)
    t = otsu_threshold(gray)
    above = gray > t
    n_above = int(above.sum())
    candidate = above if n_above * 2 <= above.size else ~above
    if not candidate.any():
        raise DegenerateImageError("Otsu split produced an empty candidate foreground")
    mask = kernels.fill_holes(kernels.largest_component(candidate))
    if not mask.any():
        raise EmptyMaskError("segmentation produced no foreground pixels")
    return mask


def segment_external(img: np.ndarray, endpoint: str, timeout: float = 30.0) -> np.ndarray:
    """POST the image to ``<endpoint>/segment`` and decode the PNG mask."""
    validate_image(img)
    buf = io.BytesIO()
    arr = np.round(img * 255.0).astype(np.uint8)
    pil = Image.fromarray(arr[:, :, 0] if img.shape[2] == 1 else arr)
    pil.save(buf, format="PNG")
    url = endpoint.rstrip("/") + "/segment"
    try:
        resp = requests.post(
            url, data=buf.getvalue(), headers={"Content-Type": "image/png"}, timeout=timeout
        )
    except requests.RequestException as exc:
        raise SegmenterTransportError(f"cannot reach segmenter at {url}: {exc}") from exc
    if resp.status_code != 200:
        raise SegmenterTransportError(f"segmenter returned HTTP {resp.status_code}")
    try:
        with Image.open(io.BytesIO(resp.content)) as mask_im:
            if mask_im.mode != "L":
                raise MalformedResponseError(f"expected single-channel mask, got mode {mask_im.mode!r}")
            mask = np.asarray(mask_im) >= 128
    except MalformedResponseError:
        raise
    except Exception as exc:
        raise MalformedResponseError(f"segmenter response is not a PNG: {exc}") from exc
    if mask.shape != img.shape[:2]:
        raise MalformedResponseError(
            f"mask dimensions {mask.shape} do not match image {img.shape[:2]}"
        )
    if not mask.any():
        raise EmptyMaskError("external segmenter returned an all-background mask")
    return mask


def upscale_mask(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor mask resize to exactly (target_h, target_w)."""
    if mask.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2-D, got {mask.shape}")
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    return kernels.nearest_resize(mask, target_h, target_w)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero all pixels outside the mask; foreground is untouched."""
    validate_image(img)
    if mask.shape != img.shape[:2]:
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match image {img.shape[:2]}"
        )
    return np.where(mask[:, :, None], img, np.float32(0.0))


def compute_mask(img: np.ndarray, cfg: SegmenterConfig) -> np.ndarray:
    """Full masking stage: downsize, segment with the configured backend,
    upscale back to the input resolution."""
    small = downsize_for_segmentation(img, cfg.downsize_width)
    if cfg.backend == "builtin":
        mask_small = segment_builtin(small)
    else:
        if not cfg.external_endpoint:
            raise ValueError("external backend requires an endpoint")
        mask_small = segment_external(small, cfg.external_endpoint)
    if mask_small.shape == img.shape[:2]:
        return mask_small
    return upscale_mask(mask_small, img.shape[0], img.shape[1])
