"""Tile a masked image into fixed-size patches and reassemble score maps.

The image is zero-padded on the bottom/right edges to the next multiple of
the patch size (padding is indistinguishable from masked-out background),
split row-major into non-overlapping tiles, scored per tile, stitched back
at the original spatial locations, cropped to the original size, thresholded
and re-masked.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, PatchguardError
from .imgio import validate_image, validate_scoremap
from .masking import apply_mask

__all__ = [
    "PatchGrid",
    "StitchConfig",
    "patchify",
    "patchify_mask",
    "stitch",
    "threshold_and_remask",
    "run_patch_pipeline",
]


@dataclass
class StitchConfig:
    threshold: float = 0.0
    patch_size: int = 256

    def __post_init__(self):
        if not np.isfinite(self.threshold) or self.threshold < 0:
            raise ValueError("threshold must be finite and >= 0")


@dataclass
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int
    orig_h: int
    orig_w: int
    patches: list = field(default_factory=list)  # (row, col, (p, p, C) array)


def _padded_dims(h: int, w: int, p: int) -> tuple[int, int]:
    rows = -(-h // p)
    cols = -(-w // p)
    return rows, cols


def patchify(img: np.ndarray, patch_size: int = 256) -> PatchGrid:
    """Split into non-overlapping patch_size x patch_size tiles, row-major."""
    validate_image(img)
    if patch_size < 16:
        raise ValueError("patch_size must be >= 16")
    h, w, c = img.shape
    rows, cols = _padded_dims(h, w, patch_size)
    pad_bottom = rows * patch_size - h
    pad_right = cols * patch_size - w
    padded = np.zeros((rows * patch_size, cols * patch_size, c), dtype=np.float32)
    padded[:h, :w] = img
    patches = []
    for r in range(rows):
        for col in range(cols):
            tile = padded[
                r * patch_size : (r + 1) * patch_size,
                col * patch_size : (col + 1) * patch_size,
            ]
            patches.append((r, col, tile.copy()))
    return PatchGrid(patch_size, rows, cols, pad_bottom, pad_right, h, w, patches)


def patchify_mask(mask: np.ndarray, patch_size: int) -> list:
    """Tile a bool mask with the same padding rule as patchify."""
    h, w = mask.shape
    rows, cols = _padded_dims(h, w, patch_size)
    padded = np.zeros((rows * patch_size, cols * patch_size), dtype=bool)
    padded[:h, :w] = mask
    return [
        (r, c, padded[r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size])
        for r in range(rows)
        for c in range(cols)
    ]


def stitch(scores: list, grid: PatchGrid, orig_h: int, orig_w: int) -> np.ndarray:
    """Place per-patch score maps at (row*p, col*p) and crop the padding.

    ``scores`` holds (row, col, patch score map) with exactly one entry per
    grid cell.
    """
    p = grid.patch_size
    full = np.zeros((grid.rows * p, grid.cols * p), dtype=np.float32)
    seen = set()
    for r, c, tile in scores:
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            raise PatchguardError(f"score cell ({r}, {c}) outside grid {grid.rows}x{grid.cols}")
        if (r, c) in seen:
            raise PatchguardError(f"duplicate score for cell ({r}, {c})")
        if tile.shape != (p, p):
            raise DimensionMismatchError(f"patch map for ({r}, {c}) has shape {tile.shape}")
        seen.add((r, c))
        full[r * p : (r + 1) * p, c * p : (c + 1) * p] = tile
    if len(seen) != grid.rows * grid.cols:
        raise PatchguardError(f"missing score maps: have {len(seen)} of {grid.rows * grid.cols}")
    return full[:orig_h, :orig_w]


def threshold_and_remask(scores: np.ndarray, mask: np.ndarray, cfg: StitchConfig) -> np.ndarray:
    """Zero scores below the threshold, then zero everything outside the mask.

    Values at or above the threshold keep their original magnitude.
    """
    validate_scoremap(scores)
    if mask.shape != scores.shape:
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match score map {scores.shape}"
        )
    out = np.where(scores >= cfg.threshold, scores, np.float32(0.0))
    out[~mask] = 0.0
    return out


def run_patch_pipeline(img: np.ndarray, mask: np.ndarray, detector, cfg: StitchConfig) -> np.ndarray:
    """Mask, tile, score foreground tiles, stitch, threshold, re-mask.

    Tiles with no foreground pixel are skipped and contribute all-zero
    score maps; the detector never sees them.
    """
    masked = apply_mask(img, mask)
    grid = patchify(masked, cfg.patch_size)
    mask_tiles = {(r, c): m for r, c, m in patchify_mask(mask, cfg.patch_size)}
    live = [(r, c, tile) for r, c, tile in grid.patches if mask_tiles[(r, c)].any()]
    scored = {}
    if live:
        maps = detector.score_batch([tile for _, _, tile in live])
        for (r, c, _), m in zip(live, maps):
            scored[(r, c)] = m
    zero = np.zeros((cfg.patch_size, cfg.patch_size), dtype=np.float32)
    all_scores = [
        (r, c, scored.get((r, c), zero)) for r in range(grid.rows) for c in range(grid.cols)
    ]
    full = stitch(all_scores, grid, grid.orig_h, grid.orig_w)
    return threshold_and_remask(full, mask, cfg)
