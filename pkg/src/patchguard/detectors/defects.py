"""Synthetic stain injection with exact ground-truth masks.

Stains are smoothed random-walk splats: a seeded walk scatters mass around
a center, a gaussian blur shapes it, and thresholding at the 70th
percentile of the splat's support gives the blob. A jittered reddish-brown
color is alpha-blended over the blob at a flat opacity, so with
``blend_alpha = 1`` the mask covers exactly the modified pixels.
"""

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..imgio import validate_image
from ..seeding import rng_for

__all__ = ["SyntheticDefectSpec", "inject_defect", "splat_blob"]

STAIN_BASE_COLOR = np.array([0.42, 0.22, 0.14], dtype=np.float32)  # reddish-brown


@dataclass
class SyntheticDefectSpec:
    count_range: tuple = (1, 3)
    radius_range: tuple = (6, 14)  # pixels
    color_jitter: float = 0.08
    blend_alpha: float = 0.9
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad count_range {self.count_range}")
        rlo, rhi = self.radius_range
        if rlo > rhi or rlo < 1:
            raise ValueError(f"bad radius_range {self.radius_range}")
        if not 0.0 < self.blend_alpha <= 1.0:
            raise ValueError("blend_alpha must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "count_range": list(self.count_range),
            "radius_range": list(self.radius_range),
            "color_jitter": self.color_jitter,
            "blend_alpha": self.blend_alpha,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticDefectSpec":
        return SyntheticDefectSpec(
            count_range=tuple(d["count_range"]),
            radius_range=tuple(d["radius_range"]),
            color_jitter=d["color_jitter"],
            blend_alpha=d["blend_alpha"],
            seed=d["seed"],
        )


def splat_blob(h: int, w: int, center: tuple, radius: float, rng) -> np.ndarray:
    """Boolean blob from a smoothed random walk around ``center``."""
    n_steps = max(24, int(radius * radius))
    steps = rng.integers(-1, 2, size=(n_steps, 2))
    path = np.cumsum(steps, axis=0) * max(1, int(radius / 6))
    rr = np.clip(center[0] + path[:, 0], 0, h - 1)
    cc = np.clip(center[1] + path[:, 1], 0, w - 1)
    splat = np.zeros((h, w), np.float32)
    np.add.at(splat, (rr, cc), 1.0)
    smooth = kernels.gaussian_blur(splat, sigma=max(1.0, radius / 2.0))
    support = smooth[smooth > 1e-6]
    if support.size == 0:
        return np.zeros((h, w), bool)
    return smooth >= np.quantile(support, 0.70)


def inject_defect(patch: np.ndarray, spec: SyntheticDefectSpec, allowed: np.ndarray | None = None):
    """Blend N stain blobs into a patch; returns (defective patch, blob mask).

    ``allowed`` optionally restricts blob centers (and the final mask) to a
    region, e.g. the instrument foreground.
    """
    validate_image(patch)
    h, w, c = patch.shape
    rng = rng_for(spec.seed, "defect")
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    mask = np.zeros((h, w), bool)
    out = patch.copy()
    if allowed is not None and not allowed.any():
        return out, mask
    for _ in range(n):
        radius = float(rng.uniform(spec.radius_range[0], spec.radius_range[1]))
        if allowed is not None:
            flat = np.flatnonzero(allowed)
            pick = int(flat[rng.integers(flat.size)])
            center = (pick // w, pick % w)
        else:
            center = (int(rng.integers(h)), int(rng.integers(w)))
        blob = splat_blob(h, w, center, radius, rng)
        if allowed is not None:
            blob &= allowed
        color = np.clip(
            STAIN_BASE_COLOR + rng.normal(0.0, spec.color_jitter, size=3).astype(np.float32),
            0.0,
            1.0,
        )
        if c == 1:
            color = color[:1] * 0.0 + float(color @ np.array([0.299, 0.587, 0.114], np.float32))
        alpha = np.float32(spec.blend_alpha)
        out[blob] = (1.0 - alpha) * out[blob] + alpha * color[:c]
        mask |= blob
    return np.clip(out, 0.0, 1.0), mask
