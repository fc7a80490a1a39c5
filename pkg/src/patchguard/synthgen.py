"""Deterministic synthetic benchmark: instrument-like foregrounds on textured
backgrounds, with optional stains and exact ground-truth masks.

Scenes are built from capsule signed-distance fields (one elongated capsule
or a scissor-like pair crossing at a pivot) shaded with a metallic gradient
plus a specular streak, composited over either a plain gray background or a
value-noise "towel" texture whose hue and scale vary per scene. Stains are
injected only inside an eroded foreground so they sit well interior to the
instrument, and every stain pixel is recorded in the ground-truth mask.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .detectors.defects import SyntheticDefectSpec, inject_defect
from .errors import GenerationError
from .imgio import save_image, save_mask
from .manifest import DatasetManifest, ManifestEntry
from .seeding import derive_seed, rng_for

__all__ = ["SceneSpec", "generate_scene", "generate_corpus"]

AREA_LO = 0.10
AREA_HI = 0.45  # stay under 50% so the instrument is the Otsu minority side
MAX_SHAPE_ATTEMPTS = 100


@dataclass
class SceneSpec:
    image_size: int = 768
    background: str = "textured"  # or "plain"
    texture_scale: float = 1.0
    instrument_shape: str = "auto"  # auto | capsule | scissors
    defect: SyntheticDefectSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.background not in ("plain", "textured"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.instrument_shape not in ("auto", "capsule", "scissors"):
            raise ValueError(f"unknown instrument shape {self.instrument_shape!r}")


def _value_noise(rng, size: int, cells: int, amplitude: float) -> np.ndarray:
    lattice = rng.uniform(-1.0, 1.0, size=(cells, cells, 1)).astype(np.float32)
    return amplitude * kernels.bilinear_resize(lattice, size, size)[:, :, 0]


def _background(rng, spec: SceneSpec) -> np.ndarray:
    size = spec.image_size
    if spec.background == "plain":
        base = rng.uniform(0.32, 0.46)
        tint = rng.uniform(-0.02, 0.02, size=3)
        img = np.full((size, size, 3), base, np.float32) + tint.astype(np.float32)
        return np.clip(img, 0.0, 1.0)
    # muted towel color: random hue, low brightness so luma stays below metal
    hue = rng.uniform(0.0, 1.0)
    sat = rng.uniform(0.25, 0.55)
    val = rng.uniform(0.30, 0.48)
    rgb = _hsv_to_rgb(hue, sat, val)
    img = np.broadcast_to(rgb.astype(np.float32), (size, size, 3)).copy()
    cells = max(4, int(10 * spec.texture_scale * rng.uniform(0.7, 1.4)))
    fine = _value_noise(rng, size, cells, amplitude=0.085)
    folds = _value_noise(rng, size, 4, amplitude=0.05)
    img += (fine + folds)[:, :, None]
    # faint woven stripes
    phase = rng.uniform(0.0, 2 * np.pi)
    freq = rng.uniform(0.08, 0.22) * spec.texture_scale
    xs = np.arange(size, dtype=np.float32)
    stripes = 0.015 * np.sin(freq * xs + phase)
    img += stripes[None, :, None]
    return np.clip(img, 0.0, 1.0)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def _capsule_depth(size: int, a, b, radius: float) -> np.ndarray:
    """Per-pixel penetration depth into a capsule, 0 outside, 1 at the spine."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    ab = (b[0] - a[0], b[1] - a[1])
    den = ab[0] * ab[0] + ab[1] * ab[1] + 1e-9
    t = np.clip(((ys - a[0]) * ab[0] + (xs - a[1]) * ab[1]) / den, 0.0, 1.0)
    py = a[0] + t * ab[0]
    px = a[1] + t * ab[1]
    dist = np.sqrt((ys - py) ** 2 + (xs - px) ** 2)
    return np.clip(1.0 - dist / radius, 0.0, 1.0)


def _sample_capsules(rng, spec: SceneSpec) -> list:
    size = spec.image_size
    shape = spec.instrument_shape
    if shape == "auto":
        shape = "scissors" if rng.uniform() < 0.5 else "capsule"
    cy = size * rng.uniform(0.40, 0.60)
    cx = size * rng.uniform(0.40, 0.60)
    theta = rng.uniform(0.0, np.pi)
    length = size * rng.uniform(0.55, 0.80)
    caps = []
    if shape == "capsule":
        radius = size * rng.uniform(0.065, 0.105)
        dy, dx = np.sin(theta), np.cos(theta)
        a = (cy - dy * length / 2, cx - dx * length / 2)
        b = (cy + dy * length / 2, cx + dx * length / 2)
        caps.append((a, b, radius))
    else:
        split = rng.uniform(0.10, 0.22)  # half-angle between blades
        radius = size * rng.uniform(0.040, 0.060)
        for sign in (-1.0, 1.0):
            ang = theta + sign * split
            dy, dx = np.sin(ang), np.cos(ang)
            a = (cy - dy * length / 2, cx - dx * length / 2)
            b = (cy + dy * length / 2, cx + dx * length / 2)
            caps.append((a, b, radius))
        caps.append(((cy, cx), (cy + 1e-3, cx + 1e-3), radius * 1.6))  # pivot boss
    return caps


def _render_instrument(rng, spec: SceneSpec):
    size = spec.image_size
    for _ in range(MAX_SHAPE_ATTEMPTS):
        caps = _sample_capsules(rng, spec)
        depth = np.zeros((size, size), np.float32)
        for a, b, radius in caps:
            depth = np.maximum(depth, _capsule_depth(size, a, b, radius))
        fg = depth > 0.0
        frac = fg.mean()
        if AREA_LO <= frac <= AREA_HI:
            return fg, depth
    raise GenerationError(
        f"could not satisfy the {AREA_LO:.0%}-{AREA_HI:.0%} area invariant "
        f"in {MAX_SHAPE_ATTEMPTS} attempts"
    )


def _shade(rng, depth: np.ndarray) -> np.ndarray:
    g0 = rng.uniform(0.66, 0.82)
    grad = rng.uniform(0.08, 0.14)
    spec_amp = rng.uniform(0.12, 0.20)
    brightness = g0 + grad * (depth - 0.5) + spec_amp * np.exp(-(((depth - 0.82) / 0.16) ** 2))
    tint = np.array([0.985, 1.0, 1.02], np.float32) * rng.uniform(0.98, 1.02)
    shaded = brightness[:, :, None] * tint[None, None, :]
    return np.clip(shaded, 0.0, 1.0).astype(np.float32)


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        inner = out.copy()
        inner[1:, :] &= out[:-1, :]
        inner[:-1, :] &= out[1:, :]
        inner[:, 1:] &= out[:, :-1]
        inner[:, :-1] &= out[:, 1:]
        out = inner
    return out


def generate_scene(spec: SceneSpec):
    """Render one scene; returns (image, foreground mask, defect mask)."""
    rng = rng_for(spec.seed, "scene")
    img = _background(rng, spec)
    fg, depth = _render_instrument(rng, spec)
    shaded = _shade(rng, depth)
    img = np.where(fg[:, :, None], shaded, img)
    defect_gt = np.zeros(fg.shape, bool)
    if spec.defect is not None:
        margin = int(1.2 * spec.defect.radius_range[1])
        allowed = _erode(fg, margin)
        while not allowed.any() and margin > 1:
            margin //= 2
            allowed = _erode(fg, margin)
        if not allowed.any():
            allowed = fg
        for attempt in range(20):
            d_spec = replace(spec.defect, seed=derive_seed(spec.defect.seed, "try", attempt))
            stained, mask = inject_defect(img, d_spec, allowed=allowed)
            if mask.any() or spec.defect.count_range[1] == 0:
                img, defect_gt = stained, mask
                break
        else:
            raise GenerationError("could not place a non-empty defect in the foreground")
    return img.astype(np.float32), fg, defect_gt


def generate_corpus(n_normal: int, n_defective: int, spec_template: SceneSpec, out_dir,
                    seed: int) -> DatasetManifest:
    """Write a seeded corpus of scenes plus masks and a split manifest.

    Normals go 70/15/15 into train/val/test by seeded shuffle; defectives
    are split half/half between val and test.
    """
    if n_normal < 0 or n_defective < 0:
        raise ValueError("counts must be >= 0")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks_fg").mkdir(exist_ok=True)
    (out_dir / "masks_defect").mkdir(exist_ok=True)
    rng = rng_for(seed, "corpus")

    entries = []
    normal_order = rng.permutation(n_normal)
    n_train = int(n_normal * 0.70)
    n_val = int(n_normal * 0.15)
    normal_split = {}
    for pos, idx in enumerate(normal_order):
        normal_split[int(idx)] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    defective_order = rng.permutation(n_defective)
    defective_split = {}
    for pos, idx in enumerate(defective_order):
        defective_split[int(idx)] = "val" if pos < -(-n_defective // 2) else "test"

    for i in range(n_normal):
        stem = f"normal_{i:04d}"
        spec = replace(spec_template, defect=None, seed=derive_seed(seed, "normal", i))
        img, fg, _ = generate_scene(spec)
        save_image(img, out_dir / "images" / f"{stem}.png")
        save_mask(fg, out_dir / "masks_fg" / f"{stem}.png")
        entries.append(ManifestEntry(f"images/{stem}.png", "normal", normal_split[i]))

    defect_template = spec_template.defect or SyntheticDefectSpec()
    for i in range(n_defective):
        stem = f"defective_{i:04d}"
        d_spec = replace(defect_template, seed=derive_seed(seed, "defect", i))
        spec = replace(spec_template, defect=d_spec, seed=derive_seed(seed, "defective", i))
        img, fg, defect_gt = generate_scene(spec)
        save_image(img, out_dir / "images" / f"{stem}.png")
        save_mask(fg, out_dir / "masks_fg" / f"{stem}.png")
        save_mask(defect_gt, out_dir / "masks_defect" / f"{stem}.png")
        entries.append(
            ManifestEntry(
                f"images/{stem}.png",
                "defective",
                defective_split[i],
                gt_mask_path=f"masks_defect/{stem}.png",
            )
        )

    manifest = DatasetManifest(entries)
    manifest.save(out_dir / "manifest.json")
    meta = {
        "seed": seed,
        "n_normal": n_normal,
        "n_defective": n_defective,
        "image_size": spec_template.image_size,
        "background": spec_template.background,
    }
    (out_dir / "corpus_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest
