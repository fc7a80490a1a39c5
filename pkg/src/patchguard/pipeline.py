"""Manifest-level orchestration: masking, training data prep, scoring, eval.

This is the glue between file-level inputs (dataset manifest, checkpoint
dirs) and the array-level modules. The same code paths back the CLI
commands and the ablation harness, so a CLI run and an ablation arm with
the same configuration produce identical numbers.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .detectors import (
    FeatureDetectorConfig,
    ReconDetectorConfig,
    SyntheticDefectSpec,
    train_feature_detector,
    train_reconstruction_detector,
)
from .detectors.feature import FeatureDetector, _init_head
from .encoder import EncoderConfig, init_pretrained_stub, pretrain_reconstruction
from .errors import PatchguardError
from .evaluation import EvalResult, pixel_auroc, select_threshold
from .imgio import load_image, load_mask
from .lora import LoraConfig, inject, train_adapters
from .masking import SegmenterConfig, apply_mask, compute_mask
from .patching import StitchConfig, patchify, patchify_mask, run_patch_pipeline
from .seeding import derive_seed

__all__ = ["PipelineConfig", "MaskCache", "prepare_training_patches", "train_backend",
           "score_image", "evaluate_scored", "score_split"]


@dataclass
class PipelineConfig:
    backend: str = "feature"  # feature | reconstruction
    use_mask: bool = True
    use_patch: bool = True
    use_lora: bool = True
    patch_size: int = 256
    epochs: int = 12
    seed: int = 0
    pretrain_epochs: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    feature_det: FeatureDetectorConfig = field(default_factory=FeatureDetectorConfig)
    recon_det: ReconDetectorConfig = field(default_factory=ReconDetectorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    train_defects: SyntheticDefectSpec = field(default_factory=SyntheticDefectSpec)

    def __post_init__(self):
        if self.backend not in ("feature", "reconstruction"):
            raise PatchguardError(f"unknown backend {self.backend!r}")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "use_mask": self.use_mask,
            "use_patch": self.use_patch,
            "use_lora": self.use_lora,
            "patch_size": self.patch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "pretrain_epochs": self.pretrain_epochs,
            "encoder": self.encoder.to_dict(),
            "lora": self.lora.to_dict(),
            "feature_det": self.feature_det.to_dict(),
            "recon_det": self.recon_det.to_dict(),
            "segmenter": {
                "backend": self.segmenter.backend,
                "downsize_width": self.segmenter.downsize_width,
                "external_endpoint": self.segmenter.external_endpoint,
            },
            "train_defects": self.train_defects.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        return PipelineConfig(
            backend=d["backend"],
            use_mask=d["use_mask"],
            use_patch=d["use_patch"],
            use_lora=d["use_lora"],
            patch_size=d["patch_size"],
            epochs=d["epochs"],
            seed=d["seed"],
            pretrain_epochs=d.get("pretrain_epochs", 0),
            encoder=EncoderConfig.from_dict(d["encoder"]),
            lora=LoraConfig.from_dict(d["lora"]),
            feature_det=FeatureDetectorConfig.from_dict(d["feature_det"]),
            recon_det=ReconDetectorConfig.from_dict(d["recon_det"]),
            segmenter=SegmenterConfig(**d["segmenter"]),
            train_defects=SyntheticDefectSpec.from_dict(d["train_defects"]),
        )


class MaskCache:
    """Per-image foreground masks, computed once and shared across stages."""

    def __init__(self, segmenter: SegmenterConfig):
        self.segmenter = segmenter
        self._masks = {}

    def get(self, key: str, img: np.ndarray) -> np.ndarray:
        if key not in self._masks:
            self._masks[key] = compute_mask(img, self.segmenter)
        return self._masks[key]


def _ensure_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def _downsize_square(img: np.ndarray, size: int) -> np.ndarray:
    return np.clip(kernels.bilinear_resize(img, size, size), 0.0, 1.0)


def prepare_training_patches(manifest, cfg: PipelineConfig, masks: MaskCache | None = None):
    """Normal-only training tiles per the pipeline configuration.

    Whole-image mode downsizes each (optionally masked) train image to the
    detector input size; patch mode tiles the masked full-resolution image
    and keeps tiles containing foreground.
    """
    train = manifest.split("train")
    if not train:
        raise PatchguardError("manifest has no train entries")
    det_size = cfg.encoder.input_size if cfg.backend == "feature" else cfg.recon_det.input_size
    patches = []
    for entry in train:
        img = _ensure_rgb(load_image(entry.image_path))
        if cfg.use_mask:
            mask = masks.get(entry.image_path, img) if masks else compute_mask(img, cfg.segmenter)
            img = apply_mask(img, mask)
        else:
            mask = np.ones(img.shape[:2], bool)
        if cfg.use_patch:
            grid = patchify(img, cfg.patch_size)
            tiles = {(r, c): m for r, c, m in patchify_mask(mask, cfg.patch_size)}
            for r, c, tile in grid.patches:
                if tiles[(r, c)].any():
                    patches.append(tile)
        else:
            patches.append(_downsize_square(img, det_size))
    if not patches:
        raise PatchguardError("no foreground training patches found")
    return patches


def train_backend(patches: list, cfg: PipelineConfig, unfreeze_encoder: bool = False):
    """Train the configured detector backend on prepared patches."""
    if cfg.backend == "reconstruction":
        det_cfg = ReconDetectorConfig(**cfg.recon_det.to_dict())
        return train_reconstruction_detector(
            patches, cfg.train_defects, cfg.epochs, derive_seed(cfg.seed, "train"),
            det_cfg=det_cfg,
        )
    enc_seed = derive_seed(cfg.seed, "encoder")
    encoder = init_pretrained_stub(enc_seed, cfg.encoder)
    if cfg.pretrain_epochs > 0:
        pretrain_imgs = [p if p.shape[0] == cfg.encoder.input_size else
                         _downsize_square(p, cfg.encoder.input_size) for p in patches]
        pretrain_reconstruction(encoder, pretrain_imgs, cfg.pretrain_epochs,
                                derive_seed(cfg.seed, "pretrain"))
    train_seed = derive_seed(cfg.seed, "train")
    if cfg.use_lora:
        model = inject(encoder, cfg.lora, derive_seed(cfg.seed, "lora"))
        head = _init_head(cfg.encoder, cfg.feature_det, train_seed)
        det = FeatureDetector(model, cfg.feature_det, head)
        lora_cfg = LoraConfig(**{**cfg.lora.to_dict(), "epochs": cfg.epochs})
        train_adapters(model, det, patches, lora_cfg, train_seed)
        return det
    return train_feature_detector(
        encoder, patches, cfg.epochs, train_seed, det_cfg=cfg.feature_det,
        unfreeze_encoder=unfreeze_encoder,
    )


def score_image(img: np.ndarray, detector, cfg: PipelineConfig,
                masks: MaskCache | None = None, key: str = "",
                threshold: float = 0.0) -> np.ndarray:
    """Full-resolution score map for one image under the pipeline config."""
    img = _ensure_rgb(img)
    h, w = img.shape[:2]
    if cfg.use_mask:
        mask = masks.get(key, img) if masks else compute_mask(img, cfg.segmenter)
    else:
        mask = np.ones((h, w), bool)
    if cfg.use_patch:
        return run_patch_pipeline(img, mask, detector,
                                  StitchConfig(threshold=threshold, patch_size=cfg.patch_size))
    det_size = cfg.encoder.input_size if cfg.backend == "feature" else cfg.recon_det.input_size
    small = _downsize_square(apply_mask(img, mask), det_size)
    small_map = detector.score_patch(small)
    full = kernels.bilinear_resize(small_map[:, :, None], h, w)[:, :, 0]
    full = np.maximum(full, 0.0)
    if threshold > 0.0:
        full = np.where(full >= threshold, full, np.float32(0.0))
    if cfg.use_mask:
        full[~mask] = 0.0
    return full.astype(np.float32)


def score_split(manifest, split: str, detector, cfg: PipelineConfig,
                masks: MaskCache | None = None):
    """Score every image of a split; returns list of (entry, score map, gt)."""
    out = []
    for entry in manifest.split(split):
        img = load_image(entry.image_path)
        smap = score_image(img, detector, cfg, masks=masks, key=entry.image_path)
        if entry.label == "defective" and entry.gt_mask_path:
            gt = load_mask(entry.gt_mask_path)
        else:
            gt = np.zeros(smap.shape, bool)
        out.append((entry, smap, gt))
    return out


def evaluate_scored(test_scored: list, val_scored: list | None = None,
                    fg_lookup=None) -> EvalResult:
    """Pooled pixel AUROC over the test maps, F1 threshold from the val maps."""
    scores = np.concatenate([s.ravel() for _, s, _ in test_scored])
    labels = np.concatenate([g.ravel() for _, _, g in test_scored])
    auroc = pixel_auroc(scores, labels)
    per_image = []
    for entry, smap, gt in test_scored:
        if gt.any():
            per_image.append((entry.image_path, pixel_auroc(smap.ravel(), gt.ravel())))
    fg_auroc = None
    if fg_lookup is not None:
        fg_scores, fg_labels = [], []
        for entry, smap, gt in test_scored:
            fg = fg_lookup(entry)
            if fg is None:
                continue
            fg_scores.append(smap[fg])
            fg_labels.append(gt[fg])
        if fg_scores:
            pooled_s = np.concatenate(fg_scores)
            pooled_l = np.concatenate(fg_labels)
            if pooled_l.any() and not pooled_l.all():
                fg_auroc = pixel_auroc(pooled_s, pooled_l)
    best_t, best_f1 = 0.0, 0.0
    if val_scored:
        v_scores = np.concatenate([s.ravel() for _, s, _ in val_scored])
        v_labels = np.concatenate([g.ravel() for _, _, g in val_scored])
        if v_labels.any():
            best_t, best_f1 = select_threshold(v_scores, v_labels)
    return EvalResult(
        p_auroc=auroc,
        best_f1=best_f1,
        best_threshold=best_t,
        per_image=per_image,
        p_auroc_foreground=fg_auroc,
    )
