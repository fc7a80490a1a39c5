"""Ablation harness: train and evaluate the framework arms on one corpus.

Arms, in reporting order:

* ``baseline`` - whole-image detector at downsized resolution, no masking;
* ``finetune`` - baseline plus full fine-tuning of the encoder;
* ``+mask`` - baseline plus foreground masking (input zeroing and output
  re-masking);
* ``+mask+patch`` - masking plus the native-resolution patch pipeline;
* ``full`` - masking, patching and low-rank adaptation of the encoder.

All arms share one seed, one corpus, one mask cache and the same optimizer
settings; they differ only in the pipeline switches above, so their pooled
pixel-AUROC values are directly comparable. For the reconstruction backend
(no frozen encoder to adapt) the ``finetune`` and ``full`` arms reduce to
their non-LoRA counterparts.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .detectors import FeatureDetectorConfig, ReconDetectorConfig, SyntheticDefectSpec
from .encoder import EncoderConfig
from .errors import PatchguardError
from .imgio import load_mask
from .lora import LoraConfig
from .manifest import DatasetManifest
from .masking import SegmenterConfig
from .pipeline import (
    MaskCache,
    PipelineConfig,
    evaluate_scored,
    prepare_training_patches,
    score_split,
    train_backend,
)

__all__ = ["ABLATION_ARMS", "AblationSettings", "run_ablation", "run_single_arm"]

ABLATION_ARMS = ("baseline", "finetune", "+mask", "+mask+patch", "full")

# Toy-scale encoder for the ablation arms: large enough to separate stains
# from brushed metal, small enough that the whole grid trains on a laptop
# core in minutes. The package-wide EncoderConfig defaults are unchanged.
ABLATION_ENCODER = EncoderConfig(
    input_size=256, token_patch=16, embed_dim=64, layers=3, heads=4, mlp_ratio=2.0
)


@dataclass
class AblationSettings:
    backend: str = "feature"
    epochs: int = 12
    patch_size: int = 256
    pretrain_epochs: int = 0
    encoder: EncoderConfig = field(default_factory=lambda: ABLATION_ENCODER)
    lora: LoraConfig = field(default_factory=LoraConfig)
    feature_det: FeatureDetectorConfig = field(default_factory=FeatureDetectorConfig)
    recon_det: ReconDetectorConfig = field(default_factory=ReconDetectorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    train_defects: SyntheticDefectSpec = field(default_factory=SyntheticDefectSpec)


def arm_pipeline_config(arm: str, seed: int, settings: AblationSettings) -> PipelineConfig:
    if arm not in ABLATION_ARMS:
        raise PatchguardError(f"unknown ablation arm {arm!r}")
    flags = {
        "baseline": dict(use_mask=False, use_patch=False, use_lora=False),
        "finetune": dict(use_mask=False, use_patch=False, use_lora=False),
        "+mask": dict(use_mask=True, use_patch=False, use_lora=False),
        "+mask+patch": dict(use_mask=True, use_patch=True, use_lora=False),
        "full": dict(use_mask=True, use_patch=True, use_lora=True),
    }[arm]
    if settings.backend == "reconstruction":
        flags["use_lora"] = False
    return PipelineConfig(
        backend=settings.backend,
        patch_size=settings.patch_size,
        epochs=settings.epochs,
        seed=seed,
        pretrain_epochs=settings.pretrain_epochs,
        encoder=settings.encoder,
        lora=settings.lora,
        feature_det=settings.feature_det,
        recon_det=settings.recon_det,
        segmenter=settings.segmenter,
        train_defects=settings.train_defects,
        **flags,
    )


def _fg_lookup_for(corpus_dir: Path):
    fg_dir = corpus_dir / "masks_fg"
    if not fg_dir.is_dir():
        return None

    def lookup(entry):
        path = fg_dir / (Path(entry.image_path).stem + ".png")
        return load_mask(path) if path.is_file() else None

    return lookup


def run_single_arm(arm: str, manifest: DatasetManifest, seed: int,
                   settings: AblationSettings, masks: MaskCache, fg_lookup=None) -> dict:
    cfg = arm_pipeline_config(arm, seed, settings)
    patches = prepare_training_patches(manifest, cfg, masks=masks)
    detector = train_backend(patches, cfg, unfreeze_encoder=(arm == "finetune"))
    val_scored = score_split(manifest, "val", detector, cfg, masks=masks)
    test_scored = score_split(manifest, "test", detector, cfg, masks=masks)
    result = evaluate_scored(test_scored, val_scored, fg_lookup=fg_lookup)
    row = {
        "arm": arm,
        "p_auroc": result.p_auroc,
        "best_f1": result.best_f1,
        "best_threshold": result.best_threshold,
        "n_train_patches": len(patches),
    }
    if result.p_auroc_foreground is not None:
        row["p_auroc_foreground"] = result.p_auroc_foreground
    return row


def run_ablation(corpus_dir, arms, seed: int, settings: AblationSettings | None = None,
                 out_path=None) -> dict:
    """Run the requested arms on a generated corpus; returns the result table.

    The table is JSON-serializable and contains no absolute paths, so two
    runs with the same seed produce byte-identical files.
    """
    corpus_dir = Path(corpus_dir)
    settings = settings or AblationSettings()
    manifest = DatasetManifest.load(corpus_dir / "manifest.json").resolve(corpus_dir)
    arms = [a for a in ABLATION_ARMS if a in set(arms)]
    if not arms:
        raise PatchguardError("no valid arms requested")
    masks = MaskCache(settings.segmenter)
    fg_lookup = _fg_lookup_for(corpus_dir)
    rows = [
        run_single_arm(arm, manifest, seed, settings, masks, fg_lookup=fg_lookup)
        for arm in arms
    ]
    table = {"backend": settings.backend, "seed": seed, "arms": rows}
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table
