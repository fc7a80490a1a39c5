"""patchguard command-line interface.

One binary, subcommand style: synthgen, segment, train, adapt, infer, eval,
ablate. Flags override values from an optional JSON config file
(``--config``), which in turn override built-in defaults. Every run writes
a ``run_config.json`` manifest of the resolved configuration and seed next
to its outputs so any result can be replayed. Exit codes: 0 success,
1 domain error, 2 usage error.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ABLATION_ARMS, AblationSettings, run_ablation
from .detectors import SyntheticDefectSpec, load_detector
from .encoder import EncoderConfig
from .errors import PatchguardError
from .evaluation import select_threshold
from .imgio import load_image, load_mask, load_scoremap, save_image, save_mask, save_scoremap
from .lora import LoraConfig
from .manifest import DatasetManifest
from .masking import SegmenterConfig, compute_mask
from .pipeline import (
    MaskCache,
    PipelineConfig,
    evaluate_scored,
    prepare_training_patches,
    score_image,
    train_backend,
)
from .synthgen import SceneSpec, generate_corpus

LOG_LEVELS = ("quiet", "info", "debug")


def _log(args, level, msg):
    order = {"quiet": 0, "info": 1, "debug": 2}
    if order[getattr(args, "log_level", "info")] >= order[level]:
        print(msg, file=sys.stderr)


def _cache_dir() -> Path:
    return Path(os.environ.get("PATCHGUARD_CACHE", Path.home() / ".cache" / "patchguard"))


def _pair(text: str) -> tuple:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return tuple(parts)


def _write_run_config(args, out: Path) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    for k, v in resolved.items():
        if isinstance(v, Path):
            resolved[k] = str(v)
        elif isinstance(v, tuple):
            resolved[k] = list(v)
    resolved["version"] = __version__
    if out.suffix:
        target = out.parent / (out.stem + ".run.json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        target = out / "run_config.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _segmenter_from_args(args) -> SegmenterConfig | None:
    backend = getattr(args, "mask_backend", "builtin")
    if backend == "none":
        return None
    return SegmenterConfig(
        backend=backend,
        downsize_width=getattr(args, "downsize_width", 512),
        external_endpoint=getattr(args, "endpoint", None),
    )


def _encoder_from_args(args) -> EncoderConfig:
    return EncoderConfig(
        input_size=args.input_size,
        token_patch=args.token_patch,
        embed_dim=args.embed_dim,
        layers=args.layers,
        heads=args.heads,
        mlp_ratio=args.mlp_ratio,
    )


def _defects_from_args(args, seed: int) -> SyntheticDefectSpec:
    return SyntheticDefectSpec(
        count_range=args.defect_count,
        radius_range=args.defect_radius,
        color_jitter=args.defect_jitter,
        blend_alpha=args.defect_alpha,
        seed=seed,
    )


def _pipeline_from_args(args, use_lora: bool) -> PipelineConfig:
    segmenter = _segmenter_from_args(args)
    return PipelineConfig(
        backend=args.kind,
        use_mask=segmenter is not None,
        use_patch=not args.whole_image,
        use_lora=use_lora,
        patch_size=args.patch_size,
        epochs=args.epochs,
        seed=args.seed,
        pretrain_epochs=args.pretrain_epochs,
        encoder=_encoder_from_args(args),
        lora=LoraConfig(rank=args.rank, alpha=args.alpha, learning_rate=args.lr),
        segmenter=segmenter or SegmenterConfig(),
        train_defects=_defects_from_args(args, args.seed),
    )


# ----------------------------------------------------------------------- #
# subcommand implementations
# ----------------------------------------------------------------------- #
def cmd_synthgen(args) -> int:
    spec = SceneSpec(
        image_size=args.image_size,
        background=args.background,
        texture_scale=args.texture_scale,
        defect=_defects_from_args(args, args.seed),
        seed=args.seed,
    )
    out = Path(args.out)
    manifest = generate_corpus(args.normal, args.defective, spec, out, args.seed)
    _write_run_config(args, out)
    _log(args, "info", f"wrote {len(manifest.entries)} scenes to {out}")
    return 0


def cmd_segment(args) -> int:
    img = load_image(args.input)
    cfg = _segmenter_from_args(args)
    if cfg is None:
        raise PatchguardError("segment requires --backend builtin or external")
    mask = compute_mask(img, cfg)
    out = Path(args.out)
    save_mask(mask, out)
    _write_run_config(args, out)
    _log(args, "info", f"mask with {int(mask.sum())} foreground pixels -> {out}")
    return 0


def _train_common(args, use_lora: bool) -> int:
    cfg = _pipeline_from_args(args, use_lora=use_lora)
    manifest = DatasetManifest.load(args.manifest).resolve(Path(args.manifest).parent)
    masks = MaskCache(cfg.segmenter)
    patches = prepare_training_patches(manifest, cfg, masks=masks)
    _log(args, "info", f"training on {len(patches)} patches")
    detector = train_backend(patches, cfg)
    out = Path(args.out)
    detector.save(out)
    (out / "pipeline.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_run_config(args, out)
    curve = detector.loss_curve
    if curve:
        _log(args, "info", f"loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} epochs")
    return 0


def cmd_train(args) -> int:
    return _train_common(args, use_lora=False)


def cmd_adapt(args) -> int:
    if args.kind != "feature":
        raise PatchguardError(
            "low-rank adaptation needs a frozen encoder; the reconstruction "
            "backend trains from scratch (use `patchguard train`)"
        )
    return _train_common(args, use_lora=True)


def cmd_infer(args) -> int:
    det_dir = Path(args.detector)
    detector = load_detector(det_dir)
    cfg = PipelineConfig.from_dict(json.loads((det_dir / "pipeline.json").read_text()))
    if args.mask_backend is not None:
        seg = _segmenter_from_args(args)
        cfg.use_mask = seg is not None
        if seg is not None:
            cfg.segmenter = seg
    if args.patch_size is not None:
        cfg.patch_size = args.patch_size
    manifest = DatasetManifest.load(args.manifest).resolve(Path(args.manifest).parent)
    entries = manifest.entries if args.split == "all" else manifest.split(args.split)
    if not entries:
        raise PatchguardError(f"no entries in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = MaskCache(cfg.segmenter)

    def process(entry):
        img = load_image(entry.image_path)
        smap = score_image(img, detector, cfg, masks=masks, key=entry.image_path,
                           threshold=args.threshold)
        stem = Path(entry.image_path).stem
        save_scoremap(smap, out / f"{stem}.smap")
        overlay = _overlay(img, smap, binarize=args.binarize, threshold=args.threshold)
        save_image(overlay, out / f"{stem}_overlay.png")
        return stem

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            stems = list(pool.map(process, entries))
    else:
        stems = [process(e) for e in entries]
    _write_run_config(args, out)
    _log(args, "info", f"scored {len(stems)} images -> {out}")
    return 0


def _overlay(img: np.ndarray, smap: np.ndarray, binarize: bool, threshold: float) -> np.ndarray:
    rgb = np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img.copy()
    if binarize:
        weight = (smap >= max(threshold, np.finfo(np.float32).tiny)).astype(np.float32)
    else:
        hi = float(smap.max())
        weight = smap / hi if hi > 0 else np.zeros_like(smap)
    red = np.zeros_like(rgb)
    red[:, :, 0] = 1.0
    w = (0.6 * weight)[:, :, None]
    return np.clip((1.0 - w) * rgb + w * red, 0.0, 1.0)


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest).resolve(Path(args.manifest).parent)
    pred_dir = Path(args.pred_dir)

    def scored_for(split):
        rows = []
        for entry in manifest.split(split):
            smap_path = pred_dir / (Path(entry.image_path).stem + ".smap")
            if not smap_path.is_file():
                raise PatchguardError(f"missing prediction {smap_path}")
            smap = load_scoremap(smap_path)
            if entry.label == "defective" and entry.gt_mask_path:
                gt = load_mask(entry.gt_mask_path)
            else:
                gt = np.zeros(smap.shape, bool)
            rows.append((entry, smap, gt))
        return rows

    result = evaluate_scored(scored_for("test"), scored_for("val"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_run_config(args, out)
    _log(args, "info", f"P-AUROC {result.p_auroc:.4f}, best F1 {result.best_f1:.4f}")
    return 0


def cmd_ablate(args) -> int:
    arms = ABLATION_ARMS if args.arms == "all" else tuple(args.arms.split(","))
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise PatchguardError(f"unknown arms: {unknown}; valid: {list(ABLATION_ARMS)}")
    settings = AblationSettings(
        backend=args.backend,
        epochs=args.epochs,
        patch_size=args.patch_size,
        pretrain_epochs=args.pretrain_epochs,
    )
    out = Path(args.out)
    table = run_ablation(args.corpus, arms, args.seed, settings=settings, out_path=out)
    _write_run_config(args, out)
    for row in table["arms"]:
        _log(args, "info", f"{row['arm']:>12s}: P-AUROC {row['p_auroc']:.4f}")
    return 0


# ----------------------------------------------------------------------- #
# parser
# ----------------------------------------------------------------------- #
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker threads for per-image stages")
    p.add_argument("--device", default="cpu", help="accepted for interface parity; only cpu runs")
    p.add_argument("--log-level", choices=LOG_LEVELS, default="info")


def _add_mask_flags(p: argparse.ArgumentParser, default="builtin") -> None:
    p.add_argument("--mask-backend", choices=("builtin", "external", "none"), default=default)
    p.add_argument("--endpoint", default=None, help="external segmenter base URL")
    p.add_argument("--downsize-width", type=int, default=512)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--whole-image", action="store_true", help="train at downsized whole-image scale")
    p.add_argument("--pretrain-epochs", type=int, default=0)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--token-patch", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mlp-ratio", type=float, default=4.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--defect-count", type=_pair, default=(1, 3))
    p.add_argument("--defect-radius", type=_pair, default=(6, 14))
    p.add_argument("--defect-alpha", type=float, default=0.9)
    p.add_argument("--defect-jitter", type=float, default=0.08)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchguard",
        description="Masked, patch-based defect detection with low-rank encoder adaptation.",
    )
    parser.add_argument("--version", action="version", version=f"patchguard {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synthgen", help="generate a synthetic benchmark corpus")
    p.add_argument("--normal", type=int, required=True)
    p.add_argument("--defective", type=int, required=True)
    p.add_argument("--background", choices=("textured", "plain"), default="textured")
    p.add_argument("--texture-scale", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=768)
    p.add_argument("--defect-count", type=_pair, default=(1, 3))
    p.add_argument("--defect-radius", type=_pair, default=(10, 20))
    p.add_argument("--defect-alpha", type=float, default=0.9)
    p.add_argument("--defect-jitter", type=float, default=0.08)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("segment", help="write a foreground mask for one image")
    p.add_argument("--input", required=True)
    p.add_argument("--backend", dest="mask_backend", choices=("builtin", "external"),
                   default="builtin")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--downsize-width", type=int, default=512)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a detector backend on normal images")
    p.add_argument("--kind", choices=("feature", "reconstruction"), default="feature")
    _add_train_flags(p)
    _add_mask_flags(p)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="LoRA-adapt the encoder jointly with a detector head")
    p.add_argument("--detector", dest="kind", choices=("feature", "reconstruction"),
                   default="feature")
    _add_train_flags(p)
    _add_mask_flags(p)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="score images through the patch pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detector", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=("val", "test", "all"), default="all")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--mask-backend", choices=("builtin", "external", "none"), default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--downsize-width", type=int, default=512)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate saved score maps against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--out", default="report.json")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component-ablation grid on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--arms", default="all")
    p.add_argument("--backend", choices=("feature", "reconstruction"), default="feature")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--pretrain-epochs", type=int, default=0)
    p.add_argument("--out", default="table.json")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def _apply_config_file(parser, args, argv):
    if getattr(args, "config", None) is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PatchguardError(f"cannot read config file {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise PatchguardError(f"config file {args.config} must hold a JSON object")
    explicit = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise PatchguardError(f"config key {key!r} is not a flag of this command")
        if dest in explicit:
            continue
        if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) for v in value):
            value = tuple(value)
        setattr(args, dest, value)
    return args


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    if getattr(args, "out", None) is None and args.command in ("train", "adapt"):
        args.out = str(_cache_dir() / f"{args.command}-{args.kind}-seed{args.seed}")
    try:
        args = _apply_config_file(parser, args, argv)
        return args.func(args)
    except PatchguardError as exc:
        print(f"patchguard {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"patchguard {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
