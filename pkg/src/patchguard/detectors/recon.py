"""Reconstruction-based detector: a denoising convolutional autoencoder.

Normal patches are corrupted with synthetic stains and a 4-level
encoder-decoder learns to restore the clean patch under an L2 loss. At
inference the anomaly score of a pixel is the squared reconstruction error
averaged over channels: stains the model learned to remove reconstruct
toward clean metal, which makes real contamination light up.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import nn
from ..errors import DimensionMismatchError, PatchguardError, UntrainedDetectorError
from ..imgio import load_tensors, save_tensors
from ..seeding import derive_seed, rng_for
from .defects import SyntheticDefectSpec, inject_defect

__all__ = ["ReconDetectorConfig", "ReconstructionDetector", "train_reconstruction_detector"]


@dataclass
class ReconDetectorConfig:
    base_channels: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 8
    input_size: int = 256  # must be divisible by 8 (three stride-2 stages)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "input_size": self.input_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "ReconDetectorConfig":
        return ReconDetectorConfig(**d)


def conv2d_fwd(x, w, b, stride):
    """3x3 convolution, pad 1, as nine shifted matmuls (BLAS does the work)."""
    bsz, h, wd, _ = x.shape
    ho = (h + 2 - 3) // stride + 1
    wo = (wd + 2 - 3) // stride + 1
    xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    y = np.zeros((bsz, ho, wo, w.shape[0]), x.dtype)
    for di in range(3):
        for dj in range(3):
            xs = xpad[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :]
            y += xs @ w[:, :, di, dj].T
    return y + b, (xpad, w, stride, ho, wo)


def conv2d_bwd(dy, cache, grads, name):
    xpad, w, stride, ho, wo = cache
    ci = xpad.shape[-1]
    co = dy.shape[-1]
    dy2 = dy.reshape(-1, co)
    dw = np.zeros_like(w)
    dxpad = np.zeros_like(xpad)
    for di in range(3):
        for dj in range(3):
            sl = np.s_[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :]
            xs = xpad[sl]
            dw[:, :, di, dj] = dy2.T @ xs.reshape(-1, ci)
            dxpad[sl] += dy @ w[:, :, di, dj]
    nn._acc(grads, name + ".weight", dw)
    nn._acc(grads, name + ".bias", dy.sum(axis=(0, 1, 2)))
    return dxpad[:, 1:-1, 1:-1, :]


def upsample2_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_bwd(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# (name, in_ch multiplier, out_ch multiplier, stride, gelu, upsample before)
def _layer_plan(f):
    return [
        ("head.enc1", 3, f, 1, True, False),
        ("head.enc2", f, 2 * f, 2, True, False),
        ("head.enc3", 2 * f, 4 * f, 2, True, False),
        ("head.enc4", 4 * f, 4 * f, 2, True, False),
        ("head.mid", 4 * f, 4 * f, 1, True, False),
        ("head.dec3", 4 * f, 2 * f, 1, True, True),
        ("head.dec2", 2 * f, f, 1, True, True),
        ("head.dec1", f, f, 1, True, True),
        ("head.out", f, 3, 1, False, False),
    ]


def _init_params(cfg: ReconDetectorConfig, seed: int) -> dict:
    rng = rng_for(seed, "recon-head")
    params = {}
    for name, ci, co, _, _, _ in _layer_plan(cfg.base_channels):
        std = float(np.sqrt(2.0 / (9 * ci)))
        params[name + ".weight"] = nn.trunc_normal(rng, (co, ci, 3, 3), std=std)
        params[name + ".bias"] = np.zeros(co, np.float32)
    return params


def _forward(params, cfg, x, keep_cache=False):
    caches = []
    h = x
    for name, _, _, stride, act, up in _layer_plan(cfg.base_channels):
        if up:
            h = upsample2_fwd(h)
        h, c_conv = conv2d_fwd(h, params[name + ".weight"], params[name + ".bias"], stride)
        c_act = None
        if act:
            h, c_act = nn.gelu_fwd(h)
        if keep_cache:
            caches.append((name, stride, up, c_conv, c_act))
    return h, caches


def _backward(dy, caches, grads):
    for name, _, up, c_conv, c_act in reversed(caches):
        if c_act is not None:
            dy = nn.gelu_bwd(dy, c_act)
        dy = conv2d_bwd(dy, c_conv, grads, name)
        if up:
            dy = upsample2_bwd(dy)
    return dy


class ReconstructionDetector:
    """Handle for the denoising-autoencoder backend (no encoder reference)."""

    kind = "reconstruction"
    encoder_ref = None

    def __init__(self, det_cfg: ReconDetectorConfig, head: dict, defect_spec: SyntheticDefectSpec,
                 trained: bool = False):
        self.det_cfg = det_cfg
        self.head = head
        self.defect_spec = defect_spec
        self.trained = trained
        self.loss_curve = []

    def trainable_names(self) -> list:
        return list(self.head)

    def set_head_params(self, flat: dict) -> None:
        for k in self.head:
            self.head[k] = flat[k]

    def reconstruct(self, batch: np.ndarray) -> np.ndarray:
        out, _ = _forward(self.head, self.det_cfg, batch)
        return out

    def score_batch(self, patches: list) -> list:
        if not self.trained:
            raise UntrainedDetectorError("reconstruction detector is not trained")
        size = self.det_cfg.input_size
        for p in patches:
            if p.shape[0] != size or p.shape[1] != size:
                raise DimensionMismatchError(
                    f"patch {p.shape[:2]} does not match detector input {size}"
                )
        batch = np.stack([_ensure_rgb(p) for p in patches])
        recon = self.reconstruct(batch)
        err = ((recon - batch) ** 2).mean(axis=-1)
        return [e.astype(np.float32) for e in err]

    def score_patch(self, patch: np.ndarray) -> np.ndarray:
        return self.score_batch([patch])[0]

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensors(self.head, out_dir / "head.pgt")
        config = {
            "kind": self.kind,
            "detector": self.det_cfg.to_dict(),
            "defect_spec": self.defect_spec.to_dict(),
            "trained": self.trained,
            "loss_curve": self.loss_curve,
        }
        (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(out_dir) -> "ReconstructionDetector":
        out_dir = Path(out_dir)
        config = json.loads((out_dir / "config.json").read_text())
        head, _ = load_tensors(out_dir / "head.pgt")
        det = ReconstructionDetector(
            ReconDetectorConfig.from_dict(config["detector"]),
            head,
            SyntheticDefectSpec.from_dict(config["defect_spec"]),
            trained=config["trained"],
        )
        det.loss_curve = config.get("loss_curve", [])
        return det


def _ensure_rgb(patch: np.ndarray) -> np.ndarray:
    if patch.shape[2] == 1:
        return np.repeat(patch, 3, axis=2)
    return patch


def train_reconstruction_detector(patches: list, spec: SyntheticDefectSpec, epochs: int,
                                  seed: int, det_cfg: ReconDetectorConfig | None = None
                                  ) -> ReconstructionDetector:
    """Denoising training: corrupt each normal patch, restore the clean one."""
    patches = list(patches)
    if not patches:
        raise PatchguardError("empty patch stream")
    size = patches[0].shape[0]
    if size % 8 != 0:
        raise PatchguardError(f"patch size {size} must be divisible by 8")
    det_cfg = det_cfg or ReconDetectorConfig()
    det_cfg.input_size = size
    head = _init_params(det_cfg, seed)
    det = ReconstructionDetector(det_cfg, head, spec)
    rgb = [_ensure_rgb(p) for p in patches]
    opt = nn.Adam(lr=det_cfg.learning_rate)
    trainable = det.trainable_names()
    n = len(rgb)
    curve = []
    for epoch in range(epochs):
        order = rng_for(seed, "recon-order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, det_cfg.batch_size):
            idx = order[start : start + det_cfg.batch_size]
            clean = np.stack([rgb[i] for i in idx])
            corrupted = np.empty_like(clean)
            for row, i in enumerate(idx):
                sample_spec = SyntheticDefectSpec(
                    count_range=spec.count_range,
                    radius_range=spec.radius_range,
                    color_jitter=spec.color_jitter,
                    blend_alpha=spec.blend_alpha,
                    seed=derive_seed(spec.seed, "corrupt", epoch, int(i)),
                )
                corrupted[row], _ = inject_defect(rgb[i], sample_spec)
            out, caches = _forward(head, det_cfg, corrupted, keep_cache=True)
            diff = out - clean
            loss = float((diff * diff).mean())
            grads = {}
            _backward(2.0 * diff / diff.size, caches, grads)
            opt.step(head, grads, trainable)
            total += loss * len(idx)
        curve.append(total / n)
    det.trained = True
    det.loss_curve = curve
    return det
