"""Feature-reconstruction detector.

A lightweight transformer decoder reconstructs the encoder's selected-layer
token features from a per-token bottlenecked summary; the anomaly score of
a token is 1 minus the cosine similarity between reconstruction and target,
averaged over the selected layers and bilinearly upsampled from the token
grid to pixels. Training minimizes the same quantity on normal patches;
targets are treated as constants so adaptation cannot trivially collapse
the features.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import kernels, nn
from ..encoder import EncoderConfig, EncoderWeights, encoder_forward
from ..errors import DimensionMismatchError, PatchguardError, UntrainedDetectorError
from ..imgio import load_tensors, save_tensors
from ..lora import AdaptedEncoder, LoraConfig
from ..seeding import rng_for

__all__ = ["FeatureDetectorConfig", "FeatureDetector", "train_feature_detector"]


@dataclass
class FeatureDetectorConfig:
    decoder_blocks: int = 2
    bottleneck_dim: int = 0  # 0 = embed_dim // 4
    learning_rate: float = 1e-3
    batch_size: int = 8

    def to_dict(self) -> dict:
        return {
            "decoder_blocks": self.decoder_blocks,
            "bottleneck_dim": self.bottleneck_dim,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "FeatureDetectorConfig":
        return FeatureDetectorConfig(**d)


def _init_head(enc_cfg: EncoderConfig, det_cfg: FeatureDetectorConfig, seed: int) -> dict:
    d = enc_cfg.embed_dim
    j = len(enc_cfg.feature_layers)
    db = det_cfg.bottleneck_dim or max(4, d // 4)
    rng = rng_for(seed, "feature-head")
    # all head parameters carry a "head." prefix so the gradient namespace
    # never collides with encoder weights or adapter factors
    head = {
        "head.embed.weight": nn.trunc_normal(rng, (d, j * d)),
        "head.embed.bias": np.zeros(d, np.float32),
        "head.bottleneck.fc1.weight": nn.trunc_normal(rng, (db, d)),
        "head.bottleneck.fc1.bias": np.zeros(db, np.float32),
        "head.bottleneck.fc2.weight": nn.trunc_normal(rng, (d, db)),
        "head.bottleneck.fc2.bias": np.zeros(d, np.float32),
    }
    for i in range(det_cfg.decoder_blocks):
        nn.init_block_params(head, f"head.blocks.{i}", d, d * 2, rng)
    for jj in range(j):
        head[f"head.out.{jj}.weight"] = nn.trunc_normal(rng, (d, d))
        head[f"head.out.{jj}.bias"] = np.zeros(d, np.float32)
    return head


def _head_forward(head: dict, feats: list, n_heads: int, n_blocks: int):
    x0 = np.concatenate(feats, axis=-1)
    e, c_embed = nn.linear_fwd(x0, head["head.embed.weight"], head["head.embed.bias"])
    b1, c_fc1 = nn.linear_fwd(e, head["head.bottleneck.fc1.weight"], head["head.bottleneck.fc1.bias"])
    g1, c_gelu = nn.gelu_fwd(b1)
    z, c_fc2 = nn.linear_fwd(g1, head["head.bottleneck.fc2.weight"], head["head.bottleneck.fc2.bias"])
    h = z
    c_blocks = []
    for i in range(n_blocks):
        h, cache = nn.block_fwd(h, head, f"head.blocks.{i}", None, n_heads)
        c_blocks.append(cache)
    recons = []
    c_outs = []
    for jj in range(len(feats)):
        r, c_out = nn.linear_fwd(h, head[f"head.out.{jj}.weight"], head[f"head.out.{jj}.bias"])
        recons.append(r)
        c_outs.append(c_out)
    return recons, (c_embed, c_fc1, c_gelu, c_fc2, c_blocks, c_outs, len(feats))


def _head_backward(drecons: list, cache, grads: dict):
    c_embed, c_fc1, c_gelu, c_fc2, c_blocks, c_outs, j = cache
    dh = None
    for jj in range(j):
        d = nn.linear_bwd(drecons[jj], c_outs[jj], grads, f"head.out.{jj}")
        dh = d if dh is None else dh + d
    for i in range(len(c_blocks) - 1, -1, -1):
        dh = nn.block_bwd(dh, c_blocks[i], grads, f"head.blocks.{i}")
    dg1 = nn.linear_bwd(dh, c_fc2, grads, "head.bottleneck.fc2")
    db1 = nn.gelu_bwd(dg1, c_gelu)
    de = nn.linear_bwd(db1, c_fc1, grads, "head.bottleneck.fc1")
    dx0 = nn.linear_bwd(de, c_embed, grads, "head.embed")
    return dx0


class FeatureDetector:
    """Handle for the feature-reconstruction backend."""

    kind = "feature"

    def __init__(self, encoder_ref, det_cfg: FeatureDetectorConfig, head: dict,
                 trained: bool = False):
        self.encoder_ref = encoder_ref
        self.det_cfg = det_cfg
        self.head = head
        self.trained = trained
        self.loss_curve = []

    # -- plumbing ---------------------------------------------------------- #
    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder_ref.cfg

    def _encoder_parts(self):
        if isinstance(self.encoder_ref, AdaptedEncoder):
            return self.encoder_ref.base, self.encoder_ref.adapters
        return self.encoder_ref, None

    def trainable_names(self) -> list:
        return list(self.head)

    def set_head_params(self, flat: dict) -> None:
        for k in self.head:
            self.head[k] = flat[k]

    def _features(self, batch: np.ndarray, keep_cache: bool = False):
        base, adapters = self._encoder_parts()
        feats, cache = encoder_forward(
            base, batch, adapters=adapters, want_layers=self.enc_cfg.feature_layers,
            keep_cache=keep_cache,
        )
        ordered = [feats[i] for i in sorted(feats)]
        return ordered, cache

    # -- training ---------------------------------------------------------- #
    def loss_and_grads(self, batch: np.ndarray, encoder_cache: bool = False,
                       frozen_targets: list | None = None):
        """One training step's loss and gradients.

        With ``encoder_cache`` the encoder graph is kept and gradients flow
        back into LoRA factors (keyed ``<target>.A/.B``); otherwise the
        encoder acts as a frozen feature source. Reconstruction targets are
        the current features treated as constants (no gradient flows into
        the target side, which blocks the trivial feature-collapse
        solution); ``frozen_targets`` pins them explicitly, which numeric
        gradient checks need when they re-evaluate the loss under perturbed
        encoder weights.
        """
        feats, cache = self._features(batch, keep_cache=encoder_cache)
        recons, head_cache = _head_forward(
            self.head, feats, self.enc_cfg.heads, self.det_cfg.decoder_blocks
        )
        targets = frozen_targets if frozen_targets is not None else feats
        grads = {}
        total = 0.0
        drecons = []
        j = len(feats)
        for r, f in zip(recons, targets):
            loss, dr = nn.cosine_loss_and_grad(r, f)
            total += loss / j
            drecons.append(dr / j)
        dx0 = _head_backward(drecons, head_cache, grads)
        if encoder_cache:
            d = self.enc_cfg.embed_dim
            layer_ids = sorted(self.enc_cfg.feature_layers)
            dfeats = {
                layer: dx0[..., k * d : (k + 1) * d] for k, layer in enumerate(layer_ids)
            }
            from ..encoder import encoder_backward

            encoder_backward(dfeats, cache, grads)
        return total, grads

    def joint_step(self, model: AdaptedEncoder, batch: np.ndarray):
        """Loss + gradients over head and adapter factors (for train_adapters)."""
        if model is not self.encoder_ref:
            self.encoder_ref = model
        return self.loss_and_grads(batch, encoder_cache=True)

    # -- inference --------------------------------------------------------- #
    def score_batch(self, patches: list) -> list:
        if not self.trained:
            raise UntrainedDetectorError("feature detector is not trained")
        size = self.enc_cfg.input_size
        for p in patches:
            if p.shape[0] != size or p.shape[1] != size:
                raise DimensionMismatchError(
                    f"patch {p.shape[:2]} does not match detector input {size}"
                )
        batch = np.stack([_ensure_rgb(p) for p in patches])
        feats, _ = self._features(batch)
        recons, _ = _head_forward(self.head, feats, self.enc_cfg.heads, self.det_cfg.decoder_blocks)
        scores = np.zeros(batch.shape[:1] + (self.enc_cfg.tokens,), np.float64)
        for r, f in zip(recons, feats):
            scores += nn.cosine_score(r, f) / len(feats)
        g = self.enc_cfg.grid
        out = []
        for row in scores:
            grid_map = row.reshape(g, g).astype(np.float32)
            up = kernels.bilinear_resize(grid_map[:, :, None], size, size)[:, :, 0]
            out.append(np.maximum(up, 0.0))
        return out

    def score_patch(self, patch: np.ndarray) -> np.ndarray:
        return self.score_batch([patch])[0]

    # -- persistence ------------------------------------------------------- #
    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        base, _ = self._encoder_parts()
        base.save(out_dir / "encoder.pgt")
        adapted = isinstance(self.encoder_ref, AdaptedEncoder)
        if adapted:
            self.encoder_ref.save(out_dir / "adapters.pgt")
        save_tensors(self.head, out_dir / "head.pgt")
        config = {
            "kind": self.kind,
            "detector": self.det_cfg.to_dict(),
            "trained": self.trained,
            "adapted": adapted,
            "loss_curve": self.loss_curve,
        }
        (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(out_dir) -> "FeatureDetector":
        out_dir = Path(out_dir)
        config = json.loads((out_dir / "config.json").read_text())
        base = EncoderWeights.load(out_dir / "encoder.pgt")
        encoder_ref = base
        if config.get("adapted"):
            encoder_ref = AdaptedEncoder.load(out_dir / "adapters.pgt", base)
        head, _ = load_tensors(out_dir / "head.pgt")
        det = FeatureDetector(
            encoder_ref,
            FeatureDetectorConfig.from_dict(config["detector"]),
            head,
            trained=config["trained"],
        )
        det.loss_curve = config.get("loss_curve", [])
        return det


def _ensure_rgb(patch: np.ndarray) -> np.ndarray:
    if patch.shape[2] == 1:
        return np.repeat(patch, 3, axis=2)
    return patch


def train_feature_detector(encoder_ref, patches: list, epochs: int, seed: int,
                           det_cfg: FeatureDetectorConfig | None = None,
                           unfreeze_encoder: bool = False) -> FeatureDetector:
    """Fit the decoder head on normal patches against a frozen encoder.

    ``encoder_ref`` may be plain EncoderWeights or an AdaptedEncoder whose
    factors were already trained; only head parameters move unless
    ``unfreeze_encoder`` is set (the full-fine-tune ablation arm), in which
    case every base encoder weight trains with the same optimizer settings.
    """
    patches = list(patches)
    if not patches:
        raise PatchguardError("empty patch stream")
    det_cfg = det_cfg or FeatureDetectorConfig()
    head = _init_head(encoder_ref.cfg, det_cfg, seed)
    det = FeatureDetector(encoder_ref, det_cfg, head)
    opt = nn.Adam(lr=det_cfg.learning_rate)
    trainable = det.trainable_names()
    enc_params = None
    if unfreeze_encoder:
        if isinstance(encoder_ref, AdaptedEncoder):
            raise PatchguardError("full fine-tuning expects a plain (non-adapted) encoder")
        enc_params = encoder_ref.params
        trainable = trainable + list(enc_params)
    n = len(patches)
    rgb = [_ensure_rgb(p) for p in patches]
    curve = []
    for epoch in range(epochs):
        order = rng_for(seed, "feature-order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, det_cfg.batch_size):
            idx = order[start : start + det_cfg.batch_size]
            batch = np.stack([rgb[i] for i in idx])
            loss, grads = det.loss_and_grads(batch, encoder_cache=unfreeze_encoder)
            if enc_params is None:
                opt.step(det.head, grads, trainable)
            else:
                flat = {**det.head, **enc_params}
                opt.step(flat, grads, trainable)
                det.set_head_params(flat)
                for k in enc_params:
                    enc_params[k] = flat[k]
            total += loss * len(idx)
        curve.append(total / n)
    det.trained = True
    det.loss_curve = curve
    return det
