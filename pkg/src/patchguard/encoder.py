"""Small pre-norm vision transformer used as the frozen feature backbone.

The encoder tokenizes an image into non-overlapping token patches, adds a
learned positional embedding, and runs a stack of attention + MLP blocks.
Token grids from selected layers (default: the last two blocks) are exposed
as spatial feature maps for the detectors. There is no CLS token and no
final layernorm; a block's output is its post-residual activation.

Weights come from :func:`init_pretrained_stub` - a deterministic truncated
normal initialization, optionally warm-started by a short self-supervised
pixel-reconstruction pretrain - so the whole toolkit runs without any
checkpoint downloads.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import DimensionMismatchError
from .imgio import load_tensors, save_tensors
from .seeding import rng_for

__all__ = [
    "EncoderConfig",
    "FeatureMap",
    "EncoderWeights",
    "init_pretrained_stub",
    "encode",
    "encoder_forward",
    "encoder_backward",
    "tokenize",
    "parameter_count",
    "pretrain_reconstruction",
]


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 256
    token_patch: int = 16
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    feature_layers: tuple = ()  # empty = last two blocks

    def __post_init__(self):
        if self.input_size % self.token_patch != 0:
            raise ValueError("input_size must be divisible by token_patch")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if not self.feature_layers:
            object.__setattr__(self, "feature_layers", (self.layers - 2, self.layers - 1) if self.layers >= 2 else (self.layers - 1,))
        bad = [i for i in self.feature_layers if not 0 <= i < self.layers]
        if bad:
            raise ValueError(f"feature layers {bad} out of range for {self.layers} blocks")

    @property
    def grid(self) -> int:
        return self.input_size // self.token_patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "token_patch": self.token_patch,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "feature_layers": list(self.feature_layers),
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            input_size=d["input_size"],
            token_patch=d["token_patch"],
            embed_dim=d["embed_dim"],
            layers=d["layers"],
            heads=d["heads"],
            mlp_ratio=d["mlp_ratio"],
            feature_layers=tuple(d.get("feature_layers", ())),
        )


@dataclass
class FeatureMap:
    tokens: np.ndarray  # (grid, grid, embed_dim)
    layer_index: int


@dataclass
class EncoderWeights:
    params: dict
    cfg: EncoderConfig

    def copy(self) -> "EncoderWeights":
        return EncoderWeights({k: v.copy() for k, v in self.params.items()}, replace(self.cfg))

    def save(self, path) -> None:
        save_tensors(self.params, path, meta={"config": self.cfg.to_dict()})

    @staticmethod
    def load(path) -> "EncoderWeights":
        tensors, meta = load_tensors(path)
        return EncoderWeights(tensors, EncoderConfig.from_dict(meta["config"]))


def init_pretrained_stub(seed: int, cfg: EncoderConfig) -> EncoderWeights:
    """Deterministic stand-in for a pretrained backbone.

    Truncated normal (std 0.02) weights, zero biases, unit layernorm gains.
    """
    rng = rng_for(seed, "encoder-init")
    d = cfg.embed_dim
    params = {
        "patch_embed.weight": nn.trunc_normal(rng, (d, cfg.token_patch * cfg.token_patch * 3)),
        "patch_embed.bias": np.zeros(d, np.float32),
        "pos_embed": nn.trunc_normal(rng, (cfg.tokens, d)),
    }
    for i in range(cfg.layers):
        nn.init_block_params(params, f"blocks.{i}", d, cfg.mlp_hidden, rng)
    return EncoderWeights(params, cfg)


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count for a config (matches the tensor tally)."""
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    patch = d * (cfg.token_patch**2 * 3) + d
    pos = cfg.tokens * d
    per_block = (
        2 * (2 * d)  # two layernorms
        + (3 * d * d + 3 * d)  # qkv
        + (d * d + d)  # proj
        + (hid * d + hid)  # fc1
        + (d * hid + d)  # fc2
    )
    return patch + pos + cfg.layers * per_block


def tokenize(img: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(B, S, S, 3) or (S, S, 3) image -> (B, tokens, token_patch^2 * 3)."""
    single = img.ndim == 3
    if single:
        img = img[None]
    b, h, w, c = img.shape
    if h != cfg.input_size or w != cfg.input_size or c != 3:
        raise DimensionMismatchError(
            f"encoder expects {cfg.input_size}x{cfg.input_size}x3 input, got {h}x{w}x{c}"
        )
    p, g = cfg.token_patch, cfg.grid
    tok = img.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * c)
    return tok


def encoder_forward(weights: EncoderWeights, imgs: np.ndarray, adapters: dict | None = None,
                    want_layers=None, keep_cache: bool = False):
    """Run the encoder on a batch of images.

    Returns (features, cache): features maps layer index -> (B, T, D) token
    array, cache is None unless keep_cache is set.
    """
    cfg = weights.cfg
    params = weights.params
    want = tuple(want_layers) if want_layers is not None else cfg.feature_layers
    tok = tokenize(imgs, cfg).astype(params["patch_embed.weight"].dtype)
    x, embed_cache = nn.linear_fwd(tok, params["patch_embed.weight"], params["patch_embed.bias"])
    x = x + params["pos_embed"]
    feats = {}
    block_caches = []
    for i in range(cfg.layers):
        x, cache = nn.block_fwd(x, params, f"blocks.{i}", adapters, cfg.heads)
        if keep_cache:
            block_caches.append(cache)
        if i in want:
            feats[i] = x
    cache = (embed_cache, block_caches, want, cfg) if keep_cache else None
    return feats, cache


def encoder_backward(dfeats: dict, cache, grads: dict) -> None:
    """Accumulate gradients given d(loss)/d(features) per selected layer.

    Gradients for base weights land under their parameter names; adapter
    gradients (when adapters were active in the forward pass) land under
    ``<target>.A`` / ``<target>.B``.
    """
    embed_cache, block_caches, want, cfg = cache
    dx = None
    for i in range(cfg.layers - 1, -1, -1):
        if dx is None:
            dx = np.zeros_like(block_caches[i][0][0])  # matches block input shape
        if i in dfeats:
            dx = dx + dfeats[i]
        dx = nn.block_bwd(dx, block_caches[i], grads, f"blocks.{i}")
    nn._acc(grads, "pos_embed", dx.sum(axis=0))
    nn.linear_bwd(dx, embed_cache, grads, "patch_embed")


def encode(weights, img: np.ndarray, want_layers=None) -> list:
    """Feature maps for one image; accepts EncoderWeights or an adapted model.

    Adapted models (anything with ``.base`` and ``.adapters``) are unwrapped
    so detectors can hold either form.
    """
    adapters = None
    if hasattr(weights, "base") and hasattr(weights, "adapters"):
        adapters = weights.adapters
        weights = weights.base
    feats, _ = encoder_forward(weights, img[None], adapters=adapters, want_layers=want_layers)
    g = weights.cfg.grid
    return [
        FeatureMap(tokens=feats[i][0].reshape(g, g, weights.cfg.embed_dim), layer_index=i)
        for i in sorted(feats)
    ]


def pretrain_reconstruction(weights: EncoderWeights, images: list, epochs: int, seed: int,
                            lr: float = 1e-3, batch_size: int = 8) -> list:
    """Short self-supervised warm start: reconstruct token pixels from features.

    A throwaway linear head maps last-block tokens back to their pixel
    patches under an L2 loss; encoder weights are updated in place. Returns
    the per-epoch mean loss curve.
    """
    cfg = weights.cfg
    rng = rng_for(seed, "pretrain")
    d_out = cfg.token_patch**2 * 3
    head = {
        "pix.weight": nn.trunc_normal(rng, (d_out, cfg.embed_dim)),
        "pix.bias": np.zeros(d_out, np.float32),
    }
    trainable = list(weights.params) + list(head)
    opt = nn.Adam(lr=lr)
    curve = []
    n = len(images)
    for epoch in range(epochs):
        order = rng_for(seed, "pretrain-order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = np.stack([images[i] for i in idx])
            target = tokenize(batch, cfg)
            feats, cache = encoder_forward(
                weights, batch, want_layers=(cfg.layers - 1,), keep_cache=True
            )
            x = feats[cfg.layers - 1]
            pred, head_cache = nn.linear_fwd(x, head["pix.weight"], head["pix.bias"])
            diff = pred - target
            loss = float((diff * diff).mean())
            total += loss * len(idx)
            grads = {}
            dpred = 2.0 * diff / diff.size
            dx = nn.linear_bwd(dpred, head_cache, grads, "pix")
            encoder_backward({cfg.layers - 1: dx}, cache, grads)
            params_all = {**weights.params, **head}
            opt.step(params_all, grads, trainable)
            for k in weights.params:
                weights.params[k] = params_all[k]
            for k in head:
                head[k] = params_all[k]
        curve.append(total / n)
    return curve
