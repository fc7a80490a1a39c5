"""Low-rank adaptation of the frozen encoder's attention projections.

Every targeted linear layer (qkv and/or proj in each attention block) gains
a factor pair: the adapted weight is ``W0 + (alpha / r) * B @ A`` with
``A: (r, k)`` random-initialized, ``B: (d, r)`` zero-initialized, so the
adapted model is bit-identical to the base model until training moves B.
The hot path never materializes the dense update; it applies the two
low-rank multiplies. Training optimizes only the factors and the attached
detector's non-encoder parameters; the base weights stay frozen.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoder import EncoderWeights
from .errors import LoraStateError, PatchguardError
from .imgio import load_tensors, save_tensors
from .seeding import rng_for

__all__ = [
    "LoraAdapter",
    "LoraConfig",
    "AdaptedEncoder",
    "inject",
    "adapted_forward",
    "merge",
    "train_adapters",
    "trainable_parameter_count",
]

TARGET_KINDS = ("qkv", "proj")


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    rank: int
    alpha: float
    target_name: str


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = ("qkv", "proj")
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8

    def __post_init__(self):
        bad = [t for t in self.targets if t not in TARGET_KINDS]
        if bad:
            raise PatchguardError(f"unknown LoRA target kind(s): {bad}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "targets": list(self.targets),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "LoraConfig":
        return LoraConfig(
            rank=d["rank"],
            alpha=d["alpha"],
            targets=tuple(d["targets"]),
            learning_rate=d.get("learning_rate", 1e-3),
            epochs=d.get("epochs", 10),
            batch_size=d.get("batch_size", 8),
        )


@dataclass
class AdaptedEncoder:
    base: EncoderWeights
    adapters: dict  # target name -> LoraAdapter
    lora_cfg: LoraConfig
    merged: bool = False
    loss_curve: list = field(default_factory=list)

    @property
    def cfg(self):
        return self.base.cfg

    def adapter_params(self) -> dict:
        """Flat view of the factors, keyed ``<target>.A`` / ``<target>.B``."""
        out = {}
        for name, ad in self.adapters.items():
            out[name + ".A"] = ad.A
            out[name + ".B"] = ad.B
        return out

    def set_adapter_params(self, flat: dict) -> None:
        for name, ad in self.adapters.items():
            ad.A = flat[name + ".A"]
            ad.B = flat[name + ".B"]

    def save(self, path) -> None:
        save_tensors(
            self.adapter_params(),
            path,
            meta={"lora": self.lora_cfg.to_dict(), "targets": sorted(self.adapters)},
        )

    @staticmethod
    def load(path, base: EncoderWeights) -> "AdaptedEncoder":
        tensors, meta = load_tensors(path)
        cfg = LoraConfig.from_dict(meta["lora"])
        adapters = {}
        for name in meta["targets"]:
            adapters[name] = LoraAdapter(
                A=tensors[name + ".A"],
                B=tensors[name + ".B"],
                rank=cfg.rank,
                alpha=cfg.alpha,
                target_name=name,
            )
        return AdaptedEncoder(base, adapters, cfg)


def _target_layers(enc_cfg, targets) -> list:
    names = []
    for i in range(enc_cfg.layers):
        if "qkv" in targets:
            names.append((f"blocks.{i}.attn.qkv", 3 * enc_cfg.embed_dim, enc_cfg.embed_dim))
        if "proj" in targets:
            names.append((f"blocks.{i}.attn.proj", enc_cfg.embed_dim, enc_cfg.embed_dim))
    return names


def inject(encoder: EncoderWeights, cfg: LoraConfig, seed: int) -> AdaptedEncoder:
    """Attach zero-initialized adapters to every targeted projection.

    B = 0 guarantees the adapted model equals the base model exactly at
    injection time.
    """
    adapters = {}
    for name, d_out, k in _target_layers(encoder.cfg, cfg.targets):
        r = cfg.rank
        if r > min(d_out, k):
            raise PatchguardError(f"rank {r} exceeds min(d, k) = {min(d_out, k)} for {name}")
        rng = rng_for(seed, "lora-init", name)
        adapters[name] = LoraAdapter(
            A=nn.trunc_normal(rng, (r, k)),
            B=np.zeros((d_out, r), np.float32),
            rank=r,
            alpha=cfg.alpha,
            target_name=name,
        )
    return AdaptedEncoder(encoder, adapters, cfg)


def adapted_forward(w0: np.ndarray, bias, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """(W0 + (alpha/r) B A) x via two low-rank multiplies."""
    if adapter.A.shape[1] != x.shape[-1]:
        raise PatchguardError(
            f"adapter input dim {adapter.A.shape[1]} does not match x dim {x.shape[-1]}"
        )
    scale = adapter.alpha / adapter.rank
    y = x @ w0.T + scale * ((x @ adapter.A.T) @ adapter.B.T)
    if bias is not None:
        y = y + bias
    return y


def trainable_parameter_count(model: AdaptedEncoder) -> int:
    return sum(ad.A.size + ad.B.size for ad in model.adapters.values())


def merge(model: AdaptedEncoder) -> EncoderWeights:
    """Fold the low-rank updates into plain weights; consumes the adapters."""
    if model.merged:
        raise LoraStateError("adapters already merged into the base weights")
    merged = model.base.copy()
    for name, ad in model.adapters.items():
        scale = ad.alpha / ad.rank
        merged.params[name + ".weight"] = (
            merged.params[name + ".weight"] + scale * (ad.B @ ad.A)
        ).astype(np.float32)
    model.merged = True
    return merged


def train_adapters(model: AdaptedEncoder, detector, patches: list, cfg: LoraConfig, seed: int):
    """Jointly optimize adapter factors and the detector's own parameters.

    The objective is the detector's unsupervised training loss on normal
    patches; base encoder weights receive no updates. Returns the model
    (adapters updated in place) with the per-epoch loss curve recorded.
    """
    if model.merged:
        raise LoraStateError("cannot train a merged model")
    if not patches:
        raise PatchguardError("empty train split: no patches to adapt on")
    if not hasattr(detector, "joint_step"):
        raise PatchguardError(
            f"{getattr(detector, 'kind', '?')} detector does not expose an encoder to adapt"
        )
    opt = nn.Adam(lr=cfg.learning_rate)
    trainable = list(model.adapter_params()) + detector.trainable_names()
    n = len(patches)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "adapt-order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = np.stack([patches[i] for i in idx])
            loss, grads = detector.joint_step(model, batch)
            flat = {**model.adapter_params(), **detector.head}
            opt.step(flat, grads, trainable)
            model.set_adapter_params(flat)
            detector.set_head_params(flat)
            total += loss * len(idx)
        curve.append(total / n)
    model.loss_curve = curve
    detector.trained = True
    detector.loss_curve = list(curve)
    return model
