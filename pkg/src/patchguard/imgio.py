"""Image, mask, score-map and tensor-container file I/O.

In-memory conventions used across the package:

* image: ``(H, W, C)`` float32 in [0, 1], C is 1 or 3;
* mask: ``(H, W)`` bool, True = foreground;
* score map: ``(H, W)`` float32, finite and >= 0.

On disk, images and masks are PNG. 16-bit PNG is supported for single-channel
data only (Pillow has no 16-bit RGB mode); 3-channel images are written at
8 bits. Score maps use a raw container: 16-byte header (magic ``SMAP``,
u32-LE height, u32-LE width, u32 reserved = 0) followed by row-major
float32-LE values, so a save/load round trip is bit-exact.

Model weights use a named-tensor container: magic ``PGT1``, u32-LE header
length, a UTF-8 JSON index mapping each tensor name to shape/dtype/byte
offset, then the concatenated float32-LE payload.
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError, PatchguardError, UnsupportedImageError

__all__ = [
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "save_scoremap",
    "load_scoremap",
    "save_tensors",
    "load_tensors",
    "validate_image",
    "validate_scoremap",
]

SCOREMAP_MAGIC = b"SMAP"
TENSOR_MAGIC = b"PGT1"


def validate_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise PatchguardError(f"image must be (H, W, 1|3), got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise PatchguardError("zero-area image")
    if not np.isfinite(img).all():
        raise PatchguardError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise PatchguardError("image values must lie in [0, 1]")
    return img


def validate_scoremap(scores: np.ndarray) -> np.ndarray:
    if scores.ndim != 2:
        raise PatchguardError(f"score map must be 2-D, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise PatchguardError("score map contains non-finite values")
    if scores.min() < 0.0:
        raise PatchguardError("score map values must be >= 0")
    return scores


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG into a float32 (H, W, C) array in [0, 1].

    Values are scaled by the max code value of the source bit depth
    (255 or 65535).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("L", "RGB"):
            arr = np.asarray(im, dtype=np.float32) / 255.0
        elif mode in ("I;16", "I"):
            raw = np.asarray(im)
            if mode == "I" and raw.max(initial=0) > 65535:
                raise UnsupportedImageError(f"{path}: >16-bit data not supported")
            arr = raw.astype(np.float32) / 65535.0
        else:
            raise UnsupportedImageError(f"{path}: unsupported PNG mode {mode!r}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PatchguardError(f"{path}: zero-area image")
    return validate_image(arr)


def save_image(img: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write an image as PNG. 16-bit output requires a single channel."""
    validate_image(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bit_depth == 8:
        quantized = np.round(img * 255.0).astype(np.uint8)
        if img.shape[2] == 1:
            Image.fromarray(quantized[:, :, 0]).save(path)
        else:
            Image.fromarray(quantized).save(path)
    elif bit_depth == 16:
        if img.shape[2] != 1:
            raise UnsupportedImageError("16-bit PNG output is single-channel only")
        quantized = np.round(img[:, :, 0] * 65535.0).astype(np.uint16)
        Image.fromarray(quantized).save(path)
    else:
        raise UnsupportedImageError(f"unsupported bit depth {bit_depth}")


def load_mask(path) -> np.ndarray:
    """Read a 0/255 single-channel PNG as a bool mask."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask: {path}")
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im)
    return arr >= 128


def save_mask(mask: np.ndarray, path) -> None:
    """Write a bool mask as a 0/255 single-channel PNG."""
    if mask.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2-D, got {mask.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def save_scoremap(scores: np.ndarray, path, write_png: bool = True) -> None:
    """Write the raw float32 container plus an 8-bit PNG visualization.

    The PNG is min-max normalized; a constant map renders as all zeros.
    """
    scores = np.ascontiguousarray(validate_scoremap(scores), dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = scores.shape
    header = SCOREMAP_MAGIC + struct.pack("<III", h, w, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(scores.astype("<f4").tobytes())
    if write_png:
        lo, hi = float(scores.min()), float(scores.max())
        if hi > lo:
            vis = (scores - lo) / (hi - lo)
        else:
            vis = np.zeros_like(scores)
        save_image(vis[:, :, None], path.with_suffix(".png"))


def load_scoremap(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != SCOREMAP_MAGIC:
            raise PatchguardError(f"{path}: not a score-map container")
        h, w, reserved = struct.unpack("<III", header[4:])
        if reserved != 0:
            raise PatchguardError(f"{path}: bad reserved field {reserved}")
        payload = fh.read(h * w * 4)
    if len(payload) != h * w * 4:
        raise PatchguardError(f"{path}: truncated score-map payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


def save_tensors(tensors: dict, path, meta: dict | None = None) -> None:
    """Write named float32 tensors with a JSON index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict, dict]:
    """Read a tensor container; returns (tensors, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise PatchguardError(f"{path}: not a tensor container")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, info in header["tensors"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(shape).copy()
    return tensors, header.get("meta", {})
