"""Hot image kernels with numba and pure-NumPy implementations.

Each kernel exists twice: ``*_loops`` (explicit loops, compiled with
``numba.njit`` when the accelerated backend is active) and ``*_np``
(vectorized NumPy, the fallback). The public names below are bound to one
of the two at import time; see :mod:`patchguard.accel` for the switch and
``benchmarks/bench_kernels.py`` for a timing comparison.

Conventions: images are ``(H, W, C)`` float32, masks are ``(H, W)`` uint8
internally (0/1) and exposed as bool at module boundaries. Resampling uses
half-pixel centers, so integer-factor nearest upscaling expands every source
pixel into an exact ``k x k`` block.
"""

import numpy as np

from .accel import USE_NUMBA, njit

__all__ = [
    "bilinear_resize",
    "nearest_resize",
    "largest_component",
    "fill_holes",
    "gaussian_blur",
]


# --------------------------------------------------------------------------- #
# bilinear resize (images)
# --------------------------------------------------------------------------- #
def _bilinear_resize_loops(img, out_h, out_w):
    h, w, c = img.shape
    out = np.empty((out_h, out_w, c), np.float32)
    scale_y = h / out_h
    scale_x = w / out_w
    for i in range(out_h):
        sy = (i + 0.5) * scale_y - 0.5
        if sy < 0.0:
            sy = 0.0
        y0 = int(sy)
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        fy = sy - y0
        if fy < 0.0:
            fy = 0.0
        elif fy > 1.0:
            fy = 1.0
        for j in range(out_w):
            sx = (j + 0.5) * scale_x - 0.5
            if sx < 0.0:
                sx = 0.0
            x0 = int(sx)
            if x0 > w - 2:
                x0 = w - 2
            if x0 < 0:
                x0 = 0
            fx = sx - x0
            if fx < 0.0:
                fx = 0.0
            elif fx > 1.0:
                fx = 1.0
            for k in range(c):
                top = img[y0, x0, k] * (1.0 - fx) + img[y0, x0 + 1, k] * fx
                bot = img[y0 + 1, x0, k] * (1.0 - fx) + img[y0 + 1, x0 + 1, k] * fx
                out[i, j, k] = top * (1.0 - fy) + bot * fy
    return out


def _bilinear_resize_np(img, out_h, out_w):
    h, w, _ = img.shape
    sy = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    sx = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    y0 = np.clip(sy.astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(sx.astype(np.int64), 0, max(w - 2, 0))
    fy = np.clip(sy - y0, 0.0, 1.0).astype(np.float32)[:, None, None]
    fx = np.clip(sx - x0, 0.0, 1.0).astype(np.float32)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    top = tl * (1.0 - fx) + tr * fx
    bot = bl * (1.0 - fx) + br * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


# --------------------------------------------------------------------------- #
# nearest-neighbor resize (masks)
# --------------------------------------------------------------------------- #
def _nearest_resize_loops(mask, out_h, out_w):
    h, w = mask.shape
    out = np.empty((out_h, out_w), mask.dtype)
    scale_y = h / out_h
    scale_x = w / out_w
    for i in range(out_h):
        sy = int((i + 0.5) * scale_y)
        if sy > h - 1:
            sy = h - 1
        for j in range(out_w):
            sx = int((j + 0.5) * scale_x)
            if sx > w - 1:
                sx = w - 1
            out[i, j] = mask[sy, sx]
    return out


def _nearest_resize_np(mask, out_h, out_w):
    h, w = mask.shape
    sy = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    sx = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return mask[np.ix_(sy, sx)]


# --------------------------------------------------------------------------- #
# largest 8-connected component
# --------------------------------------------------------------------------- #
def _largest_component_loops(fg):
    h, w = fg.shape
    labels = np.zeros((h, w), np.int32)
    stack = np.empty(h * w, np.int64)
    best_label = 0
    best_size = 0
    current = 0
    for start in range(h * w):
        if fg.flat[start] == 0 or labels.flat[start] != 0:
            continue
        current += 1
        size = 0
        top = 0
        stack[top] = start
        top += 1
        labels.flat[start] = current
        while top > 0:
            top -= 1
            idx = stack[top]
            r = idx // w
            c = idx % w
            size += 1
            for dr in range(-1, 2):
                rr = r + dr
                if rr < 0 or rr >= h:
                    continue
                for dc in range(-1, 2):
                    cc = c + dc
                    if cc < 0 or cc >= w:
                        continue
                    nidx = rr * w + cc
                    if fg.flat[nidx] != 0 and labels.flat[nidx] == 0:
                        labels.flat[nidx] = current
                        stack[top] = nidx
                        top += 1
        if size > best_size:
            best_size = size
            best_label = current
    out = np.zeros((h, w), np.uint8)
    if best_label > 0:
        for i in range(h * w):
            if labels.flat[i] == best_label:
                out.flat[i] = 1
    return out


def _dilate8(mask):
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out |= padded[dr : dr + mask.shape[0], dc : dc + mask.shape[1]]
    return out


def _largest_component_np(fg):
    fg_b = fg.astype(bool)
    remaining = fg_b.copy()
    best = np.zeros_like(fg_b)
    best_size = 0
    while remaining.any():
        seed = np.zeros_like(fg_b)
        seed.flat[np.argmax(remaining)] = True
        comp = seed
        while True:
            grown = _dilate8(comp) & fg_b
            if grown.sum() == comp.sum():
                break
            comp = grown
        size = int(comp.sum())
        if size > best_size:
            best_size = size
            best = comp
        remaining &= ~comp
    return best.astype(np.uint8)


# --------------------------------------------------------------------------- #
# hole filling (4-connected background flood from the border)
# --------------------------------------------------------------------------- #
def _fill_holes_loops(fg):
    h, w = fg.shape
    reachable = np.zeros((h, w), np.uint8)
    stack = np.empty(h * w, np.int64)
    top = 0
    for c in range(w):
        for r in (0, h - 1):
            if fg[r, c] == 0 and reachable[r, c] == 0:
                reachable[r, c] = 1
                stack[top] = r * w + c
                top += 1
    for r in range(h):
        for c in (0, w - 1):
            if fg[r, c] == 0 and reachable[r, c] == 0:
                reachable[r, c] = 1
                stack[top] = r * w + c
                top += 1
    while top > 0:
        top -= 1
        idx = stack[top]
        r = idx // w
        c = idx % w
        if r > 0 and fg[r - 1, c] == 0 and reachable[r - 1, c] == 0:
            reachable[r - 1, c] = 1
            stack[top] = idx - w
            top += 1
        if r < h - 1 and fg[r + 1, c] == 0 and reachable[r + 1, c] == 0:
            reachable[r + 1, c] = 1
            stack[top] = idx + w
            top += 1
        if c > 0 and fg[r, c - 1] == 0 and reachable[r, c - 1] == 0:
            reachable[r, c - 1] = 1
            stack[top] = idx - 1
            top += 1
        if c < w - 1 and fg[r, c + 1] == 0 and reachable[r, c + 1] == 0:
            reachable[r, c + 1] = 1
            stack[top] = idx + 1
            top += 1
    out = np.empty((h, w), np.uint8)
    for r in range(h):
        for c in range(w):
            out[r, c] = 1 if (fg[r, c] != 0 or reachable[r, c] == 0) else 0
    return out


def _dilate4(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _fill_holes_np(fg):
    fg_b = fg.astype(bool)
    bg = ~fg_b
    reachable = np.zeros_like(bg)
    reachable[0, :] = bg[0, :]
    reachable[-1, :] = bg[-1, :]
    reachable[:, 0] = bg[:, 0]
    reachable[:, -1] = bg[:, -1]
    while True:
        grown = _dilate4(reachable) & bg
        if grown.sum() == reachable.sum():
            break
        reachable = grown
    return (fg_b | (bg & ~reachable)).astype(np.uint8)


# --------------------------------------------------------------------------- #
# separable gaussian blur, zero-padded (used to shape defect splats)
# --------------------------------------------------------------------------- #
def _gaussian_taps(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return (taps / taps.sum()).astype(np.float32)


def _blur_axis_loops(img, taps, axis):
    h, w = img.shape
    radius = taps.size // 2
    out = np.zeros((h, w), np.float32)
    if axis == 0:
        for i in range(h):
            for t in range(taps.size):
                src = i + t - radius
                if 0 <= src < h:
                    for j in range(w):
                        out[i, j] += taps[t] * img[src, j]
    else:
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for t in range(taps.size):
                    src = j + t - radius
                    if 0 <= src < w:
                        acc += taps[t] * img[i, src]
                out[i, j] = acc
    return out


def _gaussian_blur_loops_pair(img, taps):
    tmp = _blur_axis_loops_jit(img, taps, 0)
    return _blur_axis_loops_jit(tmp, taps, 1)


def _blur_axis_np(img, taps, axis):
    radius = taps.size // 2
    out = np.zeros_like(img, dtype=np.float32)
    n = img.shape[axis]
    for t, tap in enumerate(taps):
        off = t - radius
        lo_dst, hi_dst = max(0, -off), min(n, n - off)
        if lo_dst >= hi_dst:
            continue
        dst = [slice(None), slice(None)]
        src = [slice(None), slice(None)]
        dst[axis] = slice(lo_dst, hi_dst)
        src[axis] = slice(lo_dst + off, hi_dst + off)
        out[tuple(dst)] += tap * img[tuple(src)]
    return out


def _gaussian_blur_np(img, sigma):
    taps = _gaussian_taps(sigma)
    return _blur_axis_np(_blur_axis_np(img.astype(np.float32), taps, 0), taps, 1)


# --------------------------------------------------------------------------- #
# public bindings
# --------------------------------------------------------------------------- #
if USE_NUMBA:
    _bilinear_resize_jit = njit(_bilinear_resize_loops)
    _nearest_resize_jit = njit(_nearest_resize_loops)
    _largest_component_jit = njit(_largest_component_loops)
    _fill_holes_jit = njit(_fill_holes_loops)
    _blur_axis_loops_jit = njit(_blur_axis_loops)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) float32 image with bilinear sampling."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    if USE_NUMBA:
        return _bilinear_resize_jit(img, out_h, out_w)
    return _bilinear_resize_np(img, out_h, out_w)


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) bool mask with nearest-neighbor sampling."""
    m = np.ascontiguousarray(mask.astype(np.uint8))
    if USE_NUMBA:
        out = _nearest_resize_jit(m, out_h, out_w)
    else:
        out = _nearest_resize_np(m, out_h, out_w)
    return out.astype(bool)


def largest_component(fg: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected component of a bool mask."""
    m = np.ascontiguousarray(fg.astype(np.uint8))
    if USE_NUMBA:
        out = _largest_component_jit(m)
    else:
        out = _largest_component_np(m)
    return out.astype(bool)


def fill_holes(fg: np.ndarray) -> np.ndarray:
    """Fill background regions not 4-connected to the image border."""
    m = np.ascontiguousarray(fg.astype(np.uint8))
    if USE_NUMBA:
        out = _fill_holes_jit(m)
    else:
        out = _fill_holes_np(m)
    return out.astype(bool)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Zero-padded separable gaussian blur of an (H, W) float32 array."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    if sigma <= 0:
        return img.copy()
    if USE_NUMBA:
        return _gaussian_blur_loops_pair(img, _gaussian_taps(sigma))
    return _gaussian_blur_np(img, sigma)
