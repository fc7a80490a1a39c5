"""Minimal neural-net layers with explicit forward/backward passes.

Parameters live in flat ``{name: ndarray}`` dicts; every ``*_fwd`` returns
``(output, cache)`` and the matching ``*_bwd`` consumes ``(grad_out, cache)``
and contributes gradients into a dict keyed by parameter name. All layers
are dtype-generic: float32 in production, float64 for finite-difference
gradient checks. Nonlinearities are smooth (tanh-form gelu) so numeric
differentiation is well behaved everywhere.
"""

import numpy as np

__all__ = [
    "trunc_normal",
    "linear_fwd",
    "linear_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "block_fwd",
    "block_bwd",
    "block_param_names",
    "init_block_params",
    "cosine_score",
    "cosine_loss_and_grad",
    "Adam",
]

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# --------------------------------------------------------------------------- #
# primitive layers
# --------------------------------------------------------------------------- #
def linear_fwd(x, w, b=None):
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_bwd(dy, cache, grads, name):
    x, w, has_bias = cache
    dx = dy @ w
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    _acc(grads, name + ".weight", dy2.T @ x2)
    if has_bias:
        _acc(grads, name + ".bias", dy2.sum(axis=0))
    return dx


def lora_linear_fwd(x, w, b, a_mat, b_mat, scale):
    z = x @ a_mat.T
    y = x @ w.T + scale * (z @ b_mat.T)
    if b is not None:
        y = y + b
    return y, (x, w, a_mat, b_mat, scale, z, b is not None)


def lora_linear_bwd(dy, cache, grads, name, adapter_name):
    x, w, a_mat, b_mat, scale, z, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    z2 = z.reshape(-1, z.shape[-1])
    _acc(grads, name + ".weight", dy2.T @ x2)
    if has_bias:
        _acc(grads, name + ".bias", dy2.sum(axis=0))
    dz2 = dy2 @ b_mat  # (N, r)
    _acc(grads, adapter_name + ".B", scale * (dy2.T @ z2))
    _acc(grads, adapter_name + ".A", scale * (dz2.T @ x2))
    dx = dy @ w + scale * (dz2 @ a_mat).reshape(x.shape)
    return dx


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def layernorm_bwd(dy, cache, grads, name):
    xh, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    _acc(grads, name + ".weight", (dy * xh).sum(axis=axes))
    _acc(grads, name + ".bias", dy.sum(axis=axes))
    dxh = dy * g
    m1 = dxh.mean(axis=-1, keepdims=True)
    m2 = (dxh * xh).mean(axis=-1, keepdims=True)
    return (dxh - m1 - xh * m2) * inv


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------- #
# transformer block (pre-norm attention + MLP)
# --------------------------------------------------------------------------- #
def _maybe_lora_fwd(x, params, adapters, layer_name):
    w = params[layer_name + ".weight"]
    b = params.get(layer_name + ".bias")
    adapter = adapters.get(layer_name) if adapters else None
    if adapter is None:
        y, cache = linear_fwd(x, w, b)
        return y, ("plain", cache)
    scale = adapter.alpha / adapter.rank
    y, cache = lora_linear_fwd(x, w, b, adapter.A, adapter.B, scale)
    return y, ("lora", cache)


def _maybe_lora_bwd(dy, tagged_cache, grads, layer_name):
    kind, cache = tagged_cache
    if kind == "plain":
        return linear_bwd(dy, cache, grads, layer_name)
    return lora_linear_bwd(dy, cache, grads, layer_name, layer_name)


def attention_fwd(x, params, prefix, adapters, n_heads):
    bsz, t, d = x.shape
    dh = d // n_heads
    qkv, qkv_cache = _maybe_lora_fwd(x, params, adapters, prefix + ".qkv")
    qkv_heads = qkv.reshape(bsz, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv_heads[0], qkv_heads[1], qkv_heads[2]
    scale = 1.0 / np.sqrt(dh)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    p = _softmax(s)
    o = p @ v  # (B, h, T, dh)
    o_merged = o.transpose(0, 2, 1, 3).reshape(bsz, t, d)
    y, proj_cache = _maybe_lora_fwd(o_merged, params, adapters, prefix + ".proj")
    return y, (qkv_cache, proj_cache, q, k, v, p, scale, n_heads)


def attention_bwd(dy, cache, grads, prefix):
    qkv_cache, proj_cache, q, k, v, p, scale, n_heads = cache
    bsz, h, t, dh = q.shape
    d = h * dh
    do_merged = _maybe_lora_bwd(dy, proj_cache, grads, prefix + ".proj")
    do = do_merged.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
    dv = p.transpose(0, 1, 3, 2) @ do
    dp = do @ v.transpose(0, 1, 3, 2)
    ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
    dq = (ds @ k) * scale
    dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
    dqkv = np.stack([dq, dk, dv], axis=0).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * d)
    return _maybe_lora_bwd(dqkv, qkv_cache, grads, prefix + ".qkv")


def block_fwd(x, params, prefix, adapters, n_heads):
    h1, ln1_cache = layernorm_fwd(x, params[prefix + ".norm1.weight"], params[prefix + ".norm1.bias"])
    attn, attn_cache = attention_fwd(h1, params, prefix + ".attn", adapters, n_heads)
    x1 = x + attn
    h2, ln2_cache = layernorm_fwd(x1, params[prefix + ".norm2.weight"], params[prefix + ".norm2.bias"])
    f1, fc1_cache = linear_fwd(h2, params[prefix + ".mlp.fc1.weight"], params[prefix + ".mlp.fc1.bias"])
    g1, gelu_cache = gelu_fwd(f1)
    f2, fc2_cache = linear_fwd(g1, params[prefix + ".mlp.fc2.weight"], params[prefix + ".mlp.fc2.bias"])
    return x1 + f2, (ln1_cache, attn_cache, ln2_cache, fc1_cache, gelu_cache, fc2_cache)


def block_bwd(dy, cache, grads, prefix):
    ln1_cache, attn_cache, ln2_cache, fc1_cache, gelu_cache, fc2_cache = cache
    dg1 = linear_bwd(dy, fc2_cache, grads, prefix + ".mlp.fc2")
    df1 = gelu_bwd(dg1, gelu_cache)
    dh2 = linear_bwd(df1, fc1_cache, grads, prefix + ".mlp.fc1")
    dx1 = dy + layernorm_bwd(dh2, ln2_cache, grads, prefix + ".norm2")
    dh1 = attention_bwd(dx1, attn_cache, grads, prefix + ".attn")
    dx = dx1 + layernorm_bwd(dh1, ln1_cache, grads, prefix + ".norm1")
    return dx


def block_param_names(prefix: str) -> list:
    return [
        prefix + ".norm1.weight",
        prefix + ".norm1.bias",
        prefix + ".attn.qkv.weight",
        prefix + ".attn.qkv.bias",
        prefix + ".attn.proj.weight",
        prefix + ".attn.proj.bias",
        prefix + ".norm2.weight",
        prefix + ".norm2.bias",
        prefix + ".mlp.fc1.weight",
        prefix + ".mlp.fc1.bias",
        prefix + ".mlp.fc2.weight",
        prefix + ".mlp.fc2.bias",
    ]


def init_block_params(params: dict, prefix: str, dim: int, hidden: int, rng) -> None:
    params[prefix + ".norm1.weight"] = np.ones(dim, np.float32)
    params[prefix + ".norm1.bias"] = np.zeros(dim, np.float32)
    params[prefix + ".attn.qkv.weight"] = trunc_normal(rng, (3 * dim, dim))
    params[prefix + ".attn.qkv.bias"] = np.zeros(3 * dim, np.float32)
    params[prefix + ".attn.proj.weight"] = trunc_normal(rng, (dim, dim))
    params[prefix + ".attn.proj.bias"] = np.zeros(dim, np.float32)
    params[prefix + ".norm2.weight"] = np.ones(dim, np.float32)
    params[prefix + ".norm2.bias"] = np.zeros(dim, np.float32)
    params[prefix + ".mlp.fc1.weight"] = trunc_normal(rng, (hidden, dim))
    params[prefix + ".mlp.fc1.bias"] = np.zeros(hidden, np.float32)
    params[prefix + ".mlp.fc2.weight"] = trunc_normal(rng, (dim, hidden))
    params[prefix + ".mlp.fc2.bias"] = np.zeros(dim, np.float32)


# --------------------------------------------------------------------------- #
# cosine objective shared by the feature detector and its anomaly score
# --------------------------------------------------------------------------- #
# Epsilon sits inside the square root (norm = sqrt(sum_sq + eps)) so the
# analytic gradient below is exact for the regularized objective even when
# a vector is near zero.
_COS_EPS = 1e-12


def cosine_score(recon, target):
    """Per-token 1 - cosine similarity; shape = leading dims of the inputs."""
    nr = np.sqrt((recon * recon).sum(axis=-1) + _COS_EPS)
    nt = np.sqrt((target * target).sum(axis=-1) + _COS_EPS)
    cos = (recon * target).sum(axis=-1) / (nr * nt)
    return 1.0 - cos


def cosine_loss_and_grad(recon, target):
    """Mean (1 - cos) over all tokens plus d(loss)/d(recon).

    The target is treated as constant (no gradient flows into it).
    """
    nr = np.sqrt((recon * recon).sum(axis=-1, keepdims=True) + _COS_EPS)
    nt = np.sqrt((target * target).sum(axis=-1, keepdims=True) + _COS_EPS)
    dot = (recon * target).sum(axis=-1, keepdims=True)
    cos = dot / (nr * nt)
    n_tokens = int(np.prod(recon.shape[:-1]))
    loss = float(1.0 - cos.mean())
    dcos = -1.0 / n_tokens
    drecon = dcos * (target / (nr * nt) - cos * recon / (nr * nr))
    return loss, drecon


# --------------------------------------------------------------------------- #
# optimizer
# --------------------------------------------------------------------------- #
class Adam:
    """Adam with bias correction; holds first/second-moment state per tensor."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict, trainable: list) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in trainable:
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(params[name].dtype, copy=False)
            if name not in self._m:
                self._m[name] = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            params[name] = params[name] - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
