"""Numpy building blocks with hand-written backward passes, plus Adam.

Every layer comes as a forward/backward pair.  Forward returns (output,
cache); backward takes the upstream gradient and the cache and returns the
input gradient plus parameter gradients in the forward argument order.
Models keep their parameters in flat name -> ndarray dicts so the optimizer,
checkpointing, and finite-difference checks can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SQRT_2 = np.sqrt(2.0)
SQRT_2_PI = np.sqrt(2.0 / np.pi)


# -- initializers ------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float64) -> np.ndarray:
    """Normal(0, std) clipped at two standard deviations."""
    w = rng.normal(0.0, std, size=shape)
    return np.clip(w, -2 * std, 2 * std).astype(dtype)


def sinusoidal_embedding(values: np.ndarray, dim: int, max_period: float) -> np.ndarray:
    """Fixed sin/cos features of scalar values; rows are distinct for
    distinct non-negative values below max_period."""
    if dim % 2 != 0:
        raise ValidationError(f"sinusoidal embedding dim must be even, got {dim}")
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = values[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


# -- elementwise activations -------------------------------------------------

GELU_C = 0.044715


def gelu_forward(x):
    """Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    In-place chains keep at most one large temporary alive (fresh >128K
    allocations hit the glibc mmap path, which dominates small-model matmuls).
    """
    u = x * x
    u *= GELU_C
    u += 1.0
    u *= x
    u *= SQRT_2_PI
    np.tanh(u, out=u)
    y = u + 1.0
    y *= 0.5
    y *= x
    return y, (x, u)


def gelu_backward(dy, cache):
    x, t = cache  # t = tanh(u)
    du = x * x
    du *= 3.0 * GELU_C
    du += 1.0
    du *= SQRT_2_PI  # du = u'(x)
    d = t * t
    np.subtract(1.0, d, out=d)  # sech^2
    d *= du
    d *= x
    d += 1.0
    d += t
    d *= 0.5
    d *= dy
    return d


def silu_forward(x):
    sig = np.exp(-x)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    return x * sig, (x, sig)


def silu_backward(dy, cache):
    x, sig = cache
    r = 1.0 - sig
    r *= x
    r += 1.0
    r *= sig
    r *= dy
    return r


def softmax(x, axis=-1):
    e = x - x.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


# -- linear ------------------------------------------------------------------

def linear_forward(x, w, b):
    y = x @ w
    y += b
    return y, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


# -- layer norm (no affine; modulation supplies scale/shift) -------------------

def layernorm_forward(x, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    y = x - mu
    var = np.mean(y * y, axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    y *= inv
    return y, (y, inv)


def layernorm_backward(dy, cache):
    y, inv = cache
    dy_mean = dy.mean(axis=-1, keepdims=True)
    proj = np.mean(dy * y, axis=-1, keepdims=True)
    dx = y * proj
    dx += dy_mean
    np.subtract(dy, dx, out=dx)
    dx *= inv
    return dx


# -- multi-head self-attention (full attention over tokens) -------------------

def attention_forward(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads: int):
    # x: (B, H, M)
    B, H, M = x.shape
    hd = M // n_heads

    def proj(w, b):
        p = x @ w
        p += b
        return p.reshape(B, H, n_heads, hd).transpose(0, 2, 1, 3)  # (B,h,H,d)

    q, k, v = proj(wq, bq), proj(wk, bk), proj(wv, bv)
    scale = 1.0 / np.sqrt(hd)
    scores = q @ k.transpose(0, 1, 3, 2)  # (B,h,H,H)
    scores *= scale
    probs = softmax(scores, axis=-1)
    ctx = probs @ v  # (B,h,H,d)
    ctx2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(B, H, M)
    y = ctx2 @ wo
    y += bo
    cache = (x, q, k, v, probs, ctx2, wq, wk, wv, wo, scale)
    return y, cache


def attention_backward(dy, cache):
    x, q, k, v, probs, ctx2, wq, wk, wv, wo, scale = cache
    B, H, M = x.shape
    n_heads = q.shape[1]
    hd = M // n_heads

    x2 = x.reshape(-1, M)
    dwo = ctx2.reshape(-1, M).T @ dy.reshape(-1, M)
    dbo = dy.reshape(-1, M).sum(axis=0)
    dctx2 = dy @ wo.T
    dctx = dctx2.reshape(B, H, n_heads, hd).transpose(0, 2, 1, 3)  # (B,h,H,d)

    dprobs = dctx @ v.transpose(0, 1, 3, 2)  # (B,h,H,H)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    # softmax backward, rowwise over the last axis
    dscores = dprobs
    dscores -= np.einsum("bhij,bhij->bhi", dprobs, probs)[..., None]
    dscores *= probs
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    def heads_to_flat(t):  # (B,h,H,d) -> (B*H, M)
        return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(-1, M)

    dq2, dk2, dv2 = heads_to_flat(dq), heads_to_flat(dk), heads_to_flat(dv)
    dwq, dbq = x2.T @ dq2, dq2.sum(axis=0)
    dwk, dbk = x2.T @ dk2, dk2.sum(axis=0)
    dwv, dbv = x2.T @ dv2, dv2.sum(axis=0)
    dx = dq2 @ wq.T
    dx += dk2 @ wk.T
    dx += dv2 @ wv.T
    return (dx.reshape(B, H, M), dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)


# -- adaptive modulation helpers ----------------------------------------------

def modulate_forward(normed, shift, scale):
    """y = normed * (1 + scale) + shift, with (B, M) shift/scale broadcast
    over the token axis of (B, H, M) inputs."""
    y = normed * (1.0 + scale)[:, None, :]
    y += shift[:, None, :]
    return y, (normed, scale)


def modulate_backward(dy, cache):
    normed, scale = cache
    dnormed = dy * (1.0 + scale)[:, None, :]
    dscale = np.einsum("bhm,bhm->bm", dy, normed)
    dshift = dy.sum(axis=1)
    return dnormed, dshift, dscale


def gate_forward(residual, branch, gate):
    """y = residual + gate * branch with (B, M) gate broadcast over tokens."""
    y = branch * gate[:, None, :]
    y += residual
    return y, (branch, gate)


def gate_backward(dy, cache):
    branch, gate = cache
    dresidual = dy
    dbranch = dy * gate[:, None, :]
    dgate = np.einsum("bhm,bhm->bm", dy, branch)
    return dresidual, dbranch, dgate


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected adaptive-moment optimizer state for a parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if set(grads) != set(params):
        raise ValidationError(
            f"gradient keys do not match parameters: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
        m = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1 - state.beta2) * (g * g)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(m=new_m, v=new_v, step=t, lr=state.lr,
                                 beta1=state.beta1, beta2=state.beta2, eps=state.eps)


# -- plain MLP (GELU hidden layers) --------------------------------------------

def mlp_init(sizes, rng: np.random.Generator, dtype=np.float32,
             zero_final: bool = True) -> dict:
    """Parameters for a Linear/GELU stack; layer i maps sizes[i] -> sizes[i+1].

    The final layer starts at zero by default so fresh models predict 0.
    """
    params = {}
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        if zero_final and i == last:
            params[f"l{i}.w"] = np.zeros((sizes[i], sizes[i + 1]), dtype=dtype)
        else:
            params[f"l{i}.w"] = trunc_normal(rng, (sizes[i], sizes[i + 1]),
                                             std=1.0 / np.sqrt(sizes[i]), dtype=dtype)
        params[f"l{i}.b"] = np.zeros(sizes[i + 1], dtype=dtype)
    return params


def mlp_n_layers(params: dict) -> int:
    return sum(1 for k in params if k.endswith(".w"))


def mlp_forward(params: dict, x: np.ndarray):
    n = mlp_n_layers(params)
    caches = []
    h = x
    for i in range(n):
        h, c_lin = linear_forward(h, params[f"l{i}.w"], params[f"l{i}.b"])
        if i < n - 1:
            h, c_act = gelu_forward(h)
        else:
            c_act = None
        caches.append((c_lin, c_act))
    return h, caches


def mlp_backward(params: dict, caches, dy):
    n = mlp_n_layers(params)
    grads = {}
    d = dy
    for i in reversed(range(n)):
        c_lin, c_act = caches[i]
        if c_act is not None:
            d = gelu_backward(d, c_act)
        d, grads[f"l{i}.w"], grads[f"l{i}.b"] = linear_backward(d, c_lin)
    return d, grads


def clone_params(params: dict) -> dict:
    return {k: p.copy() for k, p in params.items()}


def params_finite(params: dict) -> bool:
    return all(np.isfinite(p).all() for p in params.values())
