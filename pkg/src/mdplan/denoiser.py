"""Transformer noise predictor over plan tokens, with hand-written backprop.

Plan tokens sit at non-uniform environment-time offsets, so the positional
signal embeds the *absolute offset value* (fixed sinusoid plus a learned
refinement table) rather than the token index; an ``index`` embedding mode
exists as an ablation.  Conditioning on the diffusion step follows the
adaptive-layer-norm recipe: each pre-norm attention/MLP block is shifted,
scaled, and gated by linear projections of the step embedding, and those
projections (plus the output head) start at zero so every block is the
identity at initialization.

Gradients are exact and checked against central finite differences; see
``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import nn
from .dataset import PlanBatch
from .errors import NumericsError, ValidationError
from .nn import AdamState, adam_init, adam_step  # optimizer lives with the model  # noqa: F401

EMBED_MODES = ("offset", "index")
MLP_RATIO = 4


@dataclass(frozen=True)
class DenoiserConfig:
    model_dim: int
    n_layers: int
    n_heads: int
    token_dim: int
    max_offset: int
    max_diffusion_step: int
    embed_mode: str = "offset"

    def __post_init__(self):
        for name in ("model_dim", "n_layers", "n_heads", "token_dim", "max_offset",
                     "max_diffusion_step"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.n_heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} must be divisible by n_heads {self.n_heads}")
        if self.model_dim % 2 != 0:
            raise ValidationError("model_dim must be even (sinusoidal features)")
        if self.embed_mode not in EMBED_MODES:
            raise ValidationError(f"embed_mode must be one of {EMBED_MODES}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserConfig":
        return cls(**obj)


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    params: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def param_shapes(config: DenoiserConfig) -> dict:
    """Parameter manifest; a pure function of the config."""
    m, d = config.model_dim, config.token_dim
    shapes = {
        "in.w": (d, m), "in.b": (m,),
        "offset_table": (config.max_offset + 1, m),
        "step.w1": (m, m), "step.b1": (m,),
        "step.w2": (m, m), "step.b2": (m,),
    }
    for l in range(config.n_layers):
        pre = f"blk{l}."
        shapes.update({
            pre + "ada.w": (m, 6 * m), pre + "ada.b": (6 * m,),
            pre + "attn.wq": (m, m), pre + "attn.bq": (m,),
            pre + "attn.wk": (m, m), pre + "attn.bk": (m,),
            pre + "attn.wv": (m, m), pre + "attn.bv": (m,),
            pre + "attn.wo": (m, m), pre + "attn.bo": (m,),
            pre + "mlp.w1": (m, MLP_RATIO * m), pre + "mlp.b1": (MLP_RATIO * m,),
            pre + "mlp.w2": (MLP_RATIO * m, m), pre + "mlp.b2": (m,),
        })
    shapes.update({
        "final.ada.w": (m, 2 * m), "final.ada.b": (2 * m,),
        "final.w": (m, d), "final.b": (d,),
    })
    return shapes


def init_denoiser(config: DenoiserConfig, rng: np.random.Generator,
                  dtype=np.float32, random_init: bool = False) -> DenoiserModel:
    """Truncated-normal weights, zero biases; the output head and all
    modulation projections start at zero (each block is the identity).

    random_init=True draws every tensor from the truncated normal instead,
    so that all paths carry gradient (used by the finite-difference check).
    """
    params = {}
    for name, shape in param_shapes(config).items():
        zero_family = name.endswith(".b") or "ada" in name or name.startswith("final.")
        if random_init:
            params[name] = nn.trunc_normal(rng, shape, std=0.02, dtype=dtype)
        elif zero_family:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = nn.trunc_normal(rng, shape, std=0.02, dtype=dtype)
    return DenoiserModel(config=config, params=params)


def _token_keys(config: DenoiserConfig, offsets: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1:
        raise ValidationError(f"offsets must be a 1D vector, got shape {offsets.shape}")
    if offsets.min() < 0:
        raise ValidationError("offsets must be non-negative")
    if offsets.max() > config.max_offset:
        raise ValidationError(
            f"offset {int(offsets.max())} exceeds the model's max_offset {config.max_offset}")
    if config.embed_mode == "index":
        return np.arange(len(offsets), dtype=np.int64)
    return offsets


def _forward_cached(model: DenoiserModel, noisy, offsets, step):
    cfg = model.config
    p = model.params
    x = np.asarray(noisy, dtype=model.dtype)
    if x.ndim != 3 or x.shape[2] != cfg.token_dim:
        raise ValidationError(
            f"input must be (B, H, {cfg.token_dim}), got {np.asarray(noisy).shape}")
    B, H, _ = x.shape
    offsets = np.asarray(offsets)
    if offsets.shape != (H,):
        raise ValidationError(f"offsets shape {offsets.shape} does not match H={H}")
    keys = _token_keys(cfg, offsets)
    step = np.asarray(step)
    if step.ndim == 0:
        step = np.full(B, int(step))
    if step.shape != (B,):
        raise ValidationError(f"step shape {step.shape} does not match batch {B}")
    if step.min() < 0 or step.max() >= cfg.max_diffusion_step:
        raise ValidationError(
            f"diffusion steps must lie in [0, {cfg.max_diffusion_step}), got "
            f"[{int(step.min())}, {int(step.max())}]")

    m = cfg.model_dim
    off_sin = nn.sinusoidal_embedding(keys, m, max_period=4.0 * cfg.max_offset).astype(model.dtype)
    off_emb = off_sin + p["offset_table"][keys]  # (H, M)

    tok, c_in = nn.linear_forward(x, p["in.w"], p["in.b"])
    h = tok + off_emb[None]

    t_sin = nn.sinusoidal_embedding(step.astype(np.float64), m, max_period=10_000.0
                                    ).astype(model.dtype)
    s1, c_s1 = nn.linear_forward(t_sin, p["step.w1"], p["step.b1"])
    s1a, c_s1act = nn.silu_forward(s1)
    cond, c_s2 = nn.linear_forward(s1a, p["step.w2"], p["step.b2"])  # (B, M)
    cond_act, c_condact = nn.silu_forward(cond)

    blocks = []
    for l in range(cfg.n_layers):
        pre = f"blk{l}."
        mod, c_mod = nn.linear_forward(cond_act, p[pre + "ada.w"], p[pre + "ada.b"])
        sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6, axis=1)
        n1, c_n1 = nn.layernorm_forward(h)
        m1, c_m1 = nn.modulate_forward(n1, sh1, sc1)
        attn, c_attn = nn.attention_forward(
            m1, p[pre + "attn.wq"], p[pre + "attn.bq"], p[pre + "attn.wk"], p[pre + "attn.bk"],
            p[pre + "attn.wv"], p[pre + "attn.bv"], p[pre + "attn.wo"], p[pre + "attn.bo"],
            cfg.n_heads)
        h1, c_g1 = nn.gate_forward(h, attn, g1)
        n2, c_n2 = nn.layernorm_forward(h1)
        m2, c_m2 = nn.modulate_forward(n2, sh2, sc2)
        f1, c_f1 = nn.linear_forward(m2, p[pre + "mlp.w1"], p[pre + "mlp.b1"])
        f1a, c_f1act = nn.gelu_forward(f1)
        f2, c_f2 = nn.linear_forward(f1a, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        h, c_g2 = nn.gate_forward(h1, f2, g2)
        blocks.append((c_mod, c_n1, c_m1, c_attn, c_g1, c_n2, c_m2, c_f1, c_f1act, c_f2, c_g2))

    fmod, c_fmod = nn.linear_forward(cond_act, p["final.ada.w"], p["final.ada.b"])
    fsh, fsc = np.split(fmod, 2, axis=1)
    nf, c_nf = nn.layernorm_forward(h)
    mf, c_mf = nn.modulate_forward(nf, fsh, fsc)
    out, c_out = nn.linear_forward(mf, p["final.w"], p["final.b"])

    cache = SimpleNamespace(
        keys=keys, B=B, H=H,
        c_in=c_in, c_s1=c_s1, c_s1act=c_s1act, c_s2=c_s2, c_condact=c_condact,
        blocks=blocks, c_fmod=c_fmod, c_nf=c_nf, c_mf=c_mf, c_out=c_out,
    )
    return out, cache


def forward(model: DenoiserModel, noisy, offsets, step) -> np.ndarray:
    """Predict the noise residual for every token; (B, H, D) in, same out."""
    out, _ = _forward_cached(model, noisy, offsets, step)
    return out


def _backward(model: DenoiserModel, cache, dout) -> dict:
    cfg = model.config
    p = model.params
    grads = {}

    dmf, grads["final.w"], grads["final.b"] = nn.linear_backward(dout, cache.c_out)
    dnf, dfsh, dfsc = nn.modulate_backward(dmf, cache.c_mf)
    dh = nn.layernorm_backward(dnf, cache.c_nf)
    dfmod = np.concatenate([dfsh, dfsc], axis=1)
    dcond_act, grads["final.ada.w"], grads["final.ada.b"] = nn.linear_backward(
        dfmod, cache.c_fmod)

    for l in reversed(range(cfg.n_layers)):
        pre = f"blk{l}."
        (c_mod, c_n1, c_m1, c_attn, c_g1, c_n2, c_m2, c_f1, c_f1act, c_f2, c_g2) = cache.blocks[l]

        dh1, df2, dg2 = nn.gate_backward(dh, c_g2)
        df1a, grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = nn.linear_backward(df2, c_f2)
        df1 = nn.gelu_backward(df1a, c_f1act)
        dm2, grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = nn.linear_backward(df1, c_f1)
        dn2, dsh2, dsc2 = nn.modulate_backward(dm2, c_m2)
        dh1 = dh1 + nn.layernorm_backward(dn2, c_n2)

        dh0, dattn, dg1 = nn.gate_backward(dh1, c_g1)
        (dm1, grads[pre + "attn.wq"], grads[pre + "attn.bq"],
         grads[pre + "attn.wk"], grads[pre + "attn.bk"],
         grads[pre + "attn.wv"], grads[pre + "attn.bv"],
         grads[pre + "attn.wo"], grads[pre + "attn.bo"]) = nn.attention_backward(dattn, c_attn)
        dn1, dsh1, dsc1 = nn.modulate_backward(dm1, c_m1)
        dh = dh0 + nn.layernorm_backward(dn1, c_n1)

        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
        dca, grads[pre + "ada.w"], grads[pre + "ada.b"] = nn.linear_backward(dmod, c_mod)
        dcond_act = dcond_act + dca

    # conditioning MLP
    dcond = nn.silu_backward(dcond_act, cache.c_condact)
    ds1a, grads["step.w2"], grads["step.b2"] = nn.linear_backward(dcond, cache.c_s2)
    ds1 = nn.silu_backward(ds1a, cache.c_s1act)
    _, grads["step.w1"], grads["step.b1"] = nn.linear_backward(ds1, cache.c_s1)

    # token path: h0 = in(x) + offset_emb
    doff = dh.sum(axis=0)  # (H, M)
    dtable = np.zeros_like(p["offset_table"])
    np.add.at(dtable, cache.keys, doff)
    grads["offset_table"] = dtable
    _, grads["in.w"], grads["in.b"] = nn.linear_backward(dh, cache.c_in)
    return grads


def loss_and_grads(model: DenoiserModel, batch: PlanBatch, noise_schedule,
                   rng: np.random.Generator) -> tuple[float, dict]:
    """Denoising MSE and exact parameter gradients for one batch.

    Per row: t ~ Uniform{1..T}, eps ~ N(0, I); the noisy input is the forward
    process at t with conditioned tokens (the anchor) replaced by their clean
    values, and those tokens are excluded from the loss.
    """
    B, H, D = batch.trajectories.shape
    T = len(noise_schedule.alpha_bar)
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal((B, H, D))
    return _loss_and_grads_fixed(model, batch, noise_schedule, t, eps)


def _loss_impl(model: DenoiserModel, batch: PlanBatch, noise_schedule, t, eps,
               with_grads: bool):
    x0 = np.asarray(batch.trajectories, dtype=model.dtype)
    eps = np.asarray(eps, dtype=model.dtype)
    ab = noise_schedule.alpha_bar[np.asarray(t) - 1].astype(model.dtype)  # (B,)
    xt = np.sqrt(ab)[:, None, None] * x0 + np.sqrt(1.0 - ab)[:, None, None] * eps
    xt[:, batch.anchor_mask] = x0[:, batch.anchor_mask]

    pred, cache = _forward_cached(model, xt, batch.offsets, t)
    free = ~batch.anchor_mask
    diff = np.zeros_like(pred)
    diff[:, free] = pred[:, free] - eps[:, free]
    count = pred.shape[0] * int(free.sum()) * pred.shape[2]
    loss = float((diff * diff).sum() / count)
    if not np.isfinite(loss):
        raise NumericsError(
            f"non-finite denoising loss (max |pred| = {np.abs(pred).max():.3e}, "
            f"max |x_t| = {np.abs(xt).max():.3e}, t range "
            f"[{int(np.min(t))}, {int(np.max(t))}])")
    if not with_grads:
        return loss, None
    dout = (2.0 / count) * diff
    return loss, _backward(model, cache, dout)


def _loss_and_grads_fixed(model: DenoiserModel, batch: PlanBatch, noise_schedule, t, eps):
    return _loss_impl(model, batch, noise_schedule, t, eps, with_grads=True)


# -- finite-difference verification -------------------------------------------

REL_ERR_FLOOR = 1e-6  # denominator guard for near-zero gradient entries


@dataclass
class GradCheckReport:
    config: DenoiserConfig
    tolerance: float
    step_size: float
    per_tensor: dict
    max_rel_error: float
    passed: bool

    def __str__(self):
        lines = [f"grad check: {'PASS' if self.passed else 'FAIL'} "
                 f"(max rel error {self.max_rel_error:.3e}, tolerance {self.tolerance:.1e})"]
        for name in sorted(self.per_tensor, key=self.per_tensor.get, reverse=True):
            lines.append(f"  {name:24s} {self.per_tensor[name]:.3e}")
        return "\n".join(lines)


def grad_check(config: DenoiserConfig, tolerance: float = 1e-4, seed: int = 0,
               step_size: float = 1e-4, corrupt_param: str | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences for every
    parameter tensor of a small randomly initialized model (float64).

    ``corrupt_param`` perturbs one analytic gradient before comparison — a
    hook for negative-control tests.  A failing check is reported, not raised.
    """
    rng = np.random.default_rng(seed)
    model = init_denoiser(config, rng, dtype=np.float64, random_init=True)

    h_tokens = 3
    mo = config.max_offset
    offsets = np.array(sorted({0, max(1, mo // 2), mo}))[:h_tokens]
    batch = PlanBatch(
        trajectories=rng.standard_normal((2, len(offsets), config.token_dim)),
        offsets=offsets,
        anchor_mask=np.array([True] + [False] * (len(offsets) - 1)),
    )
    T = min(4, config.max_diffusion_step - 1)
    beta = np.linspace(1e-4, 0.02, T)
    ns = SimpleNamespace(alpha_bar=np.cumprod(1.0 - beta))
    t = rng.integers(1, T + 1, size=2)
    eps = rng.standard_normal(batch.trajectories.shape)

    _, analytic = _loss_and_grads_fixed(model, batch, ns, t, eps)
    if corrupt_param is not None:
        analytic = dict(analytic)
        analytic[corrupt_param] = analytic[corrupt_param] + 1e-2

    per_tensor = {}
    for name, p in model.params.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step_size
            lp, _ = _loss_impl(model, batch, ns, t, eps, with_grads=False)
            p[idx] = orig - step_size
            lm, _ = _loss_impl(model, batch, ns, t, eps, with_grads=False)
            p[idx] = orig
            fd[idx] = (lp - lm) / (2.0 * step_size)
        denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(fd)), REL_ERR_FLOOR)
        per_tensor[name] = float(np.max(np.abs(analytic[name] - fd) / denom))

    max_rel = max(per_tensor.values())
    return GradCheckReport(config=config, tolerance=tolerance, step_size=step_size,
                           per_tensor=per_tensor, max_rel_error=max_rel,
                           passed=max_rel < tolerance)
