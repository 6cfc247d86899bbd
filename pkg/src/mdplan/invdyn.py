"""Gap-conditioned inverse dynamics: which action moves s_t to s_{t+k}.

A single model serves every jump size in the planner's schedule, so the time
gap k enters as an explicit embedding (fixed sinusoid plus a learned table).
The default is a small conditional diffusion model over the action vector; a
direct-regression network shares the same interface and checkpoint format.
Actions are clamped to [-1, 1] on the way out, matching the environment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Normalizer, sample_invdyn_batch
from .diffusion import NoiseSchedule, TrainOptions, build_noise_schedule, q_sample
from .errors import ValidationError
from .maze import Episode

log = logging.getLogger(__name__)

GAP_FEATURES = 16
STEP_FEATURES = 8
MODES = ("diffusion", "regression")


@dataclass
class InvDynModel:
    params: dict  # MLP weights plus the learned "gap_table"
    gap_set: tuple
    mode: str
    obs_dim: int
    action_dim: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    noise: NoiseSchedule | None = None  # diffusion mode only
    gap_cond: bool = True

    @property
    def max_gap(self) -> int:
        return max(self.gap_set)


def gap_embedding(model: InvDynModel, gap: int) -> np.ndarray:
    """Embedding of the time gap: sinusoid of the gap value plus a learned row."""
    base = nn.sinusoidal_embedding(np.array([float(gap)]), GAP_FEATURES,
                                   max_period=4.0 * max(model.max_gap, 1))[0]
    emb = base + model.params["gap_table"][gap]
    if not model.gap_cond:
        emb = np.zeros_like(emb)
    return emb


def _mlp_params(model: InvDynModel) -> dict:
    return {k: v for k, v in model.params.items() if k != "gap_table"}


def _condition_features(model: InvDynModel, s_norm, s_next_norm, gaps) -> np.ndarray:
    gaps = np.asarray(gaps, dtype=np.int64)
    base = nn.sinusoidal_embedding(np.arange(model.max_gap + 1, dtype=np.float64),
                                   GAP_FEATURES, max_period=4.0 * max(model.max_gap, 1))
    emb = (base + model.params["gap_table"])[gaps]  # (N, E)
    if not model.gap_cond:
        emb = np.zeros_like(emb)
    return np.concatenate([s_norm, s_next_norm, emb], axis=1).astype(np.float32)


def _new_model(episodes, gap_set, normalizer, mode, hidden_dim, t_act, gap_cond,
               rng) -> InvDynModel:
    gaps = tuple(sorted(set(int(g) for g in gap_set)))
    if not gaps or gaps[0] < 1:
        raise ValidationError(f"gap_set must be non-empty positive integers, got {gap_set!r}")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    d = episodes[0].observations.shape[1]
    a = episodes[0].actions.shape[1]
    cond = 2 * d + GAP_FEATURES
    if mode == "diffusion":
        sizes = (a + cond + STEP_FEATURES, hidden_dim, hidden_dim, a)
        noise = build_noise_schedule(t_act, "cosine")
    else:
        sizes = (cond, hidden_dim, hidden_dim, a)
        noise = None
    params = nn.mlp_init(sizes, rng, dtype=np.float32)
    params["gap_table"] = nn.trunc_normal(rng, (gaps[-1] + 1, GAP_FEATURES),
                                          std=0.02, dtype=np.float32)
    return InvDynModel(params=params, gap_set=gaps, mode=mode, obs_dim=d, action_dim=a,
                       norm_mean=normalizer.mean.copy(), norm_std=normalizer.std.copy(),
                       noise=noise, gap_cond=gap_cond)


def train_invdyn(episodes: list[Episode], gap_set, normalizer: Normalizer,
                 opts: TrainOptions, mode: str = "diffusion", hidden_dim: int = 128,
                 t_act: int = 8, gap_cond: bool = True) -> tuple[InvDynModel, list]:
    """Train on (s, s_{t+k}, k, a_t) tuples; returns (model, loss curve).

    Diffusion mode learns eps-prediction for a chain over the action vector
    conditioned on the state pair and gap; regression mode learns a_t with MSE.
    The gap table trains only on rows for gaps that occur.
    """
    rng = np.random.default_rng(opts.seed)
    model = _new_model(episodes, gap_set, normalizer, mode, hidden_dim, t_act,
                       gap_cond, rng)
    mlp = _mlp_params(model)
    state = nn.adam_init(model.params, lr=opts.lr)
    losses = []
    for step in range(1, opts.steps + 1):
        batch = sample_invdyn_batch(
            episodes, model.gap_set,
            Normalizer(mean=model.norm_mean, std=model.norm_std),
            opts.batch_size, rng)
        cond = _condition_features(model, batch.s, batch.s_next, batch.gap)
        actions = batch.a.astype(np.float32)

        if mode == "diffusion":
            t = rng.integers(1, model.noise.T + 1, size=len(actions))
            eps = rng.standard_normal(actions.shape).astype(np.float32)
            a_t = q_sample(actions, t, eps, model.noise).astype(np.float32)
            t_feat = nn.sinusoidal_embedding(t.astype(np.float64), STEP_FEATURES,
                                             max_period=10_000.0).astype(np.float32)
            x = np.concatenate([a_t, cond, t_feat], axis=1)
            pred, caches = nn.mlp_forward(mlp, x)
            diff = pred - eps
        else:
            pred, caches = nn.mlp_forward(mlp, cond)
            diff = pred - actions

        loss = float(np.mean(diff * diff))
        dpred = (2.0 / diff.size) * diff
        dx, grads = nn.mlp_backward(mlp, caches, dpred)

        # route input gradient back into the gap-embedding table
        dtable = np.zeros_like(model.params["gap_table"])
        if model.gap_cond:
            lo = 2 * model.obs_dim + (model.action_dim if mode == "diffusion" else 0)
            np.add.at(dtable, batch.gap, dx[:, lo:lo + GAP_FEATURES])
        grads["gap_table"] = dtable

        model.params, state = nn.adam_step(model.params, grads, state)
        mlp = _mlp_params(model)
        losses.append(loss)
        if step % opts.log_every == 0:
            log.info("invdyn step %d: loss %.4f", step,
                     float(np.mean(losses[-opts.log_every:])))
    return model, losses


def predict_action(model: InvDynModel, s, s_next, gap: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Action in [-1, 1]^A expected to cover (s -> s_next) in `gap` env steps.

    States are raw (unnormalized) observations; gap must be one the model was
    trained on — there is no extrapolation across gaps.
    """
    if int(gap) not in model.gap_set:
        raise ValidationError(f"gap {gap} not in the trained gap set {model.gap_set}")
    s = (np.asarray(s, dtype=np.float64) - model.norm_mean) / model.norm_std
    s_next = (np.asarray(s_next, dtype=np.float64) - model.norm_mean) / model.norm_std
    cond = _condition_features(model, s[None], s_next[None], [int(gap)])
    mlp = _mlp_params(model)

    if model.mode == "regression":
        out, _ = nn.mlp_forward(mlp, cond)
        return np.clip(out[0].astype(np.float64), -1.0, 1.0)

    ns = model.noise
    x = rng.standard_normal((1, model.action_dim))
    for t in range(ns.T, 0, -1):
        t_feat = nn.sinusoidal_embedding(np.array([float(t)]), STEP_FEATURES,
                                         max_period=10_000.0)
        inp = np.concatenate([x, cond, t_feat], axis=1).astype(np.float32)
        eps_hat, _ = nn.mlp_forward(mlp, inp)
        beta, ab, alpha = ns.beta[t - 1], ns.alpha_bar[t - 1], ns.alpha[t - 1]
        x = (x - beta / np.sqrt(1.0 - ab) * eps_hat.astype(np.float64)) / np.sqrt(alpha)
        if t > 1:
            sigma = np.sqrt(beta * (1.0 - ns.alpha_bar[t - 2]) / (1.0 - ab))
            x = x + sigma * rng.standard_normal(x.shape)
    return np.clip(x[0], -1.0, 1.0)


def save_invdyn(path, model: InvDynModel) -> None:
    extra = {
        "gap_set": list(model.gap_set),
        "mode": model.mode,
        "obs_dim": model.obs_dim,
        "action_dim": model.action_dim,
        "normalizer": {"mean": model.norm_mean.tolist(), "std": model.norm_std.tolist()},
        "beta": model.noise.beta.tolist() if model.noise is not None else None,
        "gap_cond": model.gap_cond,
    }
    save_checkpoint(path, "invdyn", {}, model.params, extra)


def load_invdyn(path) -> InvDynModel:
    data = load_checkpoint(path)
    if data.kind != "invdyn":
        raise ValidationError(f"{path}: expected an invdyn checkpoint, got {data.kind!r}")
    e = data.extra
    noise = NoiseSchedule(beta=np.array(e["beta"])) if e["beta"] is not None else None
    return InvDynModel(params=data.params, gap_set=tuple(e["gap_set"]), mode=e["mode"],
                       obs_dim=int(e["obs_dim"]), action_dim=int(e["action_dim"]),
                       norm_mean=np.array(e["normalizer"]["mean"]),
                       norm_std=np.array(e["normalizer"]["std"]),
                       noise=noise, gap_cond=bool(e["gap_cond"]))
