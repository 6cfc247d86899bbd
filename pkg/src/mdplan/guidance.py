"""Trajectory value estimation and Monte Carlo candidate selection.

The value model is a small feed-forward network scoring a flattened
normalized trajectory (each token concatenated with a sinusoidal embedding of
its time offset).  Its regression target is the discounted sum of true
environment rewards accumulated between the anchor and the trajectory's final
offset.  Candidate selection is pure argmax over scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Normalizer, _episodes_admitting, fit_normalizer
from .diffusion import TrainOptions
from .errors import ValidationError
from .maze import Episode
from .schedule import JumpSchedule, time_offsets

log = logging.getLogger(__name__)

OFFSET_FEATURES = 16


@dataclass
class ValueModel:
    """MLP over [token ++ offset-embedding] features, one scalar per trajectory."""

    params: dict
    offsets: np.ndarray  # (H,) the schedule the model was trained for
    max_offset: int
    gamma: float
    hidden_dim: int = 128

    @property
    def token_dim(self) -> int:
        h = len(self.offsets)
        return self.params["l0.w"].shape[0] // h - OFFSET_FEATURES


def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^i * rewards[i]."""
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) == 0:
        return 0.0
    return float(rewards @ np.power(gamma, np.arange(len(rewards))))


def _features(trajs: np.ndarray, offsets: np.ndarray, max_offset: int) -> np.ndarray:
    """(N, H, D) trajectories -> (N, H*(D+OFFSET_FEATURES)) flat features."""
    n, h, d = trajs.shape
    emb = nn.sinusoidal_embedding(offsets, OFFSET_FEATURES, max_period=4.0 * max_offset)
    tiled = np.broadcast_to(emb, (n, h, OFFSET_FEATURES))
    return np.concatenate([trajs, tiled], axis=2).reshape(n, h * (d + OFFSET_FEATURES))


def value_scores(model: ValueModel, candidates: np.ndarray) -> np.ndarray:
    """Score a stack of normalized trajectories; returns (N,)."""
    candidates = np.asarray(candidates, dtype=np.float64)
    x = _features(candidates, model.offsets, model.max_offset)
    out, _ = nn.mlp_forward(model.params, x.astype(model.params["l0.w"].dtype))
    return out[:, 0].astype(np.float64)


def train_value(episodes: list[Episode], jump_schedule: JumpSchedule,
                normalizer: Normalizer | None, opts: TrainOptions,
                gamma: float = 0.99, hidden_dim: int = 128) -> tuple[ValueModel, list]:
    """Regress discounted span returns onto gathered trajectories (MSE, Adam).

    Returns the trained model and the per-step loss curve; deterministic given
    opts.seed.
    """
    offs = time_offsets(jump_schedule).as_array()
    span = int(offs[-1])
    valid = _episodes_admitting(episodes, span)
    if len(valid) == 0:
        raise ValidationError(
            f"no episode is long enough for the schedule span of {span} steps")
    if normalizer is None:
        normalizer = fit_normalizer(episodes)

    d = episodes[0].observations.shape[1]
    h = len(offs)
    rng = np.random.default_rng(opts.seed)
    sizes = (h * (d + OFFSET_FEATURES), hidden_dim, hidden_dim, 1)
    params = nn.mlp_init(sizes, rng, dtype=np.float32)
    state = nn.adam_init(params, lr=opts.lr)
    discount = np.power(gamma, np.arange(span))
    max_offset = max(int(offs[-1]), 1)

    losses = []
    for step in range(1, opts.steps + 1):
        rows = np.empty((opts.batch_size, h, d))
        targets = np.empty(opts.batch_size, dtype=np.float64)
        for b in range(opts.batch_size):
            ep = episodes[valid[rng.integers(len(valid))]]
            t = int(rng.integers(len(ep.observations) - span))
            rows[b] = ep.observations[t + offs]
            targets[b] = ep.rewards[t:t + span] @ discount
        trajs = (rows - normalizer.mean) / normalizer.std

        x = _features(trajs, offs, max_offset).astype(np.float32)
        pred, caches = nn.mlp_forward(params, x)
        diff = pred[:, 0] - targets
        loss = float(diff @ diff) / opts.batch_size
        dpred = (2.0 / opts.batch_size) * diff[:, None].astype(np.float32)
        _, grads = nn.mlp_backward(params, caches, dpred)
        params, state = nn.adam_step(params, grads, state)
        losses.append(loss)
        if step % opts.log_every == 0:
            log.info("value step %d: loss %.4f", step, float(np.mean(losses[-opts.log_every:])))

    model = ValueModel(params=params, offsets=offs, max_offset=max_offset,
                       gamma=gamma, hidden_dim=hidden_dim)
    return model, losses


def mc_select(candidates, value_model) -> tuple[int, np.ndarray]:
    """Best-of-N selection: argmax of value scores, ties to the lowest index.

    ``value_model`` may be a ValueModel or any callable mapping one (H, D)
    trajectory to a scalar.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 3 or len(candidates) < 1:
        raise ValidationError(
            f"candidates must be a non-empty (N, H, D) stack, got shape {candidates.shape}")
    if isinstance(value_model, ValueModel):
        scores = value_scores(value_model, candidates)
    else:
        scores = np.array([float(value_model(c)) for c in candidates])
    return int(np.argmax(scores)), scores


def save_value(path, model: ValueModel) -> None:
    extra = {"offsets": model.offsets.tolist(), "max_offset": model.max_offset,
             "gamma": model.gamma, "hidden_dim": model.hidden_dim}
    save_checkpoint(path, "value", {}, model.params, extra)


def load_value(path) -> ValueModel:
    data = load_checkpoint(path)
    if data.kind != "value":
        raise ValidationError(f"{path}: expected a value checkpoint, got {data.kind!r}")
    return ValueModel(params=data.params, offsets=np.array(data.extra["offsets"]),
                      max_offset=int(data.extra["max_offset"]),
                      gamma=float(data.extra["gamma"]),
                      hidden_dim=int(data.extra["hidden_dim"]))
