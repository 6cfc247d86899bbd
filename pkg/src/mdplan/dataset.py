"""Episode persistence, observation normalization, and batch sampling.

Episode files are JSON Lines, one episode per line:
``{"obs": [[...], ...], "act": [[...], ...], "rew": [...], "term": bool}``.
Normalizer files are JSON ``{"mean": [...], "std": [...]}``.

Plan batches gather observations at a jump schedule's time offsets from a
random anchor; inverse-dynamics batches gather (state, later state, gap,
first action) tuples.  Both sample with rejection so that windows never
cross episode boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .maze import Episode
from .schedule import JumpSchedule, time_offsets

STD_FLOOR = 1e-6


@dataclass
class Normalizer:
    """Per-dimension affine whitening of observations."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValidationError("normalizer mean/std must be 1D vectors of equal length")
        if np.any(self.std <= 0):
            raise ValidationError("normalizer std must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(mean=np.array(obj["mean"]), std=np.array(obj["std"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class PlanBatch:
    """Normalized state trajectories at one schedule's offsets.

    token 0 of every row is the (normalized) anchor observation; offsets are
    shared across the batch.
    """

    trajectories: np.ndarray  # (B, H, D)
    offsets: np.ndarray  # (H,) int
    anchor_mask: np.ndarray  # (H,) bool; True where the token is conditioned


@dataclass
class InvDynBatch:
    """State pairs `gap` environment steps apart, labeled with the first action."""

    s: np.ndarray  # (B, D) normalized
    s_next: np.ndarray  # (B, D) normalized
    gap: np.ndarray  # (B,) int
    a: np.ndarray  # (B, A)


def save_episodes(path: str | Path, episodes: list[Episode]) -> None:
    """Write episodes as JSON Lines (append-safe: one self-contained line each)."""
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            line = json.dumps({
                "obs": ep.observations.tolist(),
                "act": ep.actions.tolist(),
                "rew": ep.rewards.tolist(),
                "term": bool(ep.terminated),
            })
            f.write(line + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    """Read a JSON Lines episode file; errors cite the offending line."""
    episodes = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: malformed JSON on line {i}: {e}")
            try:
                episodes.append(Episode(
                    observations=np.array(obj["obs"], dtype=np.float64),
                    actions=np.array(obj["act"], dtype=np.float64),
                    rewards=np.array(obj["rew"], dtype=np.float64),
                    terminated=bool(obj["term"]),
                ))
            except (KeyError, ValidationError) as e:
                raise ValidationError(f"{path}: invalid episode on line {i}: {e}")
    return episodes


def fit_normalizer(episodes: list[Episode]) -> Normalizer:
    """Per-dimension mean/std over every observation, std floored at 1e-6."""
    if not episodes or sum(len(e.observations) for e in episodes) == 0:
        raise ValidationError("cannot fit a normalizer on zero observations")
    allobs = np.concatenate([e.observations for e in episodes], axis=0)
    mean = allobs.mean(axis=0)
    std = np.maximum(allobs.std(axis=0), STD_FLOOR)
    return Normalizer(mean=mean, std=std)


def _episodes_admitting(episodes: list[Episode], span: int) -> np.ndarray:
    """Indices of episodes with at least one valid anchor for the given span."""
    return np.array([i for i, e in enumerate(episodes) if len(e.observations) - 1 >= span],
                    dtype=np.int64)


def sample_plan_batch(episodes: list[Episode], schedule: JumpSchedule, normalizer: Normalizer,
                      batch_size: int, rng: np.random.Generator) -> PlanBatch:
    """Gather a batch of normalized trajectories at the schedule's offsets.

    Episode and anchor are drawn uniformly (episodes too short for the span
    are rejected and redrawn); row b holds observations at anchor + offsets.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    offs = time_offsets(schedule).as_array()  # (H,)
    span = int(offs[-1])
    valid = _episodes_admitting(episodes, span)
    if len(valid) == 0:
        raise ValidationError(
            f"no episode is long enough for a span of {span} environment steps "
            f"(need > {span} observations)")

    rows = np.empty((batch_size, len(offs), episodes[0].observations.shape[1]))
    for b in range(batch_size):
        ep = episodes[valid[rng.integers(len(valid))]]
        t = int(rng.integers(len(ep.observations) - span))
        rows[b] = ep.observations[t + offs]
    traj = (rows - normalizer.mean) / normalizer.std
    anchor_mask = np.zeros(len(offs), dtype=bool)
    anchor_mask[0] = True
    return PlanBatch(trajectories=traj, offsets=offs, anchor_mask=anchor_mask)


def sample_invdyn_batch(episodes: list[Episode], gap_set, normalizer: Normalizer,
                        batch_size: int, rng: np.random.Generator) -> InvDynBatch:
    """Sample (s_t, s_{t+gap}, gap, a_t) tuples, gap drawn uniformly from gap_set."""
    gaps = sorted(set(int(g) for g in gap_set))
    if not gaps or gaps[0] < 1:
        raise ValidationError(f"gap_set must be non-empty positive integers, got {gap_set!r}")
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    per_gap_valid = {g: _episodes_admitting(episodes, g) for g in gaps}
    if all(len(v) == 0 for v in per_gap_valid.values()):
        raise ValidationError(f"no episode admits any gap in {gaps}")

    d = episodes[0].observations.shape[1]
    a_dim = episodes[0].actions.shape[1]
    s = np.empty((batch_size, d))
    s_next = np.empty((batch_size, d))
    gap = np.empty(batch_size, dtype=np.int64)
    a = np.empty((batch_size, a_dim))
    for b in range(batch_size):
        while True:
            g = gaps[rng.integers(len(gaps))]
            valid = per_gap_valid[g]
            if len(valid):
                break
        ep = episodes[valid[rng.integers(len(valid))]]
        t = int(rng.integers(len(ep.observations) - g))
        s[b] = ep.observations[t]
        s_next[b] = ep.observations[t + g]
        gap[b] = g
        a[b] = ep.actions[t]
    return InvDynBatch(
        s=(s - normalizer.mean) / normalizer.std,
        s_next=(s_next - normalizer.mean) / normalizer.std,
        gap=gap,
        a=a,
    )
