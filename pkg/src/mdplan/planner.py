"""Closed-loop control: sample candidate plans, pick one, act, replan.

Every ``replan_every`` environment steps the planner denoises a fresh batch of
candidate trajectories anchored at the current observation (optionally with
the far token pinned to the goal position), scores them with the value model,
and keeps the winner.  Actions always target plan token 1: by default with the
full first-jump gap; the tracking variant shrinks the gap as steps elapse
between replans (requiring those gaps in the inverse-dynamics gap set).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, guidance, invdyn as invdyn_mod
from .dataset import Normalizer
from .denoiser import DenoiserModel
from .errors import ValidationError
from .maze import PointMaze
from .schedule import JumpSchedule, time_offsets


@dataclass
class PlannerConfig:
    n_candidates: int = 8
    replan_every: int | None = None  # None: replan every K_1 steps
    max_episode_steps: int = 300
    track_remaining_gap: bool = False
    goal_conditioning: bool = False
    clip_x0: float | None = 6.0  # clamp implied clean states during sampling

    def resolved_replan(self, jump_schedule: JumpSchedule) -> int:
        k1 = jump_schedule.jumps[0]
        r = self.replan_every if self.replan_every is not None else k1
        if not 1 <= r <= k1:
            raise ValidationError(
                f"replan_every must lie in [1, K_1={k1}], got {r}")
        if self.n_candidates < 1:
            raise ValidationError(f"n_candidates must be >= 1, got {self.n_candidates}")
        return r


@dataclass
class PlannerModels:
    """Everything a closed-loop run needs, with consistent shapes."""

    denoiser: DenoiserModel
    value: object  # guidance.ValueModel or a scoring callable
    invdyn: invdyn_mod.InvDynModel
    normalizer: Normalizer
    jump_schedule: JumpSchedule
    noise_schedule: diffusion.NoiseSchedule

    def validate(self) -> None:
        offs = time_offsets(self.jump_schedule).as_array()
        if isinstance(self.denoiser, DenoiserModel):
            cfg = self.denoiser.config
            if offs[-1] > cfg.max_offset:
                raise ValidationError(
                    f"schedule span {int(offs[-1])} exceeds denoiser max_offset {cfg.max_offset}")
            if cfg.token_dim != len(self.normalizer.mean):
                raise ValidationError(
                    f"denoiser token_dim {cfg.token_dim} does not match observation "
                    f"dim {len(self.normalizer.mean)}")
        if isinstance(self.value, guidance.ValueModel) and \
                not np.array_equal(self.value.offsets, offs):
            raise ValidationError(
                f"value model offsets {self.value.offsets.tolist()} do not match the "
                f"schedule offsets {offs.tolist()}")


@dataclass
class EpisodeResult:
    total_return: float
    success: bool
    steps: int
    trace: list = field(default_factory=list)  # per-step dicts
    plans: dict = field(default_factory=dict)  # planning step -> (H, D) plan
    seed: int | None = None


def plan(obs, models: PlannerModels, config: PlannerConfig, rng: np.random.Generator,
         goal=None) -> np.ndarray:
    """One planning event: returns the winning (H, D) plan, denormalized."""
    models.validate()
    config.resolved_replan(models.jump_schedule)
    z = models.normalizer.normalize(np.asarray(obs, dtype=np.float64))

    cond = None
    if config.goal_conditioning and goal is not None:
        goal = np.asarray(goal, dtype=np.float64)
        target = np.zeros_like(z)
        target[:len(goal)] = goal
        z_goal = models.normalizer.normalize(target)
        dims = np.zeros(len(z), dtype=bool)
        dims[:len(goal)] = True
        h = models.jump_schedule.horizon_tokens
        cond = diffusion.Conditioning(values={}).with_token(h - 1, z_goal, dims=dims)

    cands = diffusion.sample(models.denoiser, models.noise_schedule, models.jump_schedule,
                             z, config.n_candidates, rng, conditioning=cond,
                             clip_x0=config.clip_x0)
    idx, _ = guidance.mc_select(cands, models.value)
    return models.normalizer.denormalize(cands[idx])


def _nearest_gap(gap_set, raw: int) -> int:
    return min(gap_set, key=lambda g: (abs(g - raw), g))


def run_episode(env: PointMaze, models: PlannerModels, config: PlannerConfig,
                seed: int) -> EpisodeResult:
    """Roll one closed-loop episode; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    state = env.reset(rng)
    k1 = models.jump_schedule.jumps[0]
    replan_every = config.resolved_replan(models.jump_schedule)

    result = EpisodeResult(total_return=0.0, success=False, steps=0, seed=seed)
    current_plan = None
    for step in range(config.max_episode_steps):
        obs = env.observe(state)
        replanned = step % replan_every == 0
        if replanned:
            current_plan = plan(obs, models, config, rng, goal=state.goal)
            result.plans[step] = current_plan
        raw_gap = k1 - (step % replan_every) if config.track_remaining_gap else k1
        gap = _nearest_gap(models.invdyn.gap_set, raw_gap)
        try:
            action = invdyn_mod.predict_action(models.invdyn, obs, current_plan[1], gap, rng)
            state, reward, done = env.step(state, action)
        except Exception as e:
            e.args = (f"episode step {step}: " + ", ".join(str(a) for a in e.args),)
            raise
        result.total_return += reward
        result.steps += 1
        result.trace.append({
            "t": step,
            "obs": obs.tolist(),
            "action": action.tolist(),
            "reward": float(reward),
            "replanned": bool(replanned),
        })
        if done:
            result.success = True
            break
    return result


def save_trace(directory: str | Path, result: EpisodeResult, prefix: str = "episode") -> None:
    """Trace as JSON Lines, plans keyed by planning step in a sidecar file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{prefix}.trace.jsonl", "w", encoding="utf-8") as f:
        for record in result.trace:
            f.write(json.dumps(record) + "\n")
    plans = {str(k): v.tolist() for k, v in result.plans.items()}
    (directory / f"{prefix}.plans.json").write_text(json.dumps(plans), encoding="utf-8")
