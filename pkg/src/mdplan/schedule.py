"""Jump schedules: how many environment steps separate consecutive plan tokens.

A plan with ``horizon_tokens`` states is pinned to the environment timeline by
its jump sizes: token 0 sits at the current step, token i at the cumulative sum
of the first i jumps.  Uniform schedules use one jump size everywhere; mixed
schedules allocate resolution non-uniformly (e.g. fine early, coarse late).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class JumpSchedule:
    """Ordered jump sizes between consecutive plan tokens.

    ``jumps[i]`` is the number of environment steps between token i and
    token i+1, so a schedule with H tokens has H-1 jumps.  Immutable.
    """

    jumps: tuple[int, ...]

    def __post_init__(self):
        if len(self.jumps) < 1:
            raise ValidationError("schedule needs at least one jump (two tokens)")
        for i, k in enumerate(self.jumps):
            if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 1:
                raise ValidationError(f"jump {i} must be a positive integer, got {k!r}")
        object.__setattr__(self, "jumps", tuple(int(k) for k in self.jumps))

    @property
    def horizon_tokens(self) -> int:
        return len(self.jumps) + 1

    @property
    def total_span(self) -> int:
        return sum(self.jumps)

    def to_config(self) -> dict:
        """Range-list config form, echoed verbatim into run manifests."""
        ranges = []
        for k in self.jumps:
            if ranges and ranges[-1][1] == k:
                ranges[-1][0] += 1
            else:
                ranges.append([1, k])
        return {"ranges": ranges}


@dataclass(frozen=True)
class TimeOffsets:
    """Cumulative environment-step offset of each plan token; offsets[0] == 0."""

    offsets: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.offsets) < 1 or self.offsets[0] != 0:
            raise ValidationError("offsets must start at 0")
        diffs = np.diff(self.offsets)
        if len(diffs) and diffs.min() < 1:
            raise ValidationError("offsets must be strictly increasing")
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.offsets)


def uniform(h: int, k: int) -> JumpSchedule:
    """Schedule with h tokens and every jump equal to k.

    Raises ValidationError for h < 2 or k < 1.
    """
    if not isinstance(h, (int, np.integer)) or h < 2:
        raise ValidationError(f"token count must be an integer >= 2, got {h!r}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValidationError(f"jump size must be an integer >= 1, got {k!r}")
    return JumpSchedule(jumps=(int(k),) * (int(h) - 1))


def from_ranges(ranges) -> JumpSchedule:
    """Concatenate (count, jump) ranges into a schedule.

    ``from_ranges([(10, 4), (21, 6)])`` gives 10 jumps of 4 followed by 21
    jumps of 6 (H = 32 tokens).
    """
    ranges = list(ranges)
    if not ranges:
        raise ValidationError("ranges must be non-empty")
    jumps: list[int] = []
    for i, entry in enumerate(ranges):
        try:
            count, k = entry
        except (TypeError, ValueError):
            raise ValidationError(f"range {i} must be a (count, jump) pair, got {entry!r}")
        if not isinstance(count, (int, np.integer)) or count < 1:
            raise ValidationError(f"range {i}: count must be a positive integer, got {count!r}")
        if not isinstance(k, (int, np.integer)) or k < 1:
            raise ValidationError(f"range {i}: jump size must be a positive integer, got {k!r}")
        jumps.extend([int(k)] * int(count))
    return JumpSchedule(jumps=tuple(jumps))


def time_offsets(schedule: JumpSchedule) -> TimeOffsets:
    """Cumulative time offsets of the schedule's tokens, starting at 0."""
    csum = np.concatenate([[0], np.cumsum(schedule.jumps)])
    return TimeOffsets(offsets=tuple(int(o) for o in csum))


def from_config(config: dict | str) -> JumpSchedule:
    """Parse a schedule from its JSON config form.

    Accepts ``{"ranges": [[count, jump], ...]}`` or a per-index override
    ``{"jumps": [k1, k2, ...]}``.  A JSON string is parsed first.
    """
    if isinstance(config, str):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as e:
            raise ValidationError(f"schedule config is not valid JSON: {e}")
    if not isinstance(config, dict):
        raise ValidationError(f"schedule config must be an object, got {type(config).__name__}")
    if "ranges" in config:
        ranges = config["ranges"]
        if not isinstance(ranges, list):
            raise ValidationError("'ranges' must be a list of [count, jump] pairs")
        return from_ranges([tuple(r) for r in ranges])
    if "jumps" in config:
        jumps = config["jumps"]
        if not isinstance(jumps, list):
            raise ValidationError("'jumps' must be a list of positive integers")
        return JumpSchedule(jumps=tuple(jumps))
    raise ValidationError("schedule config needs a 'ranges' or 'jumps' key")
