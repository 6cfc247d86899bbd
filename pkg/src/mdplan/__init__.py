"""mdplan: diffusion planning over state trajectories at non-uniform temporal resolution.

A small, numpy-only stack: a continuous point-maze environment with a scripted
demonstrator, jump-schedule machinery mapping plan tokens to environment time
offsets, a transformer denoiser trained with hand-written backprop, ancestral
sampling with anchor inpainting, Monte Carlo guidance over candidate plans, and
a gap-conditioned inverse dynamics model for closed-loop control.
"""

from .errors import NumericsError, ValidationError
from .schedule import JumpSchedule, TimeOffsets, from_config, from_ranges, time_offsets, uniform

__all__ = [
    "JumpSchedule",
    "TimeOffsets",
    "NumericsError",
    "ValidationError",
    "from_config",
    "from_ranges",
    "time_offsets",
    "uniform",
]

__version__ = "0.1.0"
