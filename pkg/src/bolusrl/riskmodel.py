"""BG risk reward: negative symmetric risk, zero near 112.5 mg/dL."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RewardParams:
    c1: float = 1.509
    c2: float = 1.084
    c3: float = 5.381
    scale: float = 1.0
    bg_floor: float = 10.0
    bg_cap: float = 600.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"reward scale must be > 0, got {self.scale}")
        if not 0 < self.bg_floor < self.bg_cap:
            raise ValueError("need 0 < bg_floor < bg_cap")


DEFAULT_REWARD = RewardParams()


def risk_reward(bg, params: RewardParams = DEFAULT_REWARD):
    """Reward ``-scale * 10 * f(BG)**2`` with ``f = c1 * (ln(BG)**c2 - c3)``.

    Accepts a scalar or an array; readings are clamped to
    ``[bg_floor, bg_cap]`` first.
    """
    arr = np.asarray(bg, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite BG reading: {bg!r}")
    clamped = np.clip(arr, params.bg_floor, params.bg_cap)
    f = params.c1 * (np.log(clamped) ** params.c2 - params.c3)
    reward = -params.scale * 10.0 * f * f
    if reward.ndim == 0:
        return float(reward)
    return reward


def risk_zero(params: RewardParams = DEFAULT_REWARD) -> float:
    """BG at which the reward attains its maximum of 0."""
    return math.exp((params.c3) ** (1.0 / params.c2))
