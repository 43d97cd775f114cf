"""Standard bolus advisor, its grid-search calibration and exploration bounds."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .glucosim import MealScenario, VirtualPatient, simulate_batch
from .riskmodel import DEFAULT_REWARD, RewardParams

logger = logging.getLogger(__name__)

CIR_BOUNDS = (3.0, 30.0)
CF_BOUNDS = (0.4, 2.8)
TARGET_BOUNDS = (100.0, 150.0)
EXPLORATION_TARGET = 112.5


@dataclass(frozen=True)
class AdvisorParams:
    CIR: float
    CF: float
    BG_target: float

    def __post_init__(self):
        if not self.CIR > 0 or not self.CF > 0:
            raise ValueError(f"CIR and CF must be > 0, got {self.CIR}, {self.CF}")
        if not 40 < self.BG_target < 300:
            raise ValueError(f"BG_target must lie in (40, 300), got {self.BG_target}")


def bolus_dose(cho: float, bg: float, params: AdvisorParams) -> float:
    """Insulin units: ``CHO/CIR + max(BG - target, 0)/CF``."""
    if cho < 0:
        raise ValueError(f"CHO must be >= 0, got {cho}")
    if not math.isfinite(bg):
        raise ValueError(f"BG must be finite, got {bg}")
    return cho / params.CIR + max(bg - params.BG_target, 0.0) / params.CF


def bolus_dose_array(cho, bg, cir, cf, target):
    """Vectorised ``bolus_dose``; all arguments broadcast."""
    return np.asarray(cho) / cir + np.maximum(np.asarray(bg) - target, 0.0) / cf


_LOWER = AdvisorParams(CIR=CIR_BOUNDS[1], CF=CF_BOUNDS[1], BG_target=EXPLORATION_TARGET)
_UPPER = AdvisorParams(CIR=CIR_BOUNDS[0], CF=CF_BOUNDS[0], BG_target=EXPLORATION_TARGET)


def exploration_bounds(cho: float, bg: float) -> tuple[float, float]:
    """Dose interval spanned by the advisor at the extreme calibration coefficients."""
    return bolus_dose(cho, bg, _LOWER), bolus_dose(cho, bg, _UPPER)


@dataclass(frozen=True)
class CalibrationGrid:
    CIR_values: tuple[float, ...]
    CF_values: tuple[float, ...]
    target_values: tuple[float, ...]
    eval_days: int = 14

    def __post_init__(self):
        for name, bounds in (("CIR_values", CIR_BOUNDS), ("CF_values", CF_BOUNDS),
                             ("target_values", TARGET_BOUNDS)):
            values = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ValueError(f"{name} is empty")
            if list(values) != sorted(values):
                raise ValueError(f"{name} must be ascending")
            lo, hi = bounds
            if values[0] < lo - 1e-12 or values[-1] > hi + 1e-12:
                raise ValueError(f"{name} outside [{lo}, {hi}]")
        if self.eval_days < 1:
            raise ValueError("eval_days must be >= 1")

    @classmethod
    def uniform(cls, n_cir: int = 10, n_cf: int = 10, n_target: int = 6,
                eval_days: int = 14) -> "CalibrationGrid":
        return cls(tuple(np.linspace(*CIR_BOUNDS, n_cir).tolist()),
                   tuple(np.linspace(*CF_BOUNDS, n_cf).tolist()),
                   tuple(np.linspace(*TARGET_BOUNDS, n_target).tolist()),
                   eval_days)

    def candidates(self) -> list[AdvisorParams]:
        return [AdvisorParams(c, f, t) for c in self.CIR_values for f in self.CF_values
                for t in self.target_values]


@dataclass(frozen=True)
class CandidateScore:
    params: AdvisorParams
    mean_reward: float
    total_insulin: float


@dataclass(frozen=True)
class CalibrationResult:
    best: AdvisorParams
    mean_reward: float
    scores: tuple[CandidateScore, ...]

    def ranked(self) -> list[CandidateScore]:
        return sorted(self.scores, key=_rank_key)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["CIR", "CF", "BG_target", "mean_reward"])
            for s in self.ranked():
                writer.writerow([repr(s.params.CIR), repr(s.params.CF),
                                 repr(s.params.BG_target), repr(s.mean_reward)])


def _rank_key(score: CandidateScore):
    # best reward first, then least insulin, then grid order for full determinism
    p = score.params
    return (-score.mean_reward, score.total_insulin, p.CIR, p.CF, p.BG_target)


def _score_batch(patient, scenario, cands, days, reward, aggregate):
    from .pipeline import meal_rewards  # local import: pipeline imports this module

    cir = np.array([c.CIR for c in cands])
    cf = np.array([c.CF for c in cands])
    target = np.array([c.BG_target for c in cands])
    cho = scenario.cho_by_meal

    def dose_fn(meal_id, bg):
        return bolus_dose_array(cho[meal_id], bg, cir, cf, target)

    try:
        bg, ins, look = simulate_batch(patient, scenario, dose_fn, len(cands), days)
    except Exception as exc:  # noqa: BLE001 - a failing batch falls back to per-candidate runs
        if len(cands) == 1:
            logger.warning("candidate %s failed: %s", cands[0], exc)
            return [CandidateScore(cands[0], -math.inf, math.inf)]
        return [s for c in cands
                for s in _score_batch(patient, scenario, [c], days, reward, aggregate)]
    scores = []
    for r, cand in enumerate(cands):
        rewards = meal_rewards(bg[r], look[r], scenario, days, reward, aggregate)
        scores.append(CandidateScore(cand, float(np.mean(rewards)), float(ins[r].sum())))
    return scores


def calibrate_grid_search(patient: VirtualPatient, scenario: MealScenario,
                          grid: CalibrationGrid, seed: int = 0,
                          reward: RewardParams = DEFAULT_REWARD,
                          aggregate: str = "next") -> CalibrationResult:
    """Exhaustive search over the grid for the best advisor coefficients.

    Each candidate is simulated for ``grid.eval_days`` days from the fasting
    fixed point and scored by its mean per-meal reward.  The simulator is
    noiseless, so ``seed`` only identifies the run.
    """
    cands = grid.candidates()
    logger.info("calibrating %d candidates over %d days (seed %d)", len(cands),
                grid.eval_days, seed)
    scores = _score_batch(patient, scenario, cands, grid.eval_days, reward, aggregate)
    best = min(scores, key=_rank_key)
    return CalibrationResult(best.params, best.mean_reward, tuple(scores))
