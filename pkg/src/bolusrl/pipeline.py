"""Experiment pipeline: exploration data, pre-meal summaries, policy evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .advisor import AdvisorParams, CalibrationResult, bolus_dose, exploration_bounds
from .glucosim import (
    STEP_MIN,
    STEPS_PER_DAY,
    MealScenario,
    Trajectory,
    VirtualPatient,
    run_scenario,
)
from .qlearn import QModel, Transition, greedy_action
from .riskmodel import DEFAULT_REWARD, RewardParams, risk_reward

logger = logging.getLogger(__name__)

BIN_EDGES = (40.0, 70.0, 112.5, 180.0, 350.0, 600.0)
HYPO_LIMIT = 70.0
AGGREGATES = ("next", "interval")


class AlignmentError(ValueError):
    pass


class Policy(Protocol):
    label: str

    def __call__(self, meal_id: int, bg: float) -> float: ...


@dataclass(frozen=True)
class BaselineAdvisor:
    params: AdvisorParams
    cho_by_meal: dict
    label: str = "baseline"

    def __call__(self, meal_id: int, bg: float) -> float:
        return bolus_dose(self.cho_by_meal[meal_id], bg, self.params)


@dataclass(frozen=True)
class GreedyQ:
    model: QModel
    action_grid_size: int = 121
    label: str = "learned"

    def __call__(self, meal_id: int, bg: float) -> float:
        return greedy_action(self.model, meal_id, bg, self.action_grid_size)


class UniformExplorer:
    """Draws each dose uniformly between the exploration bounds for the meal."""

    label = "explorer"

    def __init__(self, seed: int, cho_by_meal: dict):
        self.seed = seed
        self.cho_by_meal = dict(cho_by_meal)
        self.rng = np.random.default_rng(seed)
        self.draws: list[tuple[float, float, float]] = []

    def __call__(self, meal_id: int, bg: float) -> float:
        lo, hi = exploration_bounds(self.cho_by_meal[meal_id], bg)
        dose = float(self.rng.uniform(lo, hi))
        self.draws.append((lo, hi, dose))
        return dose


# --------------------------------------------------------------------------
# pre-meal summaries

def _meal_index(scenario: MealScenario, days: int) -> np.ndarray:
    steps = np.array([scenario.step_of(e) for e in scenario.events])
    return (np.arange(days)[:, None] * STEPS_PER_DAY + steps[None, :]).ravel()


def meal_rewards(bg: np.ndarray, lookahead: np.ndarray, scenario: MealScenario, days: int,
                 reward: RewardParams = DEFAULT_REWARD, aggregate: str = "next") -> np.ndarray:
    """Per-meal rewards for a 3-minute stream.

    ``aggregate='next'`` scores the next pre-meal reading; ``'interval'``
    averages the reward over every reading in ``(t, t_next]``.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"reward aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    idx = _meal_index(scenario, days)
    extended = np.concatenate([bg, lookahead])
    next_idx = np.append(idx[1:], len(bg) + scenario.step_of(scenario.events[0]))
    if aggregate == "next":
        return risk_reward(extended[next_idx], reward)
    step_reward = risk_reward(extended, reward)
    csum = np.concatenate([[0.0], np.cumsum(step_reward)])
    return (csum[next_idx + 1] - csum[idx + 1]) / (next_idx - idx)


def _check_alignment(trajectory: Trajectory, scenario: MealScenario) -> int:
    if trajectory.T == 0 or trajectory.T % STEPS_PER_DAY:
        raise AlignmentError(f"trajectory length {trajectory.T} is not a whole number of days")
    days = trajectory.T // STEPS_PER_DAY
    idx = _meal_index(scenario, days)
    expected = np.zeros(trajectory.T)
    expected[idx] = np.tile([e.grams for e in scenario.events], days)
    mismatch = np.flatnonzero(trajectory.CHO != expected)
    if mismatch.size:
        k = int(mismatch[0])
        raise AlignmentError(
            f"CHO at step {k} (t={k * STEP_MIN:g} min) is {trajectory.CHO[k]}, scenario expects "
            f"{expected[k]}")
    if len(trajectory.lookahead_BG) <= scenario.step_of(scenario.events[0]):
        raise AlignmentError("trajectory lacks the look-ahead reading for its final meal")
    return days


def summarize_to_meals(trajectory: Trajectory, scenario: MealScenario,
                       reward: RewardParams = DEFAULT_REWARD,
                       aggregate: str = "next") -> list[Transition]:
    """One transition per meal: pre-meal reading, meal, dose, reward and the next pre-meal state."""
    days = _check_alignment(trajectory, scenario)
    idx = _meal_index(scenario, days)
    rewards = meal_rewards(trajectory.BG, trajectory.lookahead_BG, scenario, days, reward,
                           aggregate)
    ids = [e.meal_id for e in scenario.events] * days
    bg = trajectory.BG[idx]
    next_bg = np.append(bg[1:], trajectory.lookahead_BG[scenario.step_of(scenario.events[0])])
    next_ids = ids[1:] + ids[:1]
    return [Transition(meal_id=ids[k], BG=float(bg[k]), CHO=float(trajectory.CHO[i]),
                       INS=float(trajectory.INS[i]), reward=float(rewards[k]),
                       next_meal_id=next_ids[k], next_BG=float(next_bg[k]))
            for k, i in enumerate(idx.tolist())]


def meal_step_indices(scenario: MealScenario, days: int) -> np.ndarray:
    return _meal_index(scenario, days)


def generate_exploration_dataset(patient: VirtualPatient, scenario: MealScenario, days: int,
                                 seed: int, reward: RewardParams = DEFAULT_REWARD,
                                 aggregate: str = "next", noise_cv: float = 0.0):
    """Simulate with uniformly random doses inside the exploration bounds."""
    if days < 1:
        raise ValueError("days must be >= 1")
    explorer = UniformExplorer(seed, scenario.cho_by_meal)
    trajectory = run_scenario(patient, scenario, explorer, days, seed=seed, noise_cv=noise_cv)
    return trajectory, summarize_to_meals(trajectory, scenario, reward, aggregate)


def write_transitions_csv(transitions: Sequence[Transition], scenario: MealScenario,
                          path: str | Path) -> None:
    steps = [scenario.step_of(e) for e in scenario.events]
    n = len(scenario.events)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_index", "ID_meal", "BG", "CHO", "INS", "reward", "next_ID_meal",
                         "next_BG"])
        for k, t in enumerate(transitions):
            t_index = (k // n) * STEPS_PER_DAY + steps[k % n]
            writer.writerow([t_index, t.meal_id, repr(t.BG), repr(t.CHO), repr(t.INS),
                             repr(t.reward), t.next_meal_id, repr(t.next_BG)])


def read_transitions_csv(path: str | Path) -> list[Transition]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"ID_meal", "BG", "CHO", "INS", "reward", "next_ID_meal", "next_BG"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: transitions CSV needs columns {sorted(required)}")
        for row in reader:
            out.append(Transition(int(row["ID_meal"]), float(row["BG"]), float(row["CHO"]),
                                  float(row["INS"]), float(row["reward"]),
                                  int(row["next_ID_meal"]), float(row["next_BG"])))
    return out


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    patient_id: int
    label: str
    days: int
    bin_edges: tuple[float, ...]
    bin_fractions: tuple[float, ...]
    mean_reward: float
    hypo_fraction: float
    profile_minutes: np.ndarray = field(repr=False)
    profile_mean: np.ndarray = field(repr=False)
    profile_p10: np.ndarray = field(repr=False)
    profile_p90: np.ndarray = field(repr=False)
    mean_dose_by_meal: dict = field(default_factory=dict)

    def write_bins_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "fraction"])
            for lo, hi, frac in zip(self.bin_edges, self.bin_edges[1:], self.bin_fractions):
                writer.writerow([f"{lo:g}", f"{hi:g}", repr(frac)])

    def write_profile_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["minute_of_day", "mean_BG", "p10_BG", "p90_BG"])
            for row in zip(self.profile_minutes.tolist(), self.profile_mean.tolist(),
                           self.profile_p10.tolist(), self.profile_p90.tolist()):
                writer.writerow([f"{row[0]:g}", repr(row[1]), repr(row[2]), repr(row[3])])


def bin_fractions(bg: np.ndarray, edges: Sequence[float] = BIN_EDGES) -> np.ndarray:
    """Share of readings per bin; readings are clamped into the outer edges, last bin closed."""
    clamped = np.clip(bg, edges[0], edges[-1])
    which = np.searchsorted(np.asarray(edges[1:-1]), clamped, side="right")
    return np.bincount(which, minlength=len(edges) - 1) / len(bg)


def report_from_trajectory(trajectory: Trajectory, scenario: MealScenario, label: str,
                           reward: RewardParams = DEFAULT_REWARD,
                           aggregate: str = "next") -> EvalReport:
    days = _check_alignment(trajectory, scenario)
    fractions = bin_fractions(trajectory.BG)
    by_day = trajectory.BG.reshape(days, STEPS_PER_DAY)
    rewards = meal_rewards(trajectory.BG, trajectory.lookahead_BG, scenario, days, reward,
                           aggregate)
    idx = _meal_index(scenario, days).reshape(days, len(scenario.events))
    doses = {e.meal_id: float(trajectory.INS[idx[:, j]].mean())
             for j, e in enumerate(scenario.events)}
    hypo = float(fractions[: BIN_EDGES.index(HYPO_LIMIT)].sum())
    return EvalReport(
        patient_id=trajectory.patient_id, label=label, days=days, bin_edges=BIN_EDGES,
        bin_fractions=tuple(float(f) for f in fractions), mean_reward=float(rewards.mean()),
        hypo_fraction=hypo,
        profile_minutes=np.arange(STEPS_PER_DAY) * STEP_MIN,
        profile_mean=by_day.mean(axis=0),
        profile_p10=np.percentile(by_day, 10, axis=0),
        profile_p90=np.percentile(by_day, 90, axis=0),
        mean_dose_by_meal=doses,
    )


def evaluate_policy(patient: VirtualPatient, scenario: MealScenario, policy, days: int = 45,
                    seed: int = 0, reward: RewardParams = DEFAULT_REWARD,
                    aggregate: str = "next", noise_cv: float = 0.0,
                    label: str | None = None) -> tuple[EvalReport, Trajectory]:
    trajectory = run_scenario(patient, scenario, policy, days, seed=seed, noise_cv=noise_cv)
    name = label or getattr(policy, "label", "policy")
    return report_from_trajectory(trajectory, scenario, name, reward, aggregate), trajectory


# --------------------------------------------------------------------------
# full experiment

class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


OUTPUT_FILES = (
    "calibration.csv",
    "trajectory.csv",
    "transitions.csv",
    "model.txt",
    "baseline/bins.csv",
    "baseline/profile.csv",
    "learned/bins.csv",
    "learned/profile.csv",
    "summary.txt",
)


@dataclass
class ComparisonBundle:
    patient_id: int
    calibration: CalibrationResult
    n_transitions: int
    model: QModel
    baseline: EvalReport
    learned: EvalReport
    out_dir: Path

    @property
    def learned_beats_baseline(self) -> bool:
        return self.learned.mean_reward >= self.baseline.mean_reward


def _fmt_frac(x: float) -> str:
    return f"{x:.2f}".lstrip("0") if x < 1 else f"{x:.2f}"


def comparison_table(bundle: ComparisonBundle, scenario: MealScenario) -> str:
    b, l = bundle.baseline, bundle.learned
    cal = bundle.calibration.best
    lines = [
        f"BG distribution, adult #{bundle.patient_id} ({b.days}-day evaluation)",
        "",
        f"{'BG bin (mg/dL)':<18}{'pi_0':>8}{'pi_RL':>8}",
    ]
    for k, (lo, hi) in enumerate(zip(b.bin_edges, b.bin_edges[1:])):
        close = "]" if k == len(b.bin_fractions) - 1 else ")"
        label = f"[{lo:g}, {hi:g}{close}"
        lines.append(f"{label:<18}{_fmt_frac(b.bin_fractions[k]):>8}"
                     f"{_fmt_frac(l.bin_fractions[k]):>8}")
    lines += [
        "",
        f"{'mean reward/meal':<18}{b.mean_reward:>8.3f}{l.mean_reward:>8.3f}",
        f"{'hypo fraction':<18}{b.hypo_fraction:>8.3f}{l.hypo_fraction:>8.3f}",
    ]
    for e in scenario.events:
        name = f"dose meal {e.meal_id} ({e.grams:g} g)"
        lines.append(f"{name:<18}{b.mean_dose_by_meal[e.meal_id]:>8.2f}"
                     f"{l.mean_dose_by_meal[e.meal_id]:>8.2f}")
    verdict = "yes" if bundle.learned_beats_baseline else "NO (learned policy underperforms)"
    lines += [
        "",
        f"pi_0: CIR={cal.CIR:g} CF={cal.CF:g} BG_target={cal.BG_target:g} "
        f"(calibration mean reward {bundle.calibration.mean_reward:.3f})",
        f"pi_RL: greedy over {bundle.n_transitions} exploration transitions",
        f"learned mean reward >= baseline: {verdict}",
    ]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    report.write_bins_csv(directory / "bins.csv")
    report.write_profile_csv(directory / "profile.csv")


def run_experiment(config) -> ComparisonBundle:
    """Calibrate, explore, train, and evaluate both policies; write every artifact.

    ``config`` is an :class:`bolusrl.config.ExperimentConfig`.  Existing files
    in the output directory are overwritten; on failure whatever was already
    written stays in place.
    """
    from .advisor import calibrate_grid_search
    from .qlearn import save_model, train

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    reward = config.reward()
    aggregate = config["reward.aggregate"]
    noise = config["sim.noise_cv"]
    eval_days = config["eval.days"]

    def stage(name, fn):
        logger.info("stage %s", name)
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
            raise StageError(name, exc) from exc

    patient = stage("setup", config.patient)
    scenario = config.scenario()

    def calibrate():
        result = calibrate_grid_search(patient, scenario, config.calibration_grid(),
                                       config.stage_seed("calibrate"), reward, aggregate)
        result.to_csv(out / "calibration.csv")
        return result

    calibration = stage("calibrate", calibrate)
    logger.info("calibrated advisor %s (mean reward %.4f)", calibration.best,
                calibration.mean_reward)

    def explore():
        trajectory, transitions = generate_exploration_dataset(
            patient, scenario, config["explore.days"], config.stage_seed("explore"), reward,
            aggregate, noise)
        trajectory.to_csv(out / "trajectory.csv")
        write_transitions_csv(transitions, scenario, out / "transitions.csv")
        return transitions

    transitions = stage("explore", explore)

    def fit():
        result = train(transitions, config.train_config(), grid=config.feature_grid(),
                       meal_ids=scenario.meal_ids)
        save_model(result.model, out / "model.txt")
        return result.model

    model = stage("train", fit)

    def evaluate(policy, label):
        report, _ = evaluate_policy(patient, scenario, policy, eval_days,
                                    config.stage_seed("evaluate"), reward, aggregate, noise,
                                    label)
        write_report(report, out / label)
        return report

    baseline = stage("evaluate-baseline", lambda: evaluate(
        BaselineAdvisor(calibration.best, scenario.cho_by_meal), "baseline"))
    learned = stage("evaluate-learned", lambda: evaluate(
        GreedyQ(model, config["train.action_grid_size"]), "learned"))

    bundle = ComparisonBundle(patient.id, calibration, len(transitions), model, baseline,
                              learned, out)
    (out / "summary.txt").write_text(comparison_table(bundle, scenario))
    if not bundle.learned_beats_baseline:
        logger.warning("learned policy mean reward %.4f is below the baseline's %.4f",
                       learned.mean_reward, baseline.mean_reward)
    return bundle
