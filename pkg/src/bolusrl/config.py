"""Experiment configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored.  Every key has a type and a
default; validation collects all offending keys before failing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .advisor import AdvisorParams, CalibrationGrid
from .glucosim import MealScenario, PatientConfigError, VirtualPatient, get_patient
from .qlearn import FeatureGrid, TrainConfig
from .riskmodel import RewardParams


class ConfigError(ValueError):
    """One or more invalid keys; ``problems`` lists ``(key, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {m}" for k, m in problems))


def _pos_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise ValueError("must be a positive integer")
    return n


def _nonneg_int(v: str) -> int:
    n = int(v)
    if n < 0:
        raise ValueError("must be >= 0")
    return n


def _pos_float(v: str) -> float:
    x = float(v)
    if not (math.isfinite(x) and x > 0):
        raise ValueError("must be a positive number")
    return x


def _nonneg_float(v: str) -> float:
    x = float(v)
    if not (math.isfinite(x) and x >= 0):
        raise ValueError("must be a finite number >= 0")
    return x


def _unit_open(v: str) -> float:
    x = float(v)
    if not 0 < x < 1:
        raise ValueError("must lie in (0, 1)")
    return x


def _gamma(v: str) -> float:
    x = float(v)
    if not 0 <= x < 1:
        raise ValueError("must lie in [0, 1)")
    return x


def _text(v: str) -> str:
    return v


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


def _scenario(v: str) -> MealScenario:
    try:
        return MealScenario.parse(v)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"bad meal list {v!r} ({exc}); expected minute:grams,...") from None


# key -> (parser, default); a default of None means "unset"
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (_nonneg_int, 0),
    "patient.id": (_pos_int, 1),
    "patient.presets": (_text, None),
    "scenario.meals": (_scenario, MealScenario.default()),
    "scenario.file": (_text, None),
    "calibration.cir_points": (_pos_int, 10),
    "calibration.cf_points": (_pos_int, 10),
    "calibration.target_points": (_pos_int, 6),
    "calibration.eval_days": (_pos_int, 14),
    "explore.days": (_pos_int, 365),
    "eval.days": (_pos_int, 45),
    "features.B": (_pos_int, 8),
    "features.p": (_unit_open, 0.2),
    "features.bg_lo": (_pos_float, 40.0),
    "features.bg_hi": (_pos_float, 600.0),
    "features.ins_max": (_pos_float, 30.0),
    "train.gamma": (_gamma, 0.9),
    "train.learning_rate": (_pos_float, 0.01),
    "train.replay_capacity": (_pos_int, 50_000),
    "train.batch_size": (_pos_int, 64),
    "train.freeze_period": (_pos_int, 500),
    "train.total_updates": (_pos_int, 200_000),
    "train.action_grid_size": (_pos_int, 121),
    "train.dataset": (_text, None),
    "reward.scale": (_pos_float, 1.0),
    "reward.aggregate": (_choice("next", "interval"), "next"),
    "sim.noise_cv": (_nonneg_float, 0.0),
    "evaluate.policy": (_choice("baseline", "learned"), "baseline"),
    "evaluate.model": (_text, None),
    "advisor.cir": (_pos_float, None),
    "advisor.cf": (_pos_float, None),
    "advisor.target": (_pos_float, None),
    "output.dir": (_text, "runs/out"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            values[key] = value
        return replace(self, values=values)

    def path(self, key: str) -> Path | None:
        """File-valued key, resolved relative to the config file."""
        value = self.values.get(key)
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    # typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self["seed"]

    def stage_seed(self, stage: str) -> int:
        offsets = {"calibrate": 0, "explore": 1, "train": 2, "evaluate": 3}
        return self.seed + offsets[stage]

    @property
    def out_dir(self) -> Path:
        return Path(self["output.dir"])

    def patient(self) -> VirtualPatient:
        return get_patient(self["patient.id"], self.path("patient.presets"))

    def scenario(self) -> MealScenario:
        return self["scenario.meals"]

    def calibration_grid(self) -> CalibrationGrid:
        return CalibrationGrid.uniform(self["calibration.cir_points"],
                                       self["calibration.cf_points"],
                                       self["calibration.target_points"],
                                       self["calibration.eval_days"])

    def feature_grid(self) -> FeatureGrid:
        return FeatureGrid(B=self["features.B"], p=self["features.p"],
                           bg_range=(self["features.bg_lo"], self["features.bg_hi"]),
                           ins_range=(0.0, self["features.ins_max"]))

    def train_config(self) -> TrainConfig:
        return TrainConfig(gamma=self["train.gamma"],
                           learning_rate=self["train.learning_rate"],
                           replay_capacity=self["train.replay_capacity"],
                           batch_size=self["train.batch_size"],
                           freeze_period=self["train.freeze_period"],
                           total_updates=self["train.total_updates"],
                           action_grid_size=self["train.action_grid_size"],
                           seed=self.stage_seed("train"))

    def reward(self) -> RewardParams:
        return RewardParams(scale=self["reward.scale"])

    def advisor_params(self) -> AdvisorParams:
        return AdvisorParams(self["advisor.cir"], self["advisor.cf"], self["advisor.target"])


def _read_pairs(text: str, origin: str) -> tuple[dict[str, str], list[tuple[str, str]]]:
    pairs, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            problems.append((f"{origin}:{lineno}", f"expected 'key = value', got {raw.strip()!r}"))
            continue
        if key in pairs:
            problems.append((key, f"duplicate key at {origin}:{lineno}"))
        pairs[key] = value.strip()
    return pairs, problems


def parse_config(text: str, source: Path | None = None,
                 overrides: dict[str, str] | None = None) -> ExperimentConfig:
    origin = str(source) if source else "<config>"
    raw, problems = _read_pairs(text, origin)
    raw.update(overrides or {})
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for key, text_value in raw.items():
        if key not in SCHEMA:
            problems.append((key, "unknown key"))
            continue
        if text_value == "":
            values[key] = None
            continue
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(text_value)
        except (ValueError, TypeError) as exc:
            problems.append((key, str(exc)))
    config = ExperimentConfig(values, source)
    if values.get("scenario.file") and "scenario.meals" not in raw:
        scen_path = config.path("scenario.file")
        try:
            values["scenario.meals"] = _scenario(scen_path.read_text().strip())
        except OSError as exc:
            problems.append(("scenario.file", f"cannot read {scen_path}: {exc.strerror}"))
        except ValueError as exc:
            problems.append(("scenario.file", str(exc)))
    problems.extend(_cross_checks(config))
    if problems:
        raise ConfigError(problems)
    return config


def _cross_checks(config: ExperimentConfig) -> list[tuple[str, str]]:
    v = config.values
    problems = []
    if v["features.bg_lo"] is not None and v["features.bg_hi"] is not None \
            and not v["features.bg_lo"] < v["features.bg_hi"]:
        problems.append(("features.bg_hi", "must exceed features.bg_lo"))
    if v["train.action_grid_size"] is not None and v["train.action_grid_size"] < 2:
        problems.append(("train.action_grid_size", "must be >= 2"))
    presets = config.path("patient.presets")
    if presets is not None and not presets.is_file():
        problems.append(("patient.presets", f"file not found: {presets}"))
    elif v["patient.id"] is not None:
        try:
            config.patient()
        except (PatientConfigError, ValueError) as exc:
            problems.append(("patient.id", str(exc)))
    if all(v[k] is not None for k in ("advisor.cir", "advisor.cf", "advisor.target")):
        try:
            config.advisor_params()
        except ValueError as exc:
            problems.append(("advisor.target", str(exc)))
    return problems


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a config file; ``None`` selects the shipped default (adult #1)."""
    if path is None:
        text = resources.files("bolusrl.data").joinpath("adult1.cfg").read_text()
        return parse_config(text, None, overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([("--config", f"cannot read {p}: {exc.strerror}")]) from None
    return parse_config(text, p, overrides)


def shipped_config_text(patient_id: int) -> str:
    return resources.files("bolusrl.data").joinpath(f"adult{patient_id}.cfg").read_text()


def require(config: ExperimentConfig, *keys: str) -> None:
    missing = [(k, "required for this command") for k in keys if config.get(k) is None]
    if missing:
        raise ConfigError(missing)


def format_value(value) -> str:
    if isinstance(value, MealScenario):
        return value.format()
    if isinstance(value, float):
        return repr(value)
    return str(value)
