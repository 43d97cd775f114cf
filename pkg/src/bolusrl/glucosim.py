"""Surrogate gluco-insulin simulator.

Bergman minimal model with a two-compartment gut and a two-compartment
subcutaneous insulin depot, integrated with fixed-step RK4.  Readings are
emitted every 3 minutes as ``(t, BG, CHO, INS)`` records.

State vector layout (index: field, unit)::

    0 G   plasma glucose, mg/dL
    1 X   remote insulin action, 1/min
    2 I   plasma insulin, mU/L
    3 Q1  gut compartment 1, mg
    4 Q2  gut compartment 2, mg
    5 S1  subcutaneous depot 1, mU
    6 S2  subcutaneous depot 2, mU

Plasma insulin is cleared at rate ``n * I`` and fed by absorption from the
depot, so constant basal delivery holds ``I`` exactly at ``Ib`` when
``basal_rate = n * Ib * V_I`` (checked on construction).
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)

STEP_MIN = 3.0
STEPS_PER_DAY = 480
MINUTES_PER_DAY = 1440
BG_MIN = 10.0
BG_MAX = 600.0
N_STATE = 7
G, X, I, Q1, Q2, S1, S2 = range(N_STATE)
STATE_FIELDS = ("G", "X", "I", "Q1", "Q2", "S1", "S2")


class InvalidStateError(ValueError):
    pass


class PolicyOutputError(RuntimeError):
    pass


class PatientConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VirtualPatient:
    id: int
    Gb: float
    Ib: float
    p1: float
    p2: float
    p3: float
    tau_I: float
    V_I: float
    n: float
    tau_m: float
    f_bio: float
    V_g: float
    ref_CIR: float
    ref_CF: float
    basal_rate: float

    def __post_init__(self):
        positive = ("Ib", "p1", "p2", "p3", "tau_I", "V_I", "n", "tau_m", "V_g",
                    "ref_CIR", "ref_CF", "basal_rate")
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise PatientConfigError(f"{name} must be finite and > 0, got {value!r}")
        if not 0 < self.f_bio <= 1:
            raise PatientConfigError(f"f_bio must lie in (0, 1], got {self.f_bio!r}")
        if not 40 < self.Gb < 180:
            raise PatientConfigError(f"Gb must lie in (40, 180), got {self.Gb!r}")
        steady_I = self.basal_mU_per_min / (self.n * self.V_I)
        if abs(steady_I - self.Ib) > 1e-9 * self.Ib:
            raise PatientConfigError(
                f"basal_rate {self.basal_rate} U/h holds plasma insulin at {steady_I:.6g} mU/L, "
                f"not Ib={self.Ib}; need basal_rate = n*Ib*V_I*60/1000"
            )

    @property
    def basal_mU_per_min(self) -> float:
        return self.basal_rate * 1000.0 / 60.0

    def params_array(self) -> np.ndarray:
        return np.array([self.Gb, self.Ib, self.p1, self.p2, self.p3, self.tau_I,
                         self.V_I, self.n, self.tau_m, self.f_bio, self.V_g],
                        dtype=np.float64)


@dataclass(frozen=True)
class SimState:
    G: float
    X: float
    I: float
    Q1: float
    Q2: float
    S1: float
    S2: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.G, self.X, self.I, self.Q1, self.Q2, self.S1, self.S2],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, y: Sequence[float], t: float) -> "SimState":
        return cls(*(float(v) for v in y), t=float(t))


def equilibrium_state(patient: VirtualPatient, t: float = 0.0) -> SimState:
    """Fasting fixed point: no gut content, depots and plasma insulin at basal steady state."""
    depot = patient.basal_mU_per_min * patient.tau_I
    return SimState(G=patient.Gb, X=0.0, I=patient.Ib, Q1=0.0, Q2=0.0,
                    S1=depot, S2=depot, t=t)


@dataclass(frozen=True)
class MealEvent:
    time_of_day: float
    grams: float
    meal_id: int

    def __post_init__(self):
        if not 0 <= self.time_of_day < MINUTES_PER_DAY:
            raise ValueError(f"meal time {self.time_of_day} outside [0, 1440)")
        if self.time_of_day % STEP_MIN:
            raise ValueError(f"meal time {self.time_of_day} is not on the 3-minute grid")
        if not self.grams >= 0:
            raise ValueError(f"meal grams must be >= 0, got {self.grams}")


@dataclass(frozen=True)
class MealScenario:
    events: tuple[MealEvent, ...]

    def __post_init__(self):
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        if not events:
            raise ValueError("a meal scenario needs at least one meal")
        times = [e.time_of_day for e in events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("meal times must be strictly increasing")
        ids = [e.meal_id for e in events]
        if len(set(ids)) != len(ids):
            raise ValueError("meal ids must be distinct")

    @classmethod
    def default(cls) -> "MealScenario":
        return cls((MealEvent(360, 50.0, 0), MealEvent(720, 60.0, 1),
                    MealEvent(900, 15.0, 2), MealEvent(1200, 80.0, 3)))

    @classmethod
    def parse(cls, text: str) -> "MealScenario":
        """Parse ``"360:50,720:60"`` (minute:grams pairs); ids follow the order given."""
        events = []
        for k, item in enumerate(p for p in text.split(",") if p.strip()):
            minute, grams = item.split(":")
            events.append(MealEvent(float(minute), float(grams), k))
        return cls(tuple(events))

    def format(self) -> str:
        return ",".join(f"{e.time_of_day:g}:{e.grams:g}" for e in self.events)

    @property
    def meal_ids(self) -> tuple[int, ...]:
        return tuple(e.meal_id for e in self.events)

    @property
    def cho_by_meal(self) -> dict[int, float]:
        return {e.meal_id: e.grams for e in self.events}

    def step_of(self, event: MealEvent) -> int:
        return int(round(event.time_of_day / STEP_MIN))


@dataclass(frozen=True)
class StepRecord:
    t: float
    BG: float
    CHO: float
    INS: float


@dataclass(frozen=True)
class Trajectory:
    """3-minute stream for ``days`` simulated days.

    ``lookahead_BG`` holds the readings past the last record up to and
    including the next day's first meal, so the final meal of the run still
    has a successor state.
    """

    patient_id: int
    seed: int
    t: np.ndarray
    BG: np.ndarray
    CHO: np.ndarray
    INS: np.ndarray
    lookahead_BG: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def T(self) -> int:
        return len(self.t)

    @property
    def records(self) -> list[StepRecord]:
        return [StepRecord(float(a), float(b), float(c), float(d))
                for a, b, c, d in zip(self.t, self.BG, self.CHO, self.INS)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_min", "BG", "CHO", "INS"])
            for t, bg, cho, ins in zip(self.t.tolist(), self.BG.tolist(),
                                       self.CHO.tolist(), self.INS.tolist()):
                writer.writerow([f"{t:g}", repr(bg), repr(cho), repr(ins)])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.seed == other.seed
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("t", "BG", "CHO", "INS", "lookahead_BG")))


# --------------------------------------------------------------------------
# numerics

@numba.njit(cache=True)
def _rhs(y, prm, u, d, out):
    Gb, Ib, p1, p2, p3, tau_I, V_I, n, tau_m, f_bio, V_g = (
        prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6], prm[7], prm[8], prm[9], prm[10])
    out[0] = -p1 * (y[0] - Gb) - y[1] * y[0] + f_bio * y[4] / (tau_m * V_g)
    out[1] = -p2 * y[1] + p3 * (y[2] - Ib)
    out[2] = -n * y[2] + y[6] / (tau_I * V_I)
    out[3] = d - y[3] / tau_m
    out[4] = (y[3] - y[4]) / tau_m
    out[5] = u - y[5] / tau_I
    out[6] = (y[5] - y[6]) / tau_I


@numba.njit(cache=True)
def _rk4_clamped(y, prm, u, d, h, k1, k2, k3, k4, tmp):
    _rhs(y, prm, u, d, k1)
    for j in range(7):
        tmp[j] = y[j] + 0.5 * h * k1[j]
    _rhs(tmp, prm, u, d, k2)
    for j in range(7):
        tmp[j] = y[j] + 0.5 * h * k2[j]
    _rhs(tmp, prm, u, d, k3)
    for j in range(7):
        tmp[j] = y[j] + h * k3[j]
    _rhs(tmp, prm, u, d, k4)
    for j in range(7):
        y[j] = y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    if y[0] < 10.0:
        y[0] = 10.0
    elif y[0] > 600.0:
        y[0] = 600.0
    for j in range(2, 7):
        if y[j] < 0.0:
            y[j] = 0.0


@numba.njit(cache=True)
def _advance(ys, prm, basal, bolus_mU, cho_mg, n_records, substeps, record_dt, bg_out):
    """Advance every row of ``ys`` in place by ``n_records`` record steps.

    Bolus and CHO impulses are delivered as uniform rates over the first
    record step.  ``bg_out[r, k]`` receives G at the start of record step k.
    """
    h = record_dt / substeps
    k1 = np.empty(7)
    k2 = np.empty(7)
    k3 = np.empty(7)
    k4 = np.empty(7)
    tmp = np.empty(7)
    for r in range(ys.shape[0]):
        y = ys[r]
        for k in range(n_records):
            bg_out[r, k] = y[0]
            if k == 0:
                u = basal + bolus_mU[r] / record_dt
                d = cho_mg[r] / record_dt
            else:
                u = basal
                d = 0.0
            for _ in range(substeps):
                _rk4_clamped(y, prm, u, d, h, k1, k2, k3, k4, tmp)


def _check_finite(y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise InvalidStateError(f"non-finite state: {y}")


def ode_derivatives(state: SimState, patient: VirtualPatient, bolus_rate: float,
                    cho_rate: float) -> np.ndarray:
    """Time derivatives of ``(G, X, I, Q1, Q2, S1, S2)``.

    ``bolus_rate`` is in mU/min on top of basal, ``cho_rate`` in mg/min.
    """
    y = state.as_array()
    _check_finite(y)
    if not (math.isfinite(bolus_rate) and math.isfinite(cho_rate)):
        raise InvalidStateError("non-finite input rate")
    out = np.empty(N_STATE)
    _rhs(y, patient.params_array(), patient.basal_mU_per_min + bolus_rate, cho_rate, out)
    return out


def integrate_step(state: SimState, patient: VirtualPatient,
                   inputs: tuple[float, float] = (0.0, 0.0), dt: float = STEP_MIN) -> SimState:
    """One RK4 step of length ``dt``; ``inputs`` = (bolus units, CHO grams) spread over the step."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    bolus_units, cho_grams = inputs
    y = state.as_array()
    _check_finite(y)
    ys = y.reshape(1, N_STATE).copy()
    bg = np.empty((1, 1))
    _advance(ys, patient.params_array(), patient.basal_mU_per_min,
             np.array([bolus_units * 1000.0]), np.array([cho_grams * 1000.0]),
             1, 1, float(dt), bg)
    _check_finite(ys[0])
    return SimState.from_array(ys[0], state.t + dt)


def _substeps_for(dt: float) -> int:
    substeps = STEP_MIN / dt
    if abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
        raise ValueError(f"integration dt={dt} must divide the 3-minute record step")
    return int(round(substeps))


DoseFn = Callable[[int, np.ndarray], np.ndarray]


def simulate_batch(patient: VirtualPatient, scenario: MealScenario, dose_fn: DoseFn,
                   n_runs: int, days: int, dt: float = STEP_MIN,
                   initial: SimState | None = None, noise_cv: float = 0.0,
                   rng: np.random.Generator | None = None,
                   with_lookahead: bool = True):
    """Simulate ``n_runs`` independent copies of the patient side by side.

    ``dose_fn(meal_id, bg)`` receives the pre-meal readings of all runs and
    returns one dose (units) per run.  Returns ``(BG, INS, lookahead)`` with
    shapes ``(n_runs, days*480)``, ``(n_runs, days*480)`` and
    ``(n_runs, L)``.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    substeps = _substeps_for(dt)
    prm = patient.params_array()
    basal = patient.basal_mU_per_min
    start = initial if initial is not None else equilibrium_state(patient)
    y0 = start.as_array()
    _check_finite(y0)
    ys = np.tile(y0, (n_runs, 1))
    n_total = days * STEPS_PER_DAY
    bg_true = np.empty((n_runs, n_total))
    ins = np.zeros((n_runs, n_total))
    meal_steps = [scenario.step_of(e) for e in scenario.events]
    zeros = np.zeros(n_runs)

    def read(bg):
        if noise_cv > 0:
            return np.clip(bg * (1.0 + noise_cv * rng.standard_normal(bg.shape)), BG_MIN, BG_MAX)
        return bg

    cursor = 0
    for day in range(days):
        base = day * STEPS_PER_DAY
        for event, step in zip(scenario.events, meal_steps):
            target = base + step
            if target > cursor:
                _advance(ys, prm, basal, zeros, zeros, target - cursor, substeps, STEP_MIN,
                         bg_true[:, cursor:target])
                cursor = target
            reading = read(ys[:, G].copy())
            dose = np.asarray(dose_fn(event.meal_id, reading), dtype=np.float64)
            dose = np.broadcast_to(dose, (n_runs,)).copy()
            if not np.all(np.isfinite(dose)) or np.any(dose < 0):
                raise PolicyOutputError(
                    f"policy returned invalid dose {dose} at meal {event.meal_id}, day {day}")
            ins[:, cursor] = dose
            _advance(ys, prm, basal, dose * 1000.0, np.full(n_runs, event.grams * 1000.0),
                     1, substeps, STEP_MIN, bg_true[:, cursor:cursor + 1])
            bg_true[:, cursor] = reading if noise_cv > 0 else bg_true[:, cursor]
            cursor += 1
    if cursor < n_total:
        _advance(ys, prm, basal, zeros, zeros, n_total - cursor, substeps, STEP_MIN,
                 bg_true[:, cursor:])
    if noise_cv > 0:
        meal_mask = np.zeros(n_total, dtype=bool)
        for day in range(days):
            for step in meal_steps:
                meal_mask[day * STEPS_PER_DAY + step] = True
        other = ~meal_mask
        bg_true[:, other] = read(bg_true[:, other])
    lookahead = np.empty((n_runs, 0))
    if with_lookahead:
        n_look = meal_steps[0] + 1
        lookahead = np.empty((n_runs, n_look))
        _advance(ys, prm, basal, zeros, zeros, n_look, substeps, STEP_MIN, lookahead)
        lookahead = read(lookahead)
    if not np.all(np.isfinite(ys)):
        raise InvalidStateError("simulation produced non-finite state")
    return bg_true, ins, lookahead


def cho_stream(scenario: MealScenario, days: int) -> np.ndarray:
    cho = np.zeros(days * STEPS_PER_DAY)
    for day in range(days):
        for event in scenario.events:
            cho[day * STEPS_PER_DAY + scenario.step_of(event)] = event.grams
    return cho


def run_scenario(patient: VirtualPatient, scenario: MealScenario, policy, days: int,
                 seed: int = 0, dt: float = STEP_MIN, noise_cv: float = 0.0,
                 initial: SimState | None = None) -> Trajectory:
    """Simulate one patient for ``days`` days, querying ``policy(meal_id, BG)`` at each meal."""

    def dose_fn(meal_id, bg):
        return np.array([policy(meal_id, float(bg[0]))], dtype=np.float64)

    rng = np.random.default_rng(seed) if noise_cv > 0 else None
    bg, ins, look = simulate_batch(patient, scenario, dose_fn, 1, days, dt=dt,
                                   initial=initial, noise_cv=noise_cv, rng=rng)
    n_total = days * STEPS_PER_DAY
    return Trajectory(patient_id=patient.id, seed=seed,
                      t=np.arange(n_total) * STEP_MIN, BG=bg[0], CHO=cho_stream(scenario, days),
                      INS=ins[0], lookahead_BG=look[0])


# --------------------------------------------------------------------------
# patient presets

PATIENT_FIELDS = tuple(f.name for f in dataclasses.fields(VirtualPatient))


def load_patients(path: str | Path | None = None) -> dict[int, VirtualPatient]:
    """Read patient presets; one ``[adult#k]`` section per patient."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is None:
        parser.read_string(resources.files("bolusrl.data").joinpath("patients.ini").read_text())
    else:
        with open(path) as fh:
            parser.read_file(fh)
    patients = {}
    for section in parser.sections():
        keys = set(parser[section])
        missing = set(PATIENT_FIELDS) - keys
        extra = keys - set(PATIENT_FIELDS)
        if missing or extra:
            raise PatientConfigError(
                f"[{section}] missing keys {sorted(missing)}, unknown keys {sorted(extra)}")
        values = {k: (int(v) if k == "id" else float(v)) for k, v in parser[section].items()}
        patient = VirtualPatient(**values)
        patients[patient.id] = patient
    return patients


def get_patient(patient_id: int, path: str | Path | None = None) -> VirtualPatient:
    patients = load_patients(path)
    try:
        return patients[patient_id]
    except KeyError:
        raise PatientConfigError(
            f"unknown patient id {patient_id}; available: {sorted(patients)}") from None


def uncovered_meal_peak(patient: VirtualPatient, grams: float = 50.0, hours: float = 12.0,
                        dt: float = STEP_MIN) -> float:
    """Peak BG after a meal taken at the fasting fixed point with basal insulin only."""
    y = equilibrium_state(patient).as_array().reshape(1, N_STATE).copy()
    n = int(hours * 60 / STEP_MIN)
    bg = np.empty((1, n))
    _advance(y, patient.params_array(), patient.basal_mU_per_min, np.zeros(1),
             np.array([grams * 1000.0]), n, _substeps_for(dt), STEP_MIN, bg)
    return float(bg.max())


def iter_meal_steps(scenario: MealScenario, days: int) -> Iterable[tuple[int, MealEvent]]:
    for day in range(days):
        for event in scenario.events:
            yield day * STEPS_PER_DAY + scenario.step_of(event), event
