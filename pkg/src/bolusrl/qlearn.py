"""Linear Q-learning over a Gaussian RBF tensor grid of (BG, INS).

Each meal identifier owns a ``B x B`` coefficient matrix; the value of a
state/action pair is ``phi_bg(BG) @ alpha[meal] @ phi_ins(INS)``.  Training
is batched TD(0) with uniform replay and a periodically refreshed frozen copy
of the coefficients for computing Bellman targets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class ModelFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FeatureGrid:
    B: int = 8
    p: float = 0.2
    bg_range: tuple[float, float] = (40.0, 600.0)
    ins_range: tuple[float, float] = (0.0, 30.0)

    def __post_init__(self):
        object.__setattr__(self, "bg_range", tuple(float(v) for v in self.bg_range))
        object.__setattr__(self, "ins_range", tuple(float(v) for v in self.ins_range))
        # B == 1 is allowed as a degenerate constant basis
        if int(self.B) != self.B or self.B < 1:
            raise ValueError(f"B must be a positive integer, got {self.B}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        for name in ("bg_range", "ins_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")

    def centers(self, axis: str) -> np.ndarray:
        lo, hi = self._range(axis)
        if self.B == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, self.B)

    def width(self, axis: str) -> float:
        """Gaussian sigma making each basis equal ``p`` at its neighbours' centres."""
        if self.B == 1:
            return math.inf
        lo, hi = self._range(axis)
        spacing = (hi - lo) / (self.B - 1)
        return spacing / math.sqrt(2.0 * math.log(1.0 / self.p))

    def basis(self, axis: str, values) -> np.ndarray:
        """Basis values, shape ``values.shape + (B,)``; inputs are clamped to the axis range."""
        lo, hi = self._range(axis)
        x = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
        sigma = self.width(axis)
        if math.isinf(sigma):
            return np.ones(x.shape + (1,))
        z = (x[..., None] - self.centers(axis)) / sigma
        return np.exp(-0.5 * z * z)

    def _range(self, axis: str) -> tuple[float, float]:
        if axis == "bg":
            return self.bg_range
        if axis == "ins":
            return self.ins_range
        raise ValueError(f"unknown axis {axis!r}")

    def action_grid(self, size: int) -> np.ndarray:
        if size < 2:
            raise ValueError("action grid needs at least 2 points")
        return np.linspace(*self.ins_range, size)


def features(bg, ins, grid: FeatureGrid) -> np.ndarray:
    """Flattened outer product ``phi_bg(BG) x phi_ins(INS)``, length ``B*B`` (batched on leading axes)."""
    fb = grid.basis("bg", bg)
    fi = grid.basis("ins", ins)
    out = fb[..., :, None] * fi[..., None, :]
    return out.reshape(out.shape[:-2] + (grid.B * grid.B,))


@dataclass
class QModel:
    grid: FeatureGrid
    meal_ids: tuple[int, ...]
    alpha: np.ndarray

    def __post_init__(self):
        self.meal_ids = tuple(int(m) for m in self.meal_ids)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if len(set(self.meal_ids)) != len(self.meal_ids):
            raise ValueError("duplicate meal ids")
        expected = (len(self.meal_ids), self.grid.B, self.grid.B)
        if self.alpha.shape != expected:
            raise ValueError(f"alpha shape {self.alpha.shape} != {expected}")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha has non-finite entries")

    @classmethod
    def zeros(cls, grid: FeatureGrid, meal_ids: Sequence[int]) -> "QModel":
        return cls(grid, tuple(meal_ids), np.zeros((len(meal_ids), grid.B, grid.B)))

    def index(self, meal_id: int) -> int:
        try:
            return self.meal_ids.index(int(meal_id))
        except ValueError:
            raise KeyError(f"meal id {meal_id} not in model {self.meal_ids}") from None

    def copy(self) -> "QModel":
        return QModel(self.grid, self.meal_ids, self.alpha.copy())

    def __eq__(self, other):
        if not isinstance(other, QModel):
            return NotImplemented
        return (self.grid == other.grid and self.meal_ids == other.meal_ids
                and np.array_equal(self.alpha, other.alpha))


def q_value(model: QModel, meal_id: int, bg: float, ins: float) -> float:
    m = model.index(meal_id)
    fb = model.grid.basis("bg", bg)
    fi = model.grid.basis("ins", ins)
    return float(fb @ model.alpha[m] @ fi)


def q_over_actions(model: QModel, meal_id: int, bg: float, action_grid_size: int):
    actions = model.grid.action_grid(action_grid_size)
    fb = model.grid.basis("bg", bg)
    q = fb @ model.alpha[model.index(meal_id)] @ model.grid.basis("ins", actions).T
    return actions, q


def greedy_action(model: QModel, meal_id: int, bg: float, action_grid_size: int = 121) -> float:
    """Action-grid dose with the highest Q; ties go to the lowest dose."""
    actions, q = q_over_actions(model, meal_id, bg, action_grid_size)
    return float(actions[int(np.argmax(q))])


@dataclass(frozen=True)
class Transition:
    meal_id: int
    BG: float
    CHO: float
    INS: float
    reward: float
    next_meal_id: int
    next_BG: float


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    learning_rate: float = 0.01
    replay_capacity: int = 50_000
    batch_size: int = 64
    freeze_period: int = 500
    total_updates: int = 200_000
    action_grid_size: int = 121
    seed: int = 0

    def __post_init__(self):
        # gamma = 0 is accepted for one-step regression
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("replay_capacity", "batch_size", "freeze_period", "total_updates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.action_grid_size < 2:
            raise ValueError("action_grid_size must be >= 2")


class ReplayMemory:
    """Fixed-capacity ring buffer of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def extend(self, transitions) -> None:
        for t in transitions:
            self.push(t)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def items(self) -> list[Transition]:
        return list(self._items)

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, len(self._items), size=n)

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        return [self._items[i] for i in self.sample_indices(rng, n)]


class _Arrays:
    """Column view of a transition list, with features precomputed."""

    def __init__(self, transitions: Sequence[Transition], model: QModel):
        grid = model.grid
        self.meal = np.array([model.index(t.meal_id) for t in transitions], dtype=np.intp)
        self.next_meal = np.array([model.index(t.next_meal_id) for t in transitions],
                                  dtype=np.intp)
        self.reward = np.array([t.reward for t in transitions], dtype=np.float64)
        self.phi = features(np.array([t.BG for t in transitions]),
                            np.array([t.INS for t in transitions]), grid)
        self.next_phi_bg = grid.basis("bg", np.array([t.next_BG for t in transitions]))


def _max_next_q(frozen_alpha: np.ndarray, next_meal: np.ndarray, next_phi_bg: np.ndarray,
                action_phi: np.ndarray) -> np.ndarray:
    """``max_a Q_frozen(next_state, a)`` over the action grid, one value per row."""
    out = np.empty(len(next_meal))
    for m in np.unique(next_meal):
        rows = next_meal == m
        q = next_phi_bg[rows] @ frozen_alpha[m] @ action_phi.T
        out[rows] = q.max(axis=1)
    return out


def _apply_td(alpha_flat: np.ndarray, meal: np.ndarray, phi: np.ndarray,
              targets: np.ndarray, lr: float) -> tuple[np.ndarray, int]:
    """In-place summed TD step on ``alpha_flat`` (n_meals, B*B); returns (td errors, skipped)."""
    ok = np.isfinite(targets)
    skipped = int((~ok).sum())
    q = np.einsum("ij,ij->i", alpha_flat[meal], phi)
    td = np.where(ok, targets - q, 0.0)
    grad = td[:, None] * phi
    for m in np.unique(meal):
        alpha_flat[m] += lr * grad[meal == m].sum(axis=0)
    return td, skipped


def _check_skipped(skipped: int, n: int) -> None:
    if skipped:
        logger.warning("skipped %d of %d transitions with non-finite targets", skipped, n)
        if skipped > 0.01 * n:
            raise TrainingError(f"{skipped} of {n} targets non-finite")


def td_update(model: QModel, frozen: QModel, batch: Sequence[Transition], config: TrainConfig,
              lr: float | None = None) -> QModel:
    """One batched TD(0) step toward ``r + gamma * max_a Q_frozen(s', a)``.

    ``lr`` overrides ``config.learning_rate`` (the trainer passes its decayed
    rate here).  Returns a new model; only matrices of meal ids present in the
    batch change.
    """
    if not batch:
        raise ValueError("empty batch")
    if frozen.grid != model.grid or frozen.meal_ids != model.meal_ids:
        raise ValueError("frozen model does not match the online model")
    cols = _Arrays(batch, model)
    action_phi = model.grid.basis("ins", model.grid.action_grid(config.action_grid_size))
    with np.errstate(invalid="ignore", over="ignore"):
        targets = cols.reward + config.gamma * _max_next_q(
            frozen.alpha, cols.next_meal, cols.next_phi_bg, action_phi)
    new = model.copy()
    flat = new.alpha.reshape(len(new.meal_ids), -1)
    _, skipped = _apply_td(flat, cols.meal, cols.phi, targets,
                           config.learning_rate if lr is None else lr)
    _check_skipped(skipped, len(batch))
    return new


@dataclass
class TrainResult:
    model: QModel
    log: list[tuple[int, float]] = field(default_factory=list)


def train(dataset: Sequence[Transition], config: TrainConfig,
          grid: FeatureGrid = FeatureGrid(), meal_ids: Sequence[int] | None = None) -> TrainResult:
    """Fit Q coefficients on a fixed dataset by replayed TD updates.

    Step size at update ``k`` (1-based) is ``learning_rate / sqrt(k)``; the
    frozen coefficients are refreshed every ``freeze_period`` updates.  The
    log holds ``(update index, mean |TD error|)`` per 1000 updates.
    """
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} transitions, "
                         f"fewer than batch_size={config.batch_size}")
    if meal_ids is None:
        meal_ids = sorted({t.meal_id for t in dataset} | {t.next_meal_id for t in dataset})
    model = QModel.zeros(grid, meal_ids)
    memory = ReplayMemory(config.replay_capacity)
    memory.extend(dataset)
    cols = _Arrays(memory.items, model)
    action_phi = grid.basis("ins", grid.action_grid(config.action_grid_size))
    rng = np.random.default_rng(config.seed)
    flat = model.alpha.reshape(len(model.meal_ids), -1)
    frozen = flat.reshape(model.alpha.shape).copy()
    next_v = _max_next_q(frozen, cols.next_meal, cols.next_phi_bg, action_phi)
    log = []
    window = 0.0
    logger.info("training on %d transitions for %d updates", len(memory), config.total_updates)
    for k in range(1, config.total_updates + 1):
        idx = memory.sample_indices(rng, config.batch_size)
        targets = cols.reward[idx] + config.gamma * next_v[idx]
        td, skipped = _apply_td(flat, cols.meal[idx], cols.phi[idx], targets,
                                config.learning_rate / math.sqrt(k))
        _check_skipped(skipped, len(idx))
        window += float(np.abs(td).mean())
        if k % config.freeze_period == 0:
            if not np.all(np.isfinite(flat)) or np.abs(flat).mean() > 1e6:
                raise DivergenceError(f"coefficients diverged at update {k}")
            frozen = flat.reshape(model.alpha.shape).copy()
            next_v = _max_next_q(frozen, cols.next_meal, cols.next_phi_bg, action_phi)
        if k % 1000 == 0:
            log.append((k, window / 1000.0))
            window = 0.0
    if not np.all(np.isfinite(flat)) or np.abs(flat).mean() > 1e6:
        raise DivergenceError("coefficients diverged")
    return TrainResult(model, log)


# --------------------------------------------------------------------------
# model files

def save_model(model: QModel, path: str | Path) -> None:
    if not model.meal_ids:
        raise ValueError("refusing to save a model with no meal ids")
    g = model.grid
    lines = [
        f"B={g.B}",
        f"p={g.p!r}",
        f"bg_range={g.bg_range[0]!r},{g.bg_range[1]!r}",
        f"ins_range={g.ins_range[0]!r},{g.ins_range[1]!r}",
        "meal_ids=" + ",".join(str(m) for m in model.meal_ids),
        "meal_id,b,b_prime,alpha",
    ]
    for m, meal_id in enumerate(model.meal_ids):
        for b in range(g.B):
            for bp in range(g.B):
                lines.append(f"{meal_id},{b},{bp},{float(model.alpha[m, b, bp])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


_HEADER_KEYS = ("B", "p", "bg_range", "ins_range", "meal_ids")


def load_model(path: str | Path) -> QModel:
    text = Path(path).read_text()
    lines = text.splitlines()
    header = {}
    for lineno, key in enumerate(_HEADER_KEYS, start=1):
        if lineno > len(lines):
            raise ModelFormatError(f"missing header key {key!r}", lineno)
        name, sep, value = lines[lineno - 1].partition("=")
        if not sep or name != key:
            raise ModelFormatError(f"expected '{key}=...'", lineno)
        header[key] = value
    try:
        grid = FeatureGrid(B=int(header["B"]), p=float(header["p"]),
                           bg_range=tuple(float(v) for v in header["bg_range"].split(",")),
                           ins_range=tuple(float(v) for v in header["ins_range"].split(",")))
        meal_ids = tuple(int(v) for v in header["meal_ids"].split(",") if v.strip())
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad header: {exc}", len(_HEADER_KEYS)) from None
    if not meal_ids:
        raise ModelFormatError("empty meal id set", 5)
    col_line = len(_HEADER_KEYS) + 1
    if len(lines) < col_line or lines[col_line - 1] != "meal_id,b,b_prime,alpha":
        raise ModelFormatError("expected column header 'meal_id,b,b_prime,alpha'", col_line)
    B = grid.B
    alpha = np.full((len(meal_ids), B, B), np.nan)
    rows = lines[col_line:]
    expected = len(meal_ids) * B * B
    for offset, line in enumerate(rows):
        lineno = col_line + 1 + offset
        parts = line.split(",")
        if len(parts) != 4:
            raise ModelFormatError(f"expected 4 fields, got {len(parts)}", lineno)
        try:
            meal_id, b, bp, value = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
        except ValueError as exc:
            raise ModelFormatError(str(exc), lineno) from None
        if meal_id not in meal_ids or not (0 <= b < B and 0 <= bp < B):
            raise ModelFormatError(f"index out of range: {line}", lineno)
        alpha[meal_ids.index(meal_id), b, bp] = value
    if len(rows) != expected:
        raise ModelFormatError(f"expected {expected} coefficient rows, got {len(rows)}",
                               col_line + len(rows))
    if not np.all(np.isfinite(alpha)):
        raise ModelFormatError("missing or non-finite coefficients", col_line + len(rows))
    return QModel(grid, meal_ids, alpha)
