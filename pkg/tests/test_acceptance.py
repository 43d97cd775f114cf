"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from bolusrl.advisor import AdvisorParams, bolus_dose
from bolusrl.cli import dispatch
from bolusrl.config import load_config
from bolusrl.glucosim import (
    MealEvent,
    MealScenario,
    equilibrium_state,
    get_patient,
    run_scenario,
    uncovered_meal_peak,
)
from bolusrl.pipeline import (
    BIN_EDGES,
    BaselineAdvisor,
    evaluate_policy,
    generate_exploration_dataset,
    run_experiment,
)
from bolusrl.qlearn import FeatureGrid, TrainConfig, Transition, q_value, train
from bolusrl.riskmodel import risk_reward

from oracles import reference_meal_response, value_iteration

SCENARIO = MealScenario.default()


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp") / "run"
    start = time.perf_counter()
    bundle = run_experiment(load_config(None, {"output.dir": str(out)}))
    return bundle, time.perf_counter() - start


def test_c1_bolus_formula(criterion):
    rng = np.random.default_rng(11)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(1000):
        cho, bg = rng.uniform(0, 150), rng.uniform(20, 600)
        cir, cf = rng.uniform(3, 30), rng.uniform(0.4, 2.8)
        target = rng.uniform(80, 160)
        want = cho / cir + (bg - target) / cf if bg > target else cho / cir
        worst = max(worst, abs(bolus_dose(cho, bg, AdvisorParams(cir, cf, target)) - want))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1
    criterion(1, ok, f"max deviation {worst:.1e} over 1000 inputs, {elapsed:.2f}s")
    assert ok


def test_c2_reward_shape(criterion):
    grid = np.arange(10.0, 601.0)
    r = np.array([risk_reward(b) for b in grid])
    peak = int(np.argmax(r))
    unimodal = bool(np.all(np.diff(r[:peak + 1]) > 0) and np.all(np.diff(r[peak:]) < 0))
    at_ideal = risk_reward(112.5)
    lo, hi = abs(risk_reward(20.0)), abs(risk_reward(600.0))
    sym = abs(lo - hi) / max(lo, hi)
    ok = abs(at_ideal) <= 1e-6 and unimodal and sym <= 0.01
    criterion(2, ok, f"r(112.5)={at_ideal:.2e}, unimodal={unimodal}, "
                     f"|r(20)|={lo:.2f} |r(600)|={hi:.2f}")
    assert ok


def test_c3_rbf_overlap(criterion):
    grid = FeatureGrid(B=8, p=0.2)
    worst = 0.0
    for axis in ("bg", "ins"):
        centers = grid.centers(axis)
        phi = grid.basis(axis, centers)
        for k in range(7):
            worst = max(worst, abs(phi[k, k + 1] - 0.2), abs(phi[k + 1, k] - 0.2))
    ok = worst <= 1e-9
    criterion(3, ok, f"max |phi(neighbour center) - 0.2| = {worst:.1e}")
    assert ok


def test_c4_tabular_value_iteration(criterion):
    P = np.array([[1, 2], [2, 0], [0, 1]])
    R = np.array([[0.0, 1.0], [0.5, -1.0], [2.0, 0.0]])
    grid = FeatureGrid(B=2, p=1e-12, ins_range=(0.0, 10.0))
    doses = (0.0, 10.0)
    data = [Transition(s, 40.0, 0.0, doses[a], R[s, a], int(P[s, a]), 40.0)
            for s in range(3) for a in range(2)] * 10
    cfg = TrainConfig(gamma=0.9, learning_rate=0.5, batch_size=6, freeze_period=200,
                      total_updates=40_000, action_grid_size=2, seed=0)
    start = time.perf_counter()
    model = train(data, cfg, grid=grid).model
    elapsed = time.perf_counter() - start
    learned = np.array([[q_value(model, s, 40.0, doses[a]) for a in range(2)]
                        for s in range(3)])
    err = float(np.max(np.abs(learned - value_iteration(P, R, 0.9))))
    ok = err < 1e-2 and elapsed < 30
    criterion(4, ok, f"sup |Q - Q*| = {err:.2e}, {elapsed:.1f}s")
    assert ok


def test_c5_simulator_fidelity(criterion):
    start = time.perf_counter()
    parts, ok = [], True
    for pid in (1, 2, 3):
        p = get_patient(pid)
        fasting = run_scenario(p, MealScenario((MealEvent(0, 0.0, 0),)), lambda *a: 0.0, 2)
        drift = float(np.max(np.abs(fasting.BG - p.Gb)))
        policy = BaselineAdvisor(AdvisorParams(p.ref_CIR, p.ref_CF, 120.0),
                                 SCENARIO.cho_by_meal)
        coarse = run_scenario(p, SCENARIO, policy, 1, dt=3.0)
        fine = run_scenario(p, SCENARIO, policy, 1, dt=1.5)
        halving = float(np.max(np.abs(coarse.BG - fine.BG)))
        peak = uncovered_meal_peak(p, 50.0)
        ref_peak = float(reference_meal_response(p, equilibrium_state(p).as_array(),
                                                 50.0, 0.0, 720.0).max())
        good = (drift < 1 and halving < 0.5 and p.Gb + 30 < ref_peak < 300
                and abs(peak - ref_peak) < 0.05)
        ok &= good
        parts.append(f"#{pid}: drift {drift:.1e}, halving {halving:.3f}, peak {peak:.1f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30
    criterion(5, ok, "; ".join(parts) + f"; {elapsed:.1f}s")
    assert ok


def test_c6_dataset_scale(criterion):
    start = time.perf_counter()
    _, transitions = generate_exploration_dataset(get_patient(1), SCENARIO, 2920, seed=1)
    elapsed = time.perf_counter() - start
    ok = len(transitions) == 11680 and elapsed < 300
    criterion(6, ok, f"{len(transitions)} transitions from 2920 days, {elapsed:.1f}s")
    assert ok


def test_c7_end_to_end_direction(experiment, criterion):
    bundle, elapsed = experiment
    b, l = bundle.baseline, bundle.learned
    ok = (b.hypo_fraction >= 0.03 and l.hypo_fraction <= 0.5 * b.hypo_fraction
          and l.mean_reward >= b.mean_reward and elapsed < 600)
    criterion(7, ok, f"hypo {b.hypo_fraction:.3f} -> {l.hypo_fraction:.3f}, "
                     f"mean reward {b.mean_reward:.3f} -> {l.mean_reward:.3f}, "
                     f"{bundle.n_transitions} transitions, {elapsed:.0f}s")
    assert ok


def test_c8_dinner_dose(experiment, criterion):
    bundle, _ = experiment
    dinner = SCENARIO.meal_ids[-1]
    base = bundle.baseline.mean_dose_by_meal[dinner]
    learned = bundle.learned.mean_dose_by_meal[dinner]
    ok = learned < base
    criterion(8, ok, f"mean dinner dose {base:.2f} U baseline vs {learned:.2f} U learned")
    assert ok


def test_c9_determinism(experiment, criterion, capsys):
    bundle, elapsed = experiment
    first = bundle.out_dir
    second = first.parent / "rerun"
    code = dispatch(["run-experiment", "--out", str(second), "--quiet"])
    capsys.readouterr()
    a, b = tree_digest(first), tree_digest(second)
    ok = code == 0 and a == b and len(a) >= 9
    criterion(9, ok, f"{len(a)} files, identical={a == b}")
    assert ok


def test_c10_report_integrity(experiment, criterion):
    bundle, _ = experiment
    reports = [bundle.baseline, bundle.learned]
    for pid in (2, 3):
        p = get_patient(pid)
        policy = BaselineAdvisor(AdvisorParams(p.ref_CIR, p.ref_CF, 120.0),
                                 SCENARIO.cho_by_meal)
        reports.append(evaluate_policy(p, SCENARIO, policy, 45)[0])
    ok = True
    for rep in reports:
        below = sum(f for f, hi in zip(rep.bin_fractions, BIN_EDGES[1:]) if hi <= 70)
        ok &= abs(sum(rep.bin_fractions) - 1) <= 1e-9
        ok &= len(rep.profile_mean) == 480
        ok &= rep.hypo_fraction == pytest.approx(below, abs=1e-12)
    criterion(10, ok, f"{len(reports)} evaluations checked")
    assert ok
