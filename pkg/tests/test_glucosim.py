import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bolusrl.glucosim import (
    InvalidStateError,
    MealEvent,
    MealScenario,
    PatientConfigError,
    PolicyOutputError,
    SimState,
    VirtualPatient,
    equilibrium_state,
    get_patient,
    integrate_step,
    load_patients,
    ode_derivatives,
    run_scenario,
    simulate_batch,
    uncovered_meal_peak,
)
from bolusrl.advisor import AdvisorParams
from bolusrl.pipeline import BaselineAdvisor

from oracles import reference_meal_response, surrogate_rhs


def zero_policy(meal_id, bg):
    return 0.0


def ref_advisor(patient, scenario):
    return BaselineAdvisor(AdvisorParams(patient.ref_CIR, patient.ref_CF, 120.0),
                           scenario.cho_by_meal)


# -- derivatives ------------------------------------------------------------

def test_fixed_point(adult1):
    d = ode_derivatives(equilibrium_state(adult1), adult1, 0.0, 0.0)
    assert np.all(np.abs(d) < 1e-9)


def test_gut_content_raises_glucose(adult1):
    s = dataclasses.replace(equilibrium_state(adult1), Q2=10000.0)
    assert ode_derivatives(s, adult1, 0.0, 0.0)[0] > 0


def test_insulin_excess_drives_action(adult1):
    s = dataclasses.replace(equilibrium_state(adult1), I=adult1.Ib + 10)
    assert ode_derivatives(s, adult1, 0.0, 0.0)[1] == pytest.approx(10 * adult1.p3, rel=1e-12)


def test_derivatives_match_independent_rhs(adult1):
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.uniform([20, -0.01, 0, 0, 0, 0, 0], [500, 0.05, 80, 6e4, 6e4, 2e4, 2e4])
        state = SimState(*y)
        bolus, cho = rng.uniform(0, 5000), rng.uniform(0, 20000)
        got = ode_derivatives(state, adult1, bolus, cho)
        want = surrogate_rhs(adult1, y, adult1.basal_rate * 1000 / 60 + bolus, cho)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_non_finite_state_rejected(adult1):
    with pytest.raises(InvalidStateError):
        ode_derivatives(dataclasses.replace(equilibrium_state(adult1), G=float("nan")),
                        adult1, 0, 0)


# -- stepping ---------------------------------------------------------------

def test_integrate_step_preserves_fixed_point(adult1):
    s0 = equilibrium_state(adult1)
    s1 = integrate_step(s0, adult1, (0.0, 0.0), 3.0)
    np.testing.assert_allclose(s1.as_array(), s0.as_array(), atol=1e-6)
    assert s1.t == 3.0


def test_integrate_step_clamps(adult1):
    s = dataclasses.replace(equilibrium_state(adult1), G=12.0, X=0.5)
    out = integrate_step(s, adult1, (0.0, 0.0), 3.0)
    assert out.G == 10.0
    with pytest.raises(ValueError):
        integrate_step(s, adult1, (0.0, 0.0), 0.0)


def test_uncovered_meal_against_fine_reference(adult1):
    y = equilibrium_state(adult1)
    state = y
    g = [state.G]
    for k in range(240):
        state = integrate_step(state, adult1, (0.0, 50.0) if k == 0 else (0.0, 0.0), 3.0)
        g.append(state.G)
    ref = reference_meal_response(adult1, y.as_array(), 50.0, 0.0, 241 * 3.0)
    assert max(g) > adult1.Gb + 30
    assert max(ref) > adult1.Gb + 30
    assert np.max(np.abs(np.array(g) - ref[:len(g)])) < 0.05


@pytest.mark.parametrize("pid", [1, 2, 3])
def test_default_patients_meal_peak(pid):
    p = get_patient(pid)
    peak = uncovered_meal_peak(p, 50.0)
    ref = reference_meal_response(p, equilibrium_state(p).as_array(), 50.0, 0.0, 720.0)
    assert abs(peak - ref.max()) < 0.05
    assert p.Gb + 30 < peak < 300


def test_step_halving_over_a_day(adult1, scenario):
    policy = ref_advisor(adult1, scenario)
    coarse = run_scenario(adult1, scenario, policy, 1, dt=3.0)
    fine = run_scenario(adult1, scenario, policy, 1, dt=1.5)
    assert np.max(np.abs(coarse.BG - fine.BG)) < 0.5


def test_rk4_order(adult1):
    # smooth regime: loaded compartments, no impulses, nothing near the clamps
    start = dataclasses.replace(equilibrium_state(adult1), G=180.0, Q1=30000.0, Q2=10000.0,
                                S1=adult1.basal_rate * 1000 + 4000, I=25.0)
    sc = MealScenario((MealEvent(0, 0.0, 0),))
    runs = {dt: run_scenario(adult1, sc, zero_policy, 1, dt=dt, initial=start).BG
            for dt in (3.0, 1.5, 0.75)}
    e1 = np.max(np.abs(runs[3.0] - runs[1.5]))
    e2 = np.max(np.abs(runs[1.5] - runs[0.75]))
    assert runs[3.0].min() > 10 and runs[3.0].max() < 600
    assert e1 / e2 >= 8


# -- scenarios --------------------------------------------------------------

def test_equilibrium_is_stationary_for_two_days(adult1):
    sc = MealScenario((MealEvent(360, 0.0, 0),))
    traj = run_scenario(adult1, sc, zero_policy, 2)
    assert np.max(np.abs(traj.BG - adult1.Gb)) < 1.0


def test_single_meal_day(adult1):
    sc = MealScenario((MealEvent(480, 40.0, 0),))
    traj = run_scenario(adult1, sc, zero_policy, 1)
    assert traj.T == 480
    assert int((traj.CHO > 0).sum()) == 1
    assert np.array_equal(traj.t, np.arange(480) * 3.0)
    assert len(traj.records) == 480 and traj.records[160].CHO == 40.0


def test_baseline_run_counts(adult1, scenario):
    traj = run_scenario(adult1, scenario, ref_advisor(adult1, scenario), 45)
    assert traj.T == 45 * 480
    assert int((traj.INS > 0).sum()) == 180


def test_deterministic(adult1, scenario):
    a = run_scenario(adult1, scenario, ref_advisor(adult1, scenario), 3, seed=11)
    b = run_scenario(adult1, scenario, ref_advisor(adult1, scenario), 3, seed=11)
    assert a == b
    assert a.BG.tobytes() == b.BG.tobytes()


def test_noise_is_seeded(adult1, scenario):
    a = run_scenario(adult1, scenario, zero_policy, 1, seed=1, noise_cv=0.05)
    b = run_scenario(adult1, scenario, zero_policy, 1, seed=1, noise_cv=0.05)
    c = run_scenario(adult1, scenario, zero_policy, 1, seed=2, noise_cv=0.05)
    clean = run_scenario(adult1, scenario, zero_policy, 1, seed=1)
    assert a == b
    assert not np.array_equal(a.BG, c.BG)
    assert not np.array_equal(a.BG, clean.BG)


@pytest.mark.parametrize("dose", [-1.0, float("nan"), float("inf")])
def test_bad_policy_output(adult1, scenario, dose):
    with pytest.raises(PolicyOutputError):
        run_scenario(adult1, scenario, lambda m, bg: dose, 1)


def test_batch_rows_match_single_runs(adult1, scenario):
    doses = np.array([0.0, 2.0, 7.5])
    bg, ins, look = simulate_batch(adult1, scenario, lambda m, b: doses, 3, 2)
    for r, d in enumerate(doses):
        single = run_scenario(adult1, scenario, lambda m, b, d=d: float(d), 2)
        assert np.array_equal(bg[r], single.BG)
        assert np.array_equal(look[r], single.lookahead_BG)


def test_monotone_insulin_response(adult1):
    sc = MealScenario((MealEvent(360, 60.0, 0),))
    low = run_scenario(adult1, sc, lambda m, bg: 2.0, 1)
    high = run_scenario(adult1, sc, lambda m, bg: 5.0, 1)
    after = slice(120, None)
    assert np.all(high.BG[after] <= low.BG[after] + 1e-12)
    assert np.any(high.BG[after] < low.BG[after] - 1.0)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(0, 60), min_size=4, max_size=4))
def test_compartments_stay_nonnegative(doses):
    p = get_patient(1)
    state = equilibrium_state(p)
    sc = MealScenario.default()
    for k in range(4 * 160):
        meal = k // 160
        inputs = (doses[meal], sc.events[meal].grams) if k % 160 == 0 else (0.0, 0.0)
        state = integrate_step(state, p, inputs)
        y = state.as_array()
        assert np.all(y[2:] >= 0)
        assert 10 <= y[0] <= 600


# -- patients / scenarios ---------------------------------------------------

def test_presets_load():
    patients = load_patients()
    assert sorted(patients) == [1, 2, 3]
    params = [patients[i].params_array().tolist() for i in (1, 2, 3)]
    assert len({tuple(p) for p in params}) == 3
    for p in patients.values():
        assert p.Gb == 120.0
        assert p.basal_rate == pytest.approx(p.n * p.Ib * p.V_I * 0.06, rel=1e-12)


def test_preset_file_validation(tmp_path):
    bad = tmp_path / "p.ini"
    bad.write_text("[adult#1]\nid = 1\nGb = 120\n")
    with pytest.raises(PatientConfigError):
        load_patients(bad)
    with pytest.raises(PatientConfigError):
        get_patient(42)


def test_patient_invariants(adult1):
    good = dataclasses.asdict(adult1)
    for change in ({"f_bio": 0.0}, {"f_bio": 1.2}, {"Gb": 200.0}, {"p2": -1.0},
                   {"basal_rate": adult1.basal_rate * 1.1}):
        with pytest.raises(PatientConfigError):
            VirtualPatient(**{**good, **change})


def test_scenario_rules():
    sc = MealScenario.default()
    assert [(e.time_of_day, e.grams, e.meal_id) for e in sc.events] == [
        (360, 50, 0), (720, 60, 1), (900, 15, 2), (1200, 80, 3)]
    assert MealScenario.parse(sc.format()) == sc
    with pytest.raises(ValueError):
        MealScenario(())
    with pytest.raises(ValueError):
        MealScenario((MealEvent(720, 10, 0), MealEvent(360, 10, 1)))
    with pytest.raises(ValueError):
        MealEvent(1440, 10, 0)


def test_trajectory_csv(tmp_path, adult1, scenario):
    traj = run_scenario(adult1, scenario, zero_policy, 1)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_min,BG,CHO,INS"
    assert len(lines) == 481
    assert lines[121].startswith("360,") and lines[121].split(",")[2] == "50.0"
