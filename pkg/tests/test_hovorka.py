import numpy as np
import pandas as pd
import pytest
from scipy.integrate import simpson

from src.simulation.hovorka import (
    D1, D2, S1, S2, Q1,
    HovorkaParams,
    InputSchedule,
    NoEquilibriumError,
    NonFiniteStateError,
    anchored_state,
    derivatives,
    find_equilibrium,
    glucose_mgdl,
    gut_flux,
    integrate,
    predict_next,
    predict_windows,
    step_segment,
    theoretical_activity_curves,
)


@pytest.fixture(scope="module")
def params():
    return HovorkaParams(weight_kg=70.0)


@pytest.fixture(scope="module")
def equilibrium(params):
    return find_equilibrium(params, 120.0)


def constant_schedule(basal, n, bolus=None, carbs=None):
    bolus = np.zeros(n) if bolus is None else bolus
    carbs = np.zeros(n) if carbs is None else carbs
    return InputSchedule(basal=np.full(np.shape(bolus), basal), bolus=bolus, carbs=carbs)


def test_parameter_file_matches_defaults():
    assert HovorkaParams.from_json(weight_kg=70.0) == HovorkaParams(weight_kg=70.0)


def test_parameters_must_be_positive():
    with pytest.raises(ValueError):
        HovorkaParams(k_e=0.0)
    with pytest.raises(ValueError):
        HovorkaParams(A_G=1.5)


def test_equilibrium_holds_target(params, equilibrium):
    state, basal = equilibrium
    assert glucose_mgdl(state, params) == pytest.approx(120.0, abs=0.01)
    np.testing.assert_allclose(derivatives(state, params, insulin_rate=basal / 60.0), 0.0, atol=1e-8)


def test_equilibrium_basal_regression(equilibrium):
    _, basal = equilibrium
    assert 0.0 < basal < 3.0
    assert basal == pytest.approx(0.377, abs=0.01)


def test_equilibrium_target_out_of_range(params):
    with pytest.raises(ValueError):
        find_equilibrium(params, 60.0)


def test_no_equilibrium_when_insulin_is_inert():
    inert = HovorkaParams(S_IT=1e-6, S_ID=1e-6, S_IE=1e-6)
    with pytest.raises(NoEquilibriumError):
        find_equilibrium(inert, 120.0)


def test_equilibrium_drift_over_48h(params, equilibrium):
    state, basal = equilibrium
    n = 48 * 12
    trajectory = integrate(state, params, constant_schedule(basal, n))
    assert np.max(np.abs(trajectory.glucose - 120.0)) < 1.0


def test_carb_impulse_raises_second_gut_compartment(params, equilibrium):
    state = equilibrium[0].copy()
    state[D1] = 50.0
    assert derivatives(state, params)[D2] > 0


def test_gut_flux_peaks_at_40_min(params, equilibrium):
    state, basal = equilibrium
    carbs = np.zeros(48)
    carbs[0] = 50.0
    trajectory = integrate(state, params, constant_schedule(basal, 48, carbs=carbs))
    peak = trajectory.times[np.argmax(gut_flux(trajectory.states, params))]
    assert abs(peak - 40.0) <= 2.5


def test_subcutaneous_insulin_peaks_at_55_min(params, equilibrium):
    state, basal = equilibrium
    bolus = np.zeros(48)
    bolus[0] = 1.0
    batch = np.stack([state, state])
    schedule = InputSchedule(basal=np.full((2, 48), basal),
                             bolus=np.stack([np.zeros(48), bolus]), carbs=np.zeros((2, 48)))
    trajectory = integrate(batch, params, schedule)
    excess = trajectory.states[:, 1, S2] - trajectory.states[:, 0, S2]
    peak = trajectory.times[np.argmax(excess)]
    assert abs(peak - 55.0) <= 2.5


def test_derivatives_match_finite_differences(params, equilibrium):
    state, basal = equilibrium
    carbs = np.zeros(6)
    carbs[0] = 50.0
    bolus = np.zeros(6)
    bolus[0] = 3.0
    # off-equilibrium state 30 min after a bolused meal
    start = integrate(state, params, constant_schedule(basal, 6, bolus=bolus, carbs=carbs)).states[-1]
    h = 1e-3
    s1, _ = step_segment(start, params, h, step=h, basal=basal)
    s2, _ = step_segment(s1, params, h, step=h, basal=basal)
    numeric = (-3 * start + 4 * s1 - s2) / (2 * h)
    analytic = derivatives(start, params, insulin_rate=basal / 60.0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_step_halving_converges(params, equilibrium):
    state, basal = equilibrium
    n = 24 * 12
    carbs = np.zeros(n)
    bolus = np.zeros(n)
    for slot, grams in [(24, 60.0), (96, 40.0), (168, 80.0)]:
        carbs[slot] = grams
        bolus[slot] = grams / 12.0
    schedule = constant_schedule(basal, n, bolus=bolus, carbs=carbs)
    coarse = integrate(state, params, schedule, step=1.0)
    fine = integrate(state, params, schedule, step=0.5)
    assert np.max(np.abs(coarse.glucose - fine.glucose)) < 0.1


def test_carb_mass_balance(params, equilibrium):
    state, basal = equilibrium
    n = 12 * 12
    carbs = np.zeros(n)
    carbs[0] = 50.0
    trajectory = integrate(state, params, constant_schedule(basal, n, carbs=carbs))
    absorbed = simpson(gut_flux(trajectory.states, params), x=trajectory.times)
    assert absorbed == pytest.approx(params.A_G * 50.0, rel=0.01)


def test_insulin_mass_balance(params, equilibrium):
    state, basal = equilibrium
    n = 12 * 12
    bolus = np.zeros(n)
    bolus[0] = 4.0
    schedule = InputSchedule(basal=np.full((2, n), basal),
                             bolus=np.stack([np.zeros(n), bolus]), carbs=np.zeros((2, n)))
    trajectory = integrate(np.stack([state, state]), params, schedule)
    flux = (trajectory.states[:, 1, S2] - trajectory.states[:, 0, S2]) / params.t_maxI
    assert simpson(flux, x=trajectory.times) == pytest.approx(4.0, rel=0.01)


def test_larger_bolus_lowers_glucose(params, equilibrium):
    state, basal = equilibrium
    n = 24
    carbs = np.zeros(n)
    carbs[0] = 60.0
    small = np.zeros(n)
    small[0] = 3.0
    large = np.zeros(n)
    large[0] = 6.0
    schedule = InputSchedule(basal=np.full((2, n), basal), bolus=np.stack([small, large]),
                             carbs=np.stack([carbs, carbs]))
    trajectory = integrate(np.stack([state, state]), params, schedule)
    assert trajectory.glucose[-1, 1] < trajectory.glucose[-1, 0]


def test_states_stay_non_negative_on_random_inputs(params, equilibrium):
    state, _ = equilibrium
    rng = np.random.default_rng(0)
    n = 12 * 12
    batch = 8
    schedule = InputSchedule(
        basal=rng.uniform(0.0, 1.0, size=(batch, n)),
        bolus=np.where(rng.random((batch, n)) < 0.01, rng.uniform(0, 4, (batch, n)), 0.0),
        carbs=np.where(rng.random((batch, n)) < 0.02, rng.uniform(0, 80, (batch, n)), 0.0),
    )
    trajectory = integrate(np.repeat(state[None, :], batch, axis=0), params, schedule)
    assert np.all(trajectory.states >= 0)
    total_steps = trajectory.states.size * 5
    assert trajectory.n_clamped < 0.001 * total_steps


def test_non_finite_state_raises(params, equilibrium):
    state = equilibrium[0].copy()
    state[Q1] = np.nan
    with pytest.raises(NonFiniteStateError):
        integrate(state, params, constant_schedule(0.5, 2))


def test_integrate_rejects_large_step(params, equilibrium):
    with pytest.raises(ValueError):
        integrate(equilibrium[0], params, constant_schedule(0.5, 2), step=10.0)


def test_schedule_from_frame_holds_basal_and_sums_impulses():
    df = pd.DataFrame({
        "time_min": [0, 7, 8, 20],
        "basal": [1.0, 1.0, 1.0, 0.5],
        "bolus": [0.0, 1.5, 2.0, 0.0],
        "carbs": [0.0, 30.0, 0.0, 0.0],
    })
    schedule = InputSchedule.from_frame(df, duration_min=30)
    assert schedule.n_segments == 6
    np.testing.assert_allclose(schedule.basal, [1.0, 1.0, 1.0, 1.0, 0.5, 0.5])
    assert schedule.bolus[1] == pytest.approx(3.5)
    assert schedule.carbs[1] == pytest.approx(30.0)


def test_theoretical_curves(params):
    carb, insulin = theoretical_activity_curves(params, normalize=False)
    assert len(carb.offsets) == 49
    assert carb.offsets[0] == 0 and carb.offsets[-1] == 240
    assert carb.offsets[np.argmax(carb.mean)] == 40
    assert carb.mean[0] == 0.0
    assert np.all(insulin.mean <= 0)

    carb_z, insulin_z = theoretical_activity_curves(params)
    assert carb_z.mean.mean() == pytest.approx(0.0, abs=1e-9)
    assert carb_z.mean.std() == pytest.approx(1.0)
    assert np.argmax(carb_z.mean) == np.argmax(carb.mean)
    assert np.argmin(insulin_z.mean) == np.argmin(insulin.mean)


def window_frame(glucose, basal, bolus=None, carbs=None):
    n = 48
    return pd.DataFrame({
        "glucose": np.full(n, glucose),
        "basal": np.full(n, basal),
        "bolus": np.zeros(n) if bolus is None else bolus,
        "carbs": np.zeros(n) if carbs is None else carbs,
    })


def test_predict_next_steady_state(params, equilibrium):
    _, basal = equilibrium
    assert predict_next(window_frame(120.0, basal), params) == pytest.approx(120.0, abs=1.0)


def test_predict_next_unbolused_meal_raises_glucose(params, equilibrium):
    _, basal = equilibrium
    carbs = np.zeros(48)
    carbs[42] = 50.0
    assert predict_next(window_frame(120.0, basal, carbs=carbs), params) > 120.0


def test_predict_next_wrong_length(params):
    with pytest.raises(ValueError):
        predict_next(window_frame(120.0, 0.4).iloc[:10], params)


def test_predict_windows_matches_fine_step_oracle(params, equilibrium):
    _, basal = equilibrium
    rng = np.random.default_rng(3)
    bolus = np.zeros((1, 48))
    carbs = np.zeros((1, 48))
    carbs[0, 10] = 45.0
    bolus[0, 10] = 3.0
    carbs[0, 36] = 20.0
    basal_row = rng.uniform(0.2, 1.2, size=(1, 48))
    coarse = predict_windows([140.0], basal_row, bolus, carbs, params, step=1.0)
    fine = predict_windows([140.0], basal_row, bolus, carbs, params, step=0.1)
    assert abs(coarse[0] - fine[0]) < 0.5


def test_anchored_state_reads_observed_glucose(params):
    for g in (60.0, 120.0, 250.0):
        assert glucose_mgdl(anchored_state(params, g), params) == pytest.approx(g)
