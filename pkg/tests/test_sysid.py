from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coarsesort.errors import InvalidInputError
from coarsesort.plant import ChirpSpec, DatasetLog, Replay, collect_dataset
from coarsesort.sysid import (
    LstmPredictor,
    PlantOracle,
    PredictorConfig,
    cell_forward,
    evaluate_predictor,
    gradcheck_window,
    gradient_check_recurrent,
    init_predictor,
    predict_step,
    rollout,
    train_predictor,
    window_loss_and_grads,
)

SMALL = PredictorConfig(hidden_size=8, window_len=32, stride=16, burn_in=4, batch=16, epochs=3)


@pytest.fixture(scope="module")
def short_log(params):
    return collect_dataset(params, ChirpSpec(amp_end=0.6, duration=20.0), 20.0, seed=4)


@pytest.fixture(scope="module")
def small_model(short_log):
    return train_predictor(short_log, SMALL)


def test_zero_weight_model_outputs_target_mean():
    m = init_predictor(8, target_mean=0.37, target_std=2.0)
    m = m.with_params({k: np.zeros_like(v) for k, v in m.params().items()})
    v, _ = predict_step(m, None, np.array([0.1, 1500.0, 30.0, 0.2]))
    assert v == 0.37


def test_predict_step_rejects_bad_input(small_model):
    with pytest.raises(InvalidInputError):
        predict_step(small_model, None, np.array([0.0, np.nan, 20.0, 0.0]))
    with pytest.raises(InvalidInputError):
        predict_step(small_model, None, np.zeros(3))


def test_hidden_state_converges_on_constant_input(predictor):
    x = np.array([0.1, 1500.0, 40.0, 0.3])
    hidden = None
    for _ in range(1000):
        prev = hidden
        _, hidden = predict_step(predictor, hidden, x)
    delta = np.linalg.norm(np.r_[hidden[0] - prev[0], hidden[1] - prev[1]])
    assert delta < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(float, (20, 4), elements=st.floats(-1e3, 1e3)))
def test_hidden_bounded(X):
    m = init_predictor(6, seed=1)
    p = m.params()
    h, c = m.init_state()
    for x in X:
        h, c, _ = cell_forward(p, x, h, c)
        assert np.all(np.abs(h) <= 1.0) and np.all(np.isfinite(c))


def test_teacher_forcing_equals_sequential_steps(small_model, short_log):
    n = 200
    r = rollout(small_model, short_log.u[:n], short_log.s[0], short_log.dt, short_log.rpm[:n],
                short_log.T[:n], mode="teacher", sensor=short_log.s[:n])
    hidden = None
    for k in range(n):
        v, hidden = predict_step(small_model, hidden, (short_log.s[k], short_log.rpm[k], short_log.T[k], short_log.u[k]))
        assert v == r.velocity[k]


def test_teacher_forced_error_not_above_free_running(predictor, training_logs):
    rms = lambda e: float(np.sqrt(np.mean(e**2)))
    for log in training_logs:
        n = len(log) - 1
        teacher = rollout(predictor, log.u[:n], log.s[0], log.dt, log.rpm[:n], log.T[:n],
                          mode="teacher", sensor=log.s)
        free = rollout(predictor, log.u[:n], log.s[0], log.dt, log.rpm[:n], log.T[:n], mode="free")
        actual = log.sensor_vel[1:]
        assert rms(teacher.velocity - actual) <= rms(free.velocity - actual)
    with pytest.raises(InvalidInputError):
        rollout(predictor, log.u[:n], 0.0, 0.01, 1500.0, 20.0, mode="teacher")


def test_training_deterministic(short_log, small_model):
    again = train_predictor(short_log, SMALL)
    for k, v in small_model.params().items():
        assert np.array_equal(v, again.params()[k])
    assert small_model.loss_history == again.loss_history


def test_constant_velocity_log_fits(params):
    log = collect_dataset(params, Replay((0.0,) * 300), 3.0)
    m = train_predictor(log, SMALL)
    assert evaluate_predictor(m, log).rmse < 1e-6


def test_short_log_and_window_errors(params):
    log = collect_dataset(params, Replay((0.0,) * 20), 0.2)
    with pytest.raises(InvalidInputError, match="shorter"):
        train_predictor(log, SMALL)
    with pytest.raises(InvalidInputError):
        PredictorConfig(window_len=1, burn_in=0)


def test_input_rescaling_gives_identical_losses(short_log):
    data = short_log.data.copy()
    cols = [7, 8, 1]  # s, T, u in log column order
    data[:, cols] = data[:, cols] * np.array([3.0, 0.5, 2.0]) + np.array([1.0, 10.0, 0.5])
    scaled = DatasetLog(data, short_log.dt, short_log.params)
    a = train_predictor(short_log, replace(SMALL, epochs=2))
    b = train_predictor(scaled, replace(SMALL, epochs=2))
    np.testing.assert_allclose(a.loss_history, b.loss_history, rtol=1e-6)


def test_plant_oracle_is_exact(params):
    p = replace(params, sensor_noise_std=0.0)
    log = collect_dataset(p, ChirpSpec(duration=10.0), 10.0, safety=False)
    rep = evaluate_predictor(PlantOracle(p), log)
    assert rep.max_abs_error < 1e-9


def test_eval_report_outputs(small_model, short_log, tmp_path):
    rep = evaluate_predictor(small_model, short_log)
    assert rep.max_abs_error >= rep.rmse >= 0
    assert len(rep.predicted) == len(rep.actual) == rep.n_steps == len(short_log) - 1
    rep.save(tmp_path)
    assert (tmp_path / "series.csv").read_text().splitlines()[0] == "t,predicted,actual,error"


def test_model_json_roundtrip(small_model, short_log, tmp_path):
    small_model.save(tmp_path / "p.json")
    back = LstmPredictor.load(tmp_path / "p.json")
    np.testing.assert_array_equal(evaluate_predictor(back, short_log).predicted,
                                  evaluate_predictor(small_model, short_log).predicted)


def _forget_mutant(params, X, Y):
    grads = window_loss_and_grads(params, X, Y)[1]
    H = params["W_h"].shape[0]
    for name in ("W_x", "W_h", "b"):
        grads[name][..., H : 2 * H] *= 1.1
    return grads


def test_recurrent_gradient_check(small_model, short_log):
    X, Y = gradcheck_window(small_model, short_log, 300, 24)
    rep = gradient_check_recurrent(small_model, X, Y, n_params=100)
    assert rep.passed and rep.n_checked >= 100 and rep.max_rel_error <= 1e-4
    bad = gradient_check_recurrent(small_model, X, Y, n_params=100, gradient_fn=_forget_mutant)
    assert bad.per_gate["forget"] > 1e-2 and not bad.passed
    with pytest.raises(InvalidInputError):
        gradient_check_recurrent(small_model, X[:1], Y[:1])
