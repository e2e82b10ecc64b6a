import numpy as np
import pytest

from helpers import gradient_check, velocity_cost_oracle
from stgnn_lab.flocking import FlockConfig, generate_dataset
from stgnn_lab.graph_core import make_rng
from stgnn_lab.spacetime import TimeShiftOperator
from stgnn_lab.stgf import apply_generalized_stgf, apply_stgf, diffusion_terms
from stgnn_lab.stgnn import ModelConfig, generalized_model_forward, init_model
from stgnn_lab.training import (
    AdamState, GraphMode, TrainConfig, TrainingDivergence, adam_step, generalized_stgf_backward,
    load_train_state, mse_loss, save_train_state, stgf_backward, train, validation_cost,
)

CIRC = TimeShiftOperator(mode="circulant")
DELAY = TimeShiftOperator(mode="zero_pad_delay")


def sym(rng, n):
    m = rng.standard_normal((n, n)) / np.sqrt(n)
    return m + m.T


def fd_filter(x, seq, tso, h, w, eps=1e-6):
    """Central differences of <W, Y> in the taps and the input."""
    def loss(xx, hh):
        return float(np.sum(w * apply_generalized_stgf(xx, seq, tso, hh)))
    gh = np.zeros_like(h)
    for k in range(h.size):
        up, dn = h.copy(), h.copy()
        up[k] += eps
        dn[k] -= eps
        gh[k] = (loss(x, up) - loss(x, dn)) / (2 * eps)
    gx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += eps
        dn[idx] -= eps
        gx[idx] = (loss(up, h) - loss(dn, h)) / (2 * eps)
    return gh, gx


@pytest.mark.parametrize("tso", [CIRC, DELAY])
def test_filter_backward_matches_finite_differences(tso):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 2))
    seq = [sym(rng, 4) for _ in range(3)]
    h = rng.standard_normal(4)
    w = rng.standard_normal(x.shape)
    gh, gx = generalized_stgf_backward(w, diffusion_terms(x, seq, tso), seq, tso, h)
    fh, fx = fd_filter(x, seq, tso, h, w)
    np.testing.assert_allclose(gh, fh, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gx, fx, rtol=1e-5, atol=1e-8)


def test_filter_backward_special_cases():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 1))
    s = sym(rng, 3)
    h = np.array([0.5, 1.0, -2.0])
    terms = diffusion_terms(x, [s, s], CIRC)
    gh, gx = stgf_backward(np.zeros_like(x), terms, s, CIRC, h)
    assert not gh.any() and not gx.any()
    up = rng.standard_normal(x.shape)
    gh, gx = stgf_backward(up, [x], s, CIRC, [1.5])
    assert gh[0] == pytest.approx(np.sum(up * x))
    np.testing.assert_allclose(gx, 1.5 * up)
    a = stgf_backward(up, terms, s, CIRC, h)
    b = generalized_stgf_backward(up, terms, [s, s], CIRC, h)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        stgf_backward(up, None, s, CIRC, h)


def test_input_gradient_is_transposed_chain():
    # dL/dX = sum_k h_k S_1^T ... S_k^T W (C^T)^k
    rng = np.random.default_rng(2)
    n, t = 4, 5
    seq = [sym(rng, n) + rng.standard_normal((n, n)) for _ in range(2)]
    h = rng.standard_normal(3)
    x = rng.standard_normal((n, t, 1))
    w = rng.standard_normal((n, t, 1))
    c = CIRC.matrix(t)
    oracle = h[0] * w[:, :, 0]
    oracle = oracle + h[1] * seq[0].T @ w[:, :, 0] @ c.T
    oracle = oracle + h[2] * seq[0].T @ seq[1].T @ w[:, :, 0] @ np.linalg.matrix_power(c.T, 2)
    _, gx = generalized_stgf_backward(w, diffusion_terms(x, seq, CIRC), seq, CIRC, h)
    np.testing.assert_allclose(gx[:, :, 0], oracle, atol=1e-12)


def test_tap_gradient_is_inner_product_with_terms():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 4, 2))
    s = sym(rng, 3)
    w = rng.standard_normal(x.shape)
    terms = diffusion_terms(x, [s, s], DELAY)
    gh, _ = stgf_backward(w, terms, s, DELAY, [1.0, 2.0, 3.0])
    for k in range(3):
        assert gh[k] == pytest.approx(np.sum(w * apply_stgf(x, s, DELAY, np.eye(3)[k])))


@pytest.mark.parametrize("generalized", [False, True])
@pytest.mark.parametrize("kind", ["tanh", "identity"])
def test_model_gradients_match_finite_differences(generalized, kind):
    rng = np.random.default_rng(4)
    n, t = 5, 6
    cfg = ModelConfig(layers=2, features=8, order=3, nonlinearity=kind, input_features=4, readout_features=2)
    model = init_model(cfg, rng)
    x = rng.standard_normal((n, t, 4))
    if generalized:
        seq = [np.stack([sym(rng, n) for _ in range(t)]) for _ in range(3)]
    else:
        seq = [sym(rng, n)] * 3
    worst = gradient_check(model, x, seq, DELAY, rng, coords=100)
    assert set(worst) == {"layer0.taps", "layer1.taps", "readout.weight", "readout.bias", "input"}
    assert max(worst.values()) <= 1e-5, worst


def test_mse_loss():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 4, 2))
    assert mse_loss(a, a)[0] == 0.0
    assert mse_loss(a + 1.0, a)[0] == pytest.approx(1.0)
    b = rng.standard_normal(a.shape)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    loss, grad = mse_loss(a, b)
    assert loss == pytest.approx(total / a.size, rel=1e-12)
    np.testing.assert_allclose(grad, 2 * (a - b) / a.size)
    with pytest.raises(ValueError):
        mse_loss(a, b[:, :3])


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_learning_rate():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = {"w": np.array([1.0, 1.0])}
    state = AdamState(learning_rate=5e-4)
    adam_step(state, p, {"w": np.array([3.0, -0.2])})
    np.testing.assert_allclose(p["w"], [1.0 - 5e-4 * 3 / (3 + 1e-8), 1.0 + 5e-4 * 0.2 / (0.2 + 1e-8)], rtol=1e-15)
    assert state.step == 1 and state.first_moment["w"].shape == (2,)


def test_adam_decreases_quadratic():
    p = {"w": np.array([2.0])}
    state = AdamState(learning_rate=0.1)
    losses = []
    for _ in range(2):
        losses.append(float(p["w"][0] ** 2))
        adam_step(state, p, {"w": 2 * p["w"]})
    assert p["w"][0] ** 2 < losses[1] < losses[0]


def test_validation_cost_examples():
    v = np.ones((5, 3, 2)) * [0.3, -1.0]
    assert validation_cost(v) == 0.0
    w = np.array([0.5, -2.0])
    pair = np.stack([np.stack([w, -w])] * 7)
    assert validation_cost(pair) == pytest.approx(2 * 7 * np.sum(w**2))
    rng = np.random.default_rng(6)
    r = rng.standard_normal((6, 4, 2))
    assert validation_cost(r) == pytest.approx(velocity_cost_oracle(r), rel=1e-12)
    assert validation_cost(r + [5.0, -3.0]) == pytest.approx(validation_cost(r), rel=1e-10)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(FlockConfig(agent_count=6, horizon=20, seed=2), (2, 1, 1))


def test_epochs_zero_returns_initial_model(tiny_dataset):
    model = init_model(ModelConfig(features=4, order=2), make_rng(0))
    best, report = train(model, tiny_dataset, TrainConfig(epochs=0))
    assert best is model and report.rows == []


def test_overfit_two_examples():
    # targets from a teacher of the same architecture, so zero loss is reachable
    ds = generate_dataset(FlockConfig(agent_count=6, horizon=20, seed=3), (2, 0, 0))
    teacher = init_model(ModelConfig(features=8, order=2), make_rng(9))
    for tr in ds.train:
        seq = [tr.average_gso("laplacian", 0.1)] * 2
        tr.accelerations = generalized_model_forward(tr.features(), seq, DELAY, teacher).transpose(1, 0, 2)
    model = init_model(ModelConfig(features=16, order=2), make_rng(1))
    _, report = train(model, ds, TrainConfig(epochs=200, learning_rate=1e-2))
    mses = [r.train_mse for r in report.rows]
    assert mses[-1] < 1e-3 * mses[0]


def test_training_selects_best_validation_epoch(tiny_dataset):
    model = init_model(ModelConfig(features=4, order=2), make_rng(2))
    _, report = train(model, tiny_dataset, TrainConfig(epochs=4, learning_rate=1e-2))
    costs = [r.validation_cost for r in report.rows]
    flags = [r.selected for r in report.rows]
    assert sum(flags) == 1
    assert flags.index(True) == int(np.argmin(costs))
    assert report.to_csv().splitlines()[0] == "epoch,train_mse,validation_cost,selected_flag"


def test_time_varying_mode_trains(tiny_dataset):
    model = init_model(ModelConfig(features=4, order=2), make_rng(3))
    best, report = train(model, tiny_dataset, TrainConfig(epochs=2, graph_mode=GraphMode.TIME_VARYING))
    assert len(report.rows) == 2 and np.isfinite(report.rows[-1].train_mse)


def test_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=4, learning_rate=5e-3)
    full_best, full_report = train(init_model(ModelConfig(features=4, order=2), make_rng(4)), tiny_dataset, cfg)

    def stop_after_two(state):
        save_train_state(state, tmp_path)
        if state.epoch == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(init_model(ModelConfig(features=4, order=2), make_rng(4)), tiny_dataset, cfg, on_epoch=stop_after_two)
    state = load_train_state(tmp_path)
    assert state.epoch == 2
    best, report = train(state.model, tiny_dataset, cfg, state=state)
    assert report.to_csv() == full_report.to_csv()
    for name, arr in full_best.parameters().items():
        assert np.array_equal(best.parameters()[name], arr)


def test_divergence_reports_epoch(tiny_dataset):
    model = init_model(ModelConfig(features=4, order=2), make_rng(5))
    model.readout.bias[:] = np.inf
    with pytest.raises(TrainingDivergence) as err:
        train(model, tiny_dataset, TrainConfig(epochs=1))
    assert err.value.epoch == 1
