import numpy as np
import pytest

from fedsurv.errors import DomainError, TrainingError
from fedsurv.model import (
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    backward,
    forward,
    init_params,
    loss_and_grad,
    mse_loss,
    mse_loss_grad,
    pseudo_loss,
    pseudo_loss_grad,
    train_local,
    zeros_like,
)
from fedsurv.survival import SurvivalData, TimeGrid


def scalar_params(value):
    return ModelParams([np.array([[value]])], [np.array([0.0])])


def test_params_validate_shapes():
    with pytest.raises(DomainError):
        ModelParams([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(DomainError):
        ModelParams([np.zeros((2, 3)), np.zeros((2, 1))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(DomainError):
        ModelParams([np.array([[np.inf]])], [np.zeros(1)])


def test_params_dict_roundtrip():
    params = init_params((3, 4, 2), np.random.default_rng(0))
    again = ModelParams.from_dict(params.to_dict())
    assert again.equals(params)
    assert again.layer_dims == (3, 4, 2)
    doc = params.to_dict()
    doc["weights"][0] = doc["weights"][0][:-1]
    with pytest.raises(DomainError):
        ModelParams.from_dict(doc)


def test_init_statistics():
    params = init_params((400, 300, 1), np.random.default_rng(1))
    assert params.weights[0].std() == pytest.approx(1 / 20, rel=0.02)
    assert not params.biases[0].any()


def test_zero_weights_give_half():
    params = zeros_like(init_params((3, 5, 4), np.random.default_rng(0)))
    np.testing.assert_array_equal(forward(params, np.ones((6, 3))), 0.5)


def test_selu_single_unit():
    params = ModelParams([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    expected_hidden = 1.0507009873554805 * 1.6732632423543772 * (np.exp(-1) - 1)
    assert expected_hidden == pytest.approx(-1.1113, abs=1e-4)
    out = forward(params, np.array([-1.0]))
    assert out[0] == pytest.approx(1 / (1 + np.exp(-expected_hidden)), abs=1e-15)


def test_forward_shape_checks_and_determinism():
    params = init_params((3, 5, 2), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(forward(params, x), forward(params, x))
    assert forward(params, x[0]).shape == (2,)
    with pytest.raises(DomainError):
        forward(params, np.ones((4, 2)))


def test_outputs_strictly_inside_unit_interval():
    params = ModelParams([np.array([[1e4, -1e4]])], [np.zeros(2)])
    out = forward(params, np.array([[1.0], [-1.0]]))
    assert ((out > 0) & (out < 1)).all()


def test_dropout_rate_zero_matches_eval():
    params = init_params((3, 8, 8, 2), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3))
    train = forward(params, x, train=True, rng=np.random.default_rng(2), dropout_rate=0.0)
    assert np.array_equal(train, forward(params, x))


def test_dropout_changes_train_output():
    params = init_params((3, 8, 8, 2), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3))
    train = forward(params, x, train=True, rng=np.random.default_rng(2), dropout_rate=0.5)
    assert not np.array_equal(train, forward(params, x))


@pytest.mark.parametrize("j,s,expected", [(1.0, 1.0, 0.0), (0.0, 0.0, 0.0), (-0.2, 0.5, 0.25)])
def test_pseudo_loss_cells(j, s, expected):
    assert pseudo_loss([[s]], [[j]]) == pytest.approx(expected, abs=1e-15)


def test_pseudo_loss_shape_mismatch():
    with pytest.raises(DomainError):
        pseudo_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pseudo_loss_gradient_cell():
    assert pseudo_loss_grad([[0.5]], [[1.0]])[0, 0] == -1.0


@pytest.mark.parametrize("seed", range(10))
def test_pseudo_and_mse_gradients_agree(seed):
    rng = np.random.default_rng(seed)
    s = rng.random((30, 7))
    j = rng.normal(0.5, 0.8, (30, 7))
    np.testing.assert_allclose(pseudo_loss_grad(s, j), mse_loss_grad(s, j), rtol=0, atol=1e-12)
    assert pseudo_loss(s, j) - mse_loss(s, j) == pytest.approx(np.mean(j - j * j), abs=1e-12)


def numeric_grad(params, x, pseudo, h=1e-6):
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss_and_grad(params, x, pseudo)[0]
            arr[idx] = keep - h
            down = loss_and_grad(params, x, pseudo)[0]
            arr[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("seed", range(8))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p, m = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    params = init_params((p, 3, 2, m), rng)
    params = params.map(lambda a: a + rng.normal(0, 0.3, a.shape))
    x = rng.normal(size=(6, p))
    pseudo = rng.normal(0.5, 0.5, (6, m))
    analytic = backward(params, x, pseudo).arrays()
    numeric = numeric_grad(params, x, pseudo)
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(a) + np.abs(n), 1e-7)
        assert (np.abs(a - n) / scale).max() < 1e-4


def test_adam_first_step_is_sign_sized():
    p = scalar_params(0.0)
    for g, expected in ((1.0, -1e-3), (-2.0, 1e-3)):
        grads = ModelParams([np.array([[g]])], [np.array([0.0])])
        new, state = adam_step(p, grads, AdamState.zeros(p), 1e-3)
        assert new.weights[0][0, 0] == pytest.approx(expected, rel=1e-6)
        assert state.step_count == 1


def test_adam_zero_gradient():
    p = scalar_params(0.7)
    new, state = adam_step(p, zeros_like(p), AdamState.zeros(p), 1e-3)
    assert new.equals(p)
    assert state.step_count == 1


def test_adam_rejects_nonfinite_gradient():
    p = scalar_params(0.0)
    grads = ModelParams.__new__(ModelParams)
    grads.weights, grads.biases = [np.array([[np.nan]])], [np.array([0.0])]
    with pytest.raises(TrainingError):
        adam_step(p, grads, AdamState.zeros(p), 1e-3)


def toy_problem(n=10, m=3):
    x = np.linspace(-1.0, 1.0, n)[:, None]
    times = np.exp(x[:, 0] * 1.5) * 2.0
    grid = TimeGrid(tuple(np.quantile(times, [0.0, 0.5, 0.9])))
    pseudo = (times[:, None] > grid.as_array()[None, :]).astype(float)
    data = SurvivalData(x, times, np.ones(n, bool))
    return x, pseudo, data, grid


def test_train_local_zero_epochs_returns_input():
    x, pseudo, data, grid = toy_problem()
    params = init_params((1, 4, 3), np.random.default_rng(0))
    out, hist = train_local(params, x, pseudo, data, grid, TrainConfig(max_epochs=0))
    assert out is params and hist.epochs == 0


def test_train_local_runs_max_epochs_when_patient():
    x, pseudo, data, grid = toy_problem()
    params = init_params((1, 4, 3), np.random.default_rng(0))
    cfg = TrainConfig(max_epochs=7, patience=100, hidden_layers=(4,))
    _, hist = train_local(params, x, pseudo, data, grid, cfg)
    assert hist.epochs == 7 and len(hist.val_cindex) == 7


def test_train_local_learns_toy_ranking():
    x, pseudo, data, grid = toy_problem()
    cfg = TrainConfig(learning_rate=1e-2, dropout_rate=0.0, max_epochs=200, patience=200,
                      batch_size=10, hidden_layers=(8, 8))
    params = init_params(cfg.layer_dims(1, 3), np.random.default_rng(0))
    _, hist = train_local(params, x, pseudo, data, grid, cfg)
    assert hist.best_cindex >= 0.9


def test_train_local_deterministic():
    x, pseudo, data, grid = toy_problem()
    cfg = TrainConfig(max_epochs=5, hidden_layers=(6, 4), seed=3)
    params = init_params(cfg.layer_dims(1, 3), np.random.default_rng(0))
    a, ha = train_local(params, x, pseudo, data, grid, cfg)
    b, hb = train_local(params, x, pseudo, data, grid, cfg)
    assert a.equals(b) and ha.losses == hb.losses


def test_train_local_shape_errors():
    x, pseudo, data, grid = toy_problem()
    params = init_params((1, 4, 2), np.random.default_rng(0))
    with pytest.raises(DomainError):
        train_local(params, x, pseudo, data, grid, TrainConfig(max_epochs=1))


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"dropout_rate": 1.0},
                                    {"patience": 0}, {"batch_size": 0}])
def test_train_config_ranges(kwargs):
    with pytest.raises(DomainError):
        TrainConfig(**kwargs)
