import numpy as np
import pytest

from licfl.model import (
    NetworkSpec,
    ParamVector,
    client_update,
    flatten,
    forward,
    from_layers,
    init_params,
    load_params,
    loss_and_grad,
    predict,
    save_params,
    unflatten,
)


def finite_difference_grad(p, x, y, eps=1e-5):
    g = np.zeros_like(p.values)
    for i in range(p.values.size):
        plus, minus = p.copy(), p.copy()
        plus.values[i] += eps
        minus.values[i] -= eps
        g[i] = (loss_and_grad(plus, x, y)[0] - loss_and_grad(minus, x, y)[0]) / (2 * eps)
    return g


def max_relative_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_init_deterministic_and_zero_bias():
    spec = NetworkSpec(96, (16,))
    a, b = init_params(spec, 3), init_params(spec, 3)
    np.testing.assert_array_equal(a.values, b.values)
    assert len(a) == 96 * 16 + 16 + 16 * 1 + 1 == 1569
    for w, bias in a.layers():
        assert np.all(bias == 0)
        limit = np.sqrt(6 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= limit)
    assert not np.array_equal(a.values, init_params(spec, 4).values)


def test_zero_params_give_half():
    p = ParamVector(np.zeros(len(init_params(NetworkSpec(5, (3,)), 0))), NetworkSpec(5, (3,)).shapes)
    assert forward(p, np.ones(5)) == 0.5


def test_output_in_unit_interval():
    p = init_params(NetworkSpec(8, (6, 4)), 1)
    out = predict(p, np.random.default_rng(0).standard_normal((200, 8)))
    assert np.all((out > 0) & (out < 1))


def test_single_layer_closed_form():
    w = np.array([[0.3, -1.2, 0.5]])
    p = from_layers([(w, [0.0])])
    x = np.array([1.0, 0.4, -2.0])
    assert forward(p, x) == pytest.approx(1 / (1 + np.exp(-(w[0] @ x))), abs=1e-14)


def test_dimension_mismatch():
    p = init_params(NetworkSpec(4, (2,)), 0)
    with pytest.raises(ValueError):
        forward(p, np.ones(5))


def test_flatten_layout_and_round_trip():
    p = from_layers([([[1.0, 2.0]], [3.0])])
    np.testing.assert_array_equal(flatten(p), [1.0, 2.0, 3.0])
    q = init_params(NetworkSpec(7, (5, 3)), 2)
    r = unflatten(flatten(q), q.shapes)
    assert r.values.tobytes() == q.values.tobytes()
    zero = ParamVector(np.zeros(len(q)), q.shapes)
    assert not np.any(flatten(zero))
    with pytest.raises(ValueError):
        unflatten(np.zeros(len(q) + 1), q.shapes)


def test_perfect_fit_has_zero_loss_and_grad():
    p = from_layers([([[0.0, 0.0]], [0.0])])
    x = np.random.default_rng(0).standard_normal((6, 2))
    loss, grad = loss_and_grad(p, x, np.full(6, 0.5))
    assert loss == 0.0
    assert not np.any(grad.values)


@pytest.mark.parametrize("case", range(20))
def test_gradient_matches_finite_differences(case):
    rng = np.random.default_rng(case)
    input_dim = int(rng.integers(2, 7))
    hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
    p = init_params(NetworkSpec(input_dim, hidden), case)
    p.values += 0.1 * rng.standard_normal(len(p))  # non-zero biases
    n = int(rng.integers(1, 9))
    x = rng.standard_normal((n, input_dim))
    y = rng.integers(0, 2, n)
    _, grad = loss_and_grad(p, x, y)
    assert max_relative_error(grad.values, finite_difference_grad(p, x, y)) < 1e-4


def test_duplicated_batch_is_mean_invariant():
    p = init_params(NetworkSpec(4, (3,)), 0)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((5, 4)), rng.integers(0, 2, 5)
    l1, g1 = loss_and_grad(p, x, y)
    l2, g2 = loss_and_grad(p, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, abs=1e-14)
    np.testing.assert_allclose(g1.values, g2.values, atol=1e-14)


def test_loss_permutation_invariant():
    p = init_params(NetworkSpec(4, (3,)), 0)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((9, 4)), rng.integers(0, 2, 9)
    perm = rng.permutation(9)
    l1, g1 = loss_and_grad(p, x, y)
    l2, g2 = loss_and_grad(p, x[perm], y[perm])
    assert l1 == pytest.approx(l2, abs=1e-14)
    np.testing.assert_allclose(g1.values, g2.values, atol=1e-14)


def test_empty_batch_rejected():
    p = init_params(NetworkSpec(4, (3,)), 0)
    with pytest.raises(ValueError):
        loss_and_grad(p, np.zeros((0, 4)), np.zeros(0))


def toy_task(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 6))
    return x, (x[:, 0] + x[:, 1] > 0).astype(float)


def test_client_update_lr_zero_is_identity():
    p = init_params(NetworkSpec(6, (4,)), 0)
    x, y = toy_task()
    assert client_update(p, x, y, lr=0.0).values.tobytes() == p.values.tobytes()


def test_client_update_single_full_batch_step():
    p = init_params(NetworkSpec(6, (4,)), 0)
    x, y = toy_task()
    _, g = loss_and_grad(p, x, y)
    out = client_update(p, x, y, lr=0.3, epochs=1, batch_size=len(y), seed=5)
    assert out.values.tobytes() == (p.values - 0.3 * g.values).tobytes()


def test_client_update_reduces_loss_and_keeps_input():
    p = init_params(NetworkSpec(6, (8,)), 0)
    before = p.values.copy()
    x, y = toy_task(256)
    trained = client_update(p, x, y, lr=0.5, epochs=5, batch_size=16, seed=1)
    assert loss_and_grad(trained, x, y)[0] <= loss_and_grad(p, x, y)[0]
    np.testing.assert_array_equal(p.values, before)
    again = client_update(p, x, y, lr=0.5, epochs=5, batch_size=16, seed=1)
    assert again.values.tobytes() == trained.values.tobytes()


def test_client_update_rejects_empty():
    p = init_params(NetworkSpec(6, (4,)), 0)
    with pytest.raises(ValueError):
        client_update(p, np.zeros((0, 6)), np.zeros(0), lr=0.1)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(NetworkSpec(10, (4, 3)), 8)
    path = tmp_path / "ckpt.bin"
    save_params(p, path)
    header, _, body = path.read_bytes().partition(b"\n")
    assert header == b"[[4, 10, 4], [3, 4, 3], [1, 3, 1]]"
    assert np.frombuffer(body, dtype="<f8").tobytes() == p.values.tobytes()
    q = load_params(path)
    assert q.shapes == p.shapes and q.values.tobytes() == p.values.tobytes()
