import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siesta.errors import ConfigError, DataError, UsageError
from siesta.head import CosineHead

from oracles import central_diff, cosine_softmax_loss, rel_err


def head_with(rows, tau=0.1):
    rows = np.asarray(rows, dtype=float)
    h = CosineHead(rows.shape[0], rows.shape[1], tau)
    h.weights[:] = rows
    h.counters[:] = 1
    return h


def test_single_class_self_score():
    h = head_with([[0.3, -2.0, 1.0]])
    a, p = h.scores(np.array([0.3, -2.0, 1.0]))
    assert a[0] == pytest.approx(1.0) and p[0] == 1.0


def test_two_class_softmax_values():
    h = head_with([[1, 0], [0, 1]], tau=1.0)
    a, p = h.scores(np.array([1.0, 0.0]))
    np.testing.assert_allclose(a, [1.0, 0.0])
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], rtol=1e-12)
    assert p[0] == pytest.approx(0.7311, abs=5e-5) and p[1] == pytest.approx(0.2689, abs=5e-5)
    assert h.predict(np.array([1.0, 0.0])) == 0


@given(st.floats(1e-3, 1e3))
@settings(max_examples=40, deadline=None)
def test_scale_invariance(lam):
    rng = np.random.default_rng(0)
    h = head_with(rng.standard_normal((4, 5)))
    z = rng.standard_normal(5)
    a1, p1 = h.scores(z)
    a2, p2 = h.scores(lam * z)
    np.testing.assert_allclose(a1, a2, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    assert h.predict(z) == h.predict(lam * z)


def test_tau_never_changes_argmax_and_row_permutation():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((6, 4))
    Z = rng.standard_normal((50, 4))
    base = head_with(W).predict_batch(Z)
    for tau in (0.01, 1.0, 50.0):
        h = head_with(W, tau)
        assert np.array_equal(h.predict_batch(Z), base)
        assert np.array_equal(np.argmax(h.scores_batch(Z)[1], axis=1), base)
    perm = rng.permutation(6)
    permuted = head_with(W[perm]).predict_batch(Z)
    np.testing.assert_array_equal(perm[permuted], base)


def test_zero_norm_rows_and_embeddings():
    h = CosineHead(3, 2)
    with pytest.raises(UsageError):
        h.predict(np.ones(2))
    h.online_update(np.array([1.0, 0.0]), 2)
    a, p = h.scores(np.array([0.0, 0.0]))
    assert np.all(a == 0)
    np.testing.assert_allclose(p, [0, 0, 1])   # inactive rows get probability 0
    assert h.predict(np.array([-1.0, 0.0])) == 2


def test_online_update_examples():
    h = CosineHead(2, 2)
    h.online_update(np.array([3.0, 4.0]), 0)
    np.testing.assert_array_equal(h.weights[0], [3.0, 4.0])
    h2 = CosineHead(1, 2)
    h2.weights[0] = [2.0, 0.0]
    h2.counters[0] = 1
    h2.online_update(np.array([0.0, 2.0]), 0)
    np.testing.assert_array_equal(h2.weights[0], [1.0, 1.0])
    assert h2.counters[0] == 2
    with pytest.raises(UsageError):
        h.online_update(np.ones(2), 5)


def test_online_update_is_stream_mean():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((500, 6)) * 10 + 3
    h = CosineHead(1, 6)
    for z in Z:
        h.online_update(z, 0)
    np.testing.assert_allclose(h.weights[0], Z.sum(0) / len(Z), atol=1e-9, rtol=0)


def test_loss_limits():
    # confident correct: a_true = 1, others = -1, small tau
    h = head_with([[1, 0], [-1, 0]], tau=0.01)
    loss, _, _, _ = h.backward(np.array([[2.0, 0.0]]), [0])
    assert loss < 1e-80
    # identical rows: loss = ln K and no z gradient
    h = head_with(np.tile([0.5, -1.0, 2.0], (4, 1)))
    loss, _, _, dZ = h.backward(np.random.default_rng(0).standard_normal((3, 3)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert np.abs(dZ).max() < 1e-14


def test_target_on_inactive_class_rejected():
    h = CosineHead(3, 2)
    h.online_update(np.ones(2), 0)
    with pytest.raises(UsageError):
        h.backward(np.ones((1, 2)), [1])


@pytest.mark.parametrize("seed", range(6))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    K, e, B = 5, 4, 3
    h = head_with(rng.standard_normal((K, e)), tau=float(rng.uniform(0.05, 1.0)))
    h.weights[4] = 0.0            # one inactive row
    Z = rng.standard_normal((B, e))
    T = rng.dirichlet(np.ones(4), B)
    T = np.hstack([T, np.zeros((B, 1))])
    loss, dW, dtau, dZ = h.backward(Z, T)
    assert loss == pytest.approx(cosine_softmax_loss(h.weights, h.tau, Z, T), rel=1e-12)

    f = lambda: cosine_softmax_loss(h.weights, h.tau, Z, T)
    # the zero row is outside the differentiable domain (perturbing it activates
    # the class), so only active rows are compared; its analytic gradient is 0
    active = h.weights[:4]
    f_act = lambda: cosine_softmax_loss(np.vstack([active, np.zeros((1, e))]), h.tau, Z, T)
    assert rel_err(dW[:4], central_diff(f_act, active)) < 1e-5
    assert np.all(dW[4] == 0)
    assert rel_err(dZ, central_diff(f, Z)) < 1e-5
    tau_box = np.array([h.tau])

    def f_tau():
        return cosine_softmax_loss(h.weights, tau_box[0], Z, T)
    assert rel_err([dtau], central_diff(f_tau, tau_box)) < 1e-5


def test_loss_per_sample_matches_mean():
    rng = np.random.default_rng(2)
    h = head_with(rng.standard_normal((3, 4)))
    Z = rng.standard_normal((7, 4))
    y = rng.integers(0, 3, 7)
    loss, _, _, _ = h.backward(Z, y)
    assert np.mean(h.loss_per_sample(Z, y)) == pytest.approx(loss, rel=1e-12)


def test_serialization_round_trip():
    h = head_with(np.random.default_rng(0).standard_normal((3, 2)), tau=0.37)
    h2, off = CosineHead.from_bytes(h.to_bytes())
    assert off == len(h.to_bytes())
    np.testing.assert_array_equal(h2.weights, h.weights)
    assert h2.tau == 0.37
    with pytest.raises(DataError):
        CosineHead.from_bytes(b"NOPE" + h.to_bytes()[4:])


def test_bad_construction():
    with pytest.raises(ConfigError):
        CosineHead(0, 3)
    with pytest.raises(ConfigError):
        CosineHead(2, 3, tau=0.0)
