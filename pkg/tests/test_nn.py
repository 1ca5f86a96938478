import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siesta import nn
from siesta.errors import ConfigError, DataError, NumericError, UsageError
from siesta.nn import LayerSpec, Network

from oracles import central_diff, forward_loops, rel_err


def small_net(seed=0, d=3, e=4):
    return Network.init(nn.default_specs(d, e), seed)


def test_default_stack_shape():
    specs = nn.default_specs(16, 32)
    assert [s.kind for s in specs] == ["pointwise_conv", "gelu", "global_avg_pool", "dense", "gelu", "dense"]
    assert specs[0].out_dim == 32 and specs[3].in_dim == 32 and specs[-1].out_dim == 32


@pytest.mark.parametrize("specs", [
    [LayerSpec("dense", 4, 3), LayerSpec("global_avg_pool", 3)],          # dense before pool
    [LayerSpec("pointwise_conv", 4, 3), LayerSpec("dense", 4, 2)],       # dims do not chain, no pool
    [LayerSpec("global_avg_pool", 4), LayerSpec("gelu", 4)],             # nothing trainable
    [LayerSpec("pointwise_conv", 4, 3), LayerSpec("global_avg_pool", 3), LayerSpec("global_avg_pool", 3)],
])
def test_invalid_specs_rejected(specs):
    with pytest.raises(ConfigError):
        Network(specs)


def test_identity_dense_passes_pooled_vector():
    specs = [LayerSpec("global_avg_pool", 5), LayerSpec("dense", 5, 5)]
    net = Network(specs, [{}, {"W": np.eye(5), "b": np.zeros(5)}])
    x = np.random.default_rng(0).standard_normal((2, 3, 3, 5))
    z, _ = nn.forward(net, x)
    np.testing.assert_array_equal(z, x.mean(axis=(1, 2)))


def test_zero_input_linear_stack_gives_zero():
    specs = [LayerSpec("pointwise_conv", 4, 6), LayerSpec("global_avg_pool", 6), LayerSpec("dense", 6, 3)]
    net = Network.init(specs, 1)
    z, _ = nn.forward(net, np.zeros((3, 2, 2, 4)))
    assert np.all(z == 0)


def test_forward_matches_loop_reevaluation():
    net = small_net(3)
    x = np.random.default_rng(7).standard_normal((2, 3, 2, 3))
    z, _ = nn.forward(net, x)
    for i in range(2):
        np.testing.assert_allclose(z[i], forward_loops(net.specs, net.params, x[i]), rtol=1e-12, atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ConfigError):
        nn.forward(small_net(), np.zeros((1, 2, 2, 5)))


def test_zero_output_grad_gives_zero_grads():
    net = small_net()
    z, tape = nn.forward(net, np.random.default_rng(0).standard_normal((2, 2, 2, 3)))
    grads, gin = nn.backward(net, tape, np.zeros_like(z))
    assert all(np.all(g == 0) for g in grads) and np.all(gin == 0)


def test_linear_case_dl_dw_is_x():
    # L = w . x for a single output unit: dL/dw = x
    specs = [LayerSpec("global_avg_pool", 4), LayerSpec("dense", 4, 1)]
    net = Network(specs, [{}, {"W": np.ones((4, 1)), "b": np.zeros(1)}])
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    _, tape = nn.forward(net, x)
    grads, _ = nn.backward(net, tape, np.ones((1, 1)))
    np.testing.assert_array_equal(grads[0][:, 0], x.ravel())
    np.testing.assert_array_equal(grads[1], [1.0])


def test_stale_tape_rejected():
    net = small_net()
    z, tape = nn.forward(net, np.ones((1, 2, 2, 3)))
    net.version += 1
    with pytest.raises(UsageError):
        nn.backward(net, tape, z)
    other = small_net()
    with pytest.raises(UsageError):
        nn.backward(other, tape, z)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed)
    x = rng.standard_normal((3, 2, 3, 3))
    R = rng.standard_normal((3, 4))

    def loss():
        z, _ = nn.forward(net, x)
        return float(np.sum(R * z))

    z, tape = nn.forward(net, x)
    grads, gin = nn.backward(net, tape, R)
    for p, g in zip(net.param_arrays(), grads):
        assert rel_err(g, central_diff(loss, p)) < 1e-5
    assert rel_err(gin, central_diff(loss, x)) < 1e-5


def test_depth_index_and_lr_ordering():
    net = small_net()
    tl = net.trainable_layers()
    assert [net.depth_index(i) for i in tl] == [3, 2, 1]
    lrs = [0.2 * 0.99 ** net.depth_index(i) for i in tl]
    assert lrs == sorted(lrs)  # shallower (closer to input) layers get smaller lr


# ---------------------------------------------------------------- schedule

def test_onecycle_values():
    assert nn.onecycle_lr(0, 100, 0.2) == pytest.approx(0.008, abs=1e-15)
    assert nn.onecycle_lr(30, 100, 0.2) == 0.2
    assert nn.onecycle_lr(100, 100, 0.2) == pytest.approx(0.2 / 1e4, rel=1e-12)
    p = nn.ScheduleConfig(pct_start=0.5, div_start=10, div_final=100)
    assert nn.onecycle_lr(0, 10, 1.0, p) == pytest.approx(0.1)
    assert nn.onecycle_lr(5, 10, 1.0, p) == 1.0


def test_onecycle_errors():
    with pytest.raises(ConfigError):
        nn.onecycle_lr(0, 0, 0.2)
    with pytest.raises(ConfigError):
        nn.onecycle_lr(11, 10, 0.2)


@given(st.integers(1, 500), st.floats(1e-3, 5.0))
@settings(max_examples=60, deadline=None)
def test_onecycle_shape(total, max_lr):
    lrs = [nn.onecycle_lr(t, total, max_lr) for t in range(total + 1)]
    peak = int(np.argmax(lrs))
    assert max(lrs) <= max_lr * (1 + 1e-12)
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:], lrs[peak + 1:]))


# ---------------------------------------------------------------- sgd

def test_sgd_zero_grad_no_decay_is_noop():
    p = [np.array([1.0, -2.0])]
    st_ = nn.OptimizerState.for_params(p, 5, weight_decay=0.0)
    nn.sgd_step(p, [np.zeros(2)], st_, [0])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert st_.step == 1


def test_sgd_effective_lr_depth_one_at_peak():
    p = [np.zeros(1)]
    st_ = nn.OptimizerState.for_params(p, 10, base_lr=0.2, momentum=0.0, weight_decay=0.0, schedule=None)
    nn.sgd_step(p, [np.ones(1)], st_, [1])
    assert p[0][0] == pytest.approx(-0.198, abs=1e-15)


def test_sgd_momentum_two_steps():
    g = np.array([0.5, -1.5])
    p = [np.zeros(2)]
    st_ = nn.OptimizerState.for_params(p, 2, base_lr=1.0, momentum=0.9, weight_decay=0.0, schedule=None)
    nn.sgd_step(p, [g], st_, [0])
    nn.sgd_step(p, [g], st_, [0])
    np.testing.assert_allclose(p[0], -2.9 * g, rtol=1e-14)


def test_sgd_weight_decay_and_mask():
    p = [np.array([2.0]), np.array([2.0])]
    st_ = nn.OptimizerState.for_params(p, 1, base_lr=0.5, momentum=0.0, weight_decay=0.1, schedule=None)
    nn.sgd_step(p, [np.zeros(1), np.zeros(1)], st_, [0, 0], [True, False])
    assert p[0][0] == pytest.approx(2.0 - 0.5 * 0.2) and p[1][0] == 2.0


def test_sgd_errors():
    p = [np.zeros(2)]
    st_ = nn.OptimizerState.for_params(p, 1)
    with pytest.raises(NumericError):
        nn.sgd_step(p, [np.array([np.nan, 0.0])], st_, [0])
    nn.sgd_step(p, [np.zeros(2)], st_, [0])
    with pytest.raises(UsageError):
        nn.sgd_step(p, [np.zeros(2)], st_, [0])


def test_training_is_deterministic():
    def run():
        net = small_net(5)
        x = np.random.default_rng(1).standard_normal((4, 2, 2, 3))
        st_ = nn.OptimizerState.for_params(net.param_arrays(), 20)
        for _ in range(20):
            z, tape = nn.forward(net, x)
            grads, _ = nn.backward(net, tape, z)
            nn.sgd_step(net.param_arrays(), grads, st_, net.param_depths())
            net.version += 1
        return nn.network_to_bytes(net)
    assert run() == run()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_and_layout(tmp_path):
    from siesta.head import CosineHead
    net = small_net(2)
    head = CosineHead(3, 4)
    head.online_update(np.ones(4), 1)
    path = tmp_path / "n.ckpt"
    nn.save_checkpoint(path, net, head)
    buf = path.read_bytes()
    assert buf[:8] == b"SIESTANN"
    n_layers = len(net.specs)
    header = 8 + 8 + 9 * n_layers
    assert len(buf) == header + 8 * net.n_params() + len(head.to_bytes())
    # first weight array follows the header, little-endian f64
    W0 = np.frombuffer(buf, "<f8", count=net.params[0]["W"].size, offset=header)
    np.testing.assert_array_equal(W0, net.params[0]["W"].ravel())
    net2, head2 = nn.load_checkpoint(path)
    assert nn.network_to_bytes(net2) == nn.network_to_bytes(net)
    np.testing.assert_array_equal(head2.weights, head.weights)
    assert head2.tau == head.tau and list(head2.counters) == [0, 1, 0]


def test_checkpoint_corrupt(tmp_path):
    net = small_net()
    path = tmp_path / "n.ckpt"
    nn.save_checkpoint(path, net)
    buf = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(buf[:-3])
    with pytest.raises(DataError):
        nn.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(DataError):
        nn.load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "x.ckpt").write_bytes(buf + b"\x00")
    with pytest.raises(DataError):
        nn.load_checkpoint(tmp_path / "x.ckpt")
