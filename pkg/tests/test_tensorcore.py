import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab.netzoo import Conv, Dense, Flatten, LayerParams, MaxPool, NetworkSpec, ReLU, build_network, mini_a
from prunelab.netzoo.network import Network
from prunelab.tensorcore import (
    OptimizerState,
    backward,
    forward,
    grad_check,
    logits,
    loss_and_grad,
    sgd_step,
    sgd_train,
)
from prunelab.tensorcore.gradcheck import relative_error
from prunelab.tensorcore.serialize import (
    WeightFileError,
    load_weights,
    save_weights,
    weights_from_bytes,
    weights_to_bytes,
)
from prunelab.tensorcore.tape import NonFiniteError, ShapeError, Tape, TapeConsumedError, Var


def small_spec(**kw):
    layers = [Conv(4, 3, 1, 1), ReLU(), MaxPool(2, 2), Conv(3, 3, 2, 1), ReLU(), Flatten(), Dense(5), ReLU(), Dense(3)]
    return NetworkSpec(layers, kw.get("input_shape", (2, 6, 6)), 3)


def batch(rng, n, shape=(2, 6, 6), classes=3):
    return rng.standard_normal((n,) + shape), rng.integers(0, classes, n)


def zeroed(net: Network) -> Network:
    return net.with_parameters([np.zeros_like(p) for p in net.parameters()])


def fd_grad(f, x, step=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f()
        x[i] = orig - step
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * step)
    return g


# forward


def test_uniform_logits_give_log_classes():
    net = zeroed(build_network(mini_a(), 0))
    x, y = batch(np.random.default_rng(0), 3, (3, 32, 32), 10)
    loss, _, acts = forward(net, x, y)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert [a.shape[1] for a in acts] == [16, 32, 64, 32]


def test_identity_one_by_one_conv():
    spec = NetworkSpec([Conv(1, 1), Flatten(), Dense(2)], (1, 4, 4), 2)
    net = build_network(spec, 0)
    params = list(net.params)
    params[0] = LayerParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    net = Network(spec, params)
    _, _, acts = forward(net, np.ones((2, 1, 4, 4)), np.array([0, 1]))
    assert np.array_equal(acts[0], np.ones((2, 1, 4, 4)))


def test_random_net_loss_positive():
    rng = np.random.default_rng(1)
    x, y = batch(rng, 4)
    loss, _, _ = forward(build_network(small_spec(), 1), x, y)
    assert math.isfinite(loss) and loss > 0


def test_forward_rejects_bad_input():
    net = build_network(small_spec(), 0)
    rng = np.random.default_rng(0)
    x, y = batch(rng, 2)
    with pytest.raises(ShapeError):
        forward(net, x[:, :1], y)
    with pytest.raises(ShapeError):
        forward(net, x, y[:1])
    with pytest.raises(ValueError):
        forward(net, x, np.array([0, 3]))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        forward(net, x, y)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((2, 7, 6, 3))
    W = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    s, p = 2, 1
    out = Tape(record=False).conv2d(Var(X), Var(W), Var(b), s, p).value
    Xp = np.pad(X, ((0, 0), (p, p), (p, p), (0, 0)))
    ho, wo = (7 + 2 * p - 3) // s + 1, (6 + 2 * p - 3) // s + 1
    ref = np.zeros((2, ho, wo, 4))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = Xp[n, i * s : i * s + 3, j * s : j * s + 3, :]
                    ref[n, i, j, o] = np.sum(patch * W[o].transpose(1, 2, 0)) + b[o]
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_ordered_kernels_agree_with_blas():
    net = build_network(mini_a(), 1)
    x = np.random.default_rng(3).standard_normal((3, 3, 32, 32))
    assert np.allclose(logits(net, x, ordered=True), logits(net, x), rtol=1e-12, atol=1e-12)


# backward


@pytest.mark.parametrize(
    "op",
    ["conv_s1", "conv_s2p1", "relu", "pool", "pool_overlap", "flatten", "dense", "xent"],
)
def test_primitive_gradients_match_finite_differences(op):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((2, 5, 5, 3))
    W = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    D = rng.standard_normal((6, 75))
    labels = np.array([1, 4])
    probe = None

    def build(tape, xv):
        nonlocal probe
        if op == "conv_s1":
            y = tape.conv2d(xv, Var(W), Var(b))
        elif op == "conv_s2p1":
            y = tape.conv2d(xv, Var(W), Var(b), 2, 1)
        elif op == "relu":
            y = tape.relu(xv)
        elif op == "pool":
            y = tape.maxpool2d(xv, 2, 2)
        elif op == "pool_overlap":
            y = tape.maxpool2d(xv, 3, 1)
        elif op == "flatten":
            y = tape.flatten(xv)
        elif op == "dense":
            y = tape.dense(tape.flatten(xv), Var(D), Var(np.zeros(6)))
        else:
            return tape.softmax_cross_entropy(tape.dense(tape.flatten(xv), Var(D), Var(np.zeros(6))), labels)
        if probe is None:
            probe = np.random.default_rng(4).standard_normal(y.shape)
        return Var(np.array(np.sum(y.value * probe))), y

    def loss_value():
        out = build(Tape(record=False), Var(X))
        return float(out[0].value if isinstance(out, tuple) else out.value)

    tape = Tape()
    xv = Var(X)
    out = build(tape, xv)
    if isinstance(out, tuple):
        _, y = out
        y.grad = probe.copy()
        tape.consumed = True
        for rec in reversed(tape.records):
            if rec.output.grad is None:
                continue
            for var, g in zip(rec.inputs, rec.backward(rec.output.grad)):
                if g is not None:
                    var._accumulate(g)
    else:
        tape.backward(out)
    numeric = fd_grad(loss_value, X)
    assert relative_error(xv.grad, numeric).max() <= 1e-4


def test_network_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    net = build_network(small_spec(), 5)
    x, y = batch(rng, 4)
    report = grad_check(net, x, y)
    assert report.passed, report
    assert report.checked == net.num_parameters


def test_activation_gradients_match_finite_differences():
    spec = NetworkSpec([Conv(3, 3, 1, 1), ReLU(), Flatten(), Dense(3)], (2, 4, 4), 3)
    net = build_network(spec, 6)
    rng = np.random.default_rng(6)
    x, y = batch(rng, 3, (2, 4, 4))
    _, tape, acts = forward(net, x, y)
    g = backward(tape).activations[0]
    a = acts[0].copy()
    dense = net.params[3]

    def loss_from_act():
        z = a.reshape(3, -1) @ dense.weight.T + dense.bias
        z = z - z.max(1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(3), y]))

    numeric = fd_grad(loss_from_act, a)
    assert relative_error(g, numeric).max() <= 1e-4


def test_dead_branch_gradient_exactly_zero():
    net = build_network(small_spec(), 7)
    params = list(net.params)
    # the second conv's filter 0 never reaches the loss
    dense = params[6]
    w = dense.weight.copy()
    w[:, 0:4] = 0.0
    params[6] = LayerParams(w, dense.bias)
    net = Network(net.spec, params)
    x, y = batch(np.random.default_rng(7), 4)
    _, grads = loss_and_grad(net, x, y)
    assert np.all(grads.params[3].weight[0] == 0.0)
    assert grads.params[3].bias[0] == 0.0


def test_scaled_loss_doubles_all_gradients():
    net = build_network(small_spec(), 8)
    x, y = batch(np.random.default_rng(8), 4)
    _, grads = loss_and_grad(net, x, y)
    _, tape, _ = forward(net, x, y, loss_scale=2.0)
    doubled = backward(tape)
    for g1, g2 in zip(grads.flat(), doubled.flat()):
        assert np.array_equal(2.0 * g1, g2)


def test_backward_twice_rejected():
    net = build_network(small_spec(), 0)
    x, y = batch(np.random.default_rng(0), 2)
    _, tape, _ = forward(net, x, y)
    backward(tape)
    with pytest.raises(TapeConsumedError):
        backward(tape)
    _, tape, _ = forward(net, x, y, record=False)
    with pytest.raises(TapeConsumedError):
        backward(tape)


def test_relu_mask_consistency():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((2, 3, 3, 2))
    X[0, 0, 0, 0] = 0.0
    tape = Tape()
    xv = Var(X)
    y = tape.relu(xv)
    tape.backward(y, seed=1.0)
    assert np.array_equal(xv.grad == 0, y.value == 0)


def test_maxpool_ties_go_to_lowest_index():
    X = np.zeros((1, 4, 4, 1))
    X[0, 2:4, 2:4, 0] = 7.0
    tape = Tape()
    xv = Var(X)
    y = tape.maxpool2d(xv, 2, 2)
    tape.backward(y)
    expected = np.zeros((4, 4))
    expected[0, 0] = expected[0, 2] = expected[2, 0] = expected[2, 2] = 1.0
    assert np.array_equal(xv.grad[0, :, :, 0], expected)


def test_maxpool_overlap_ties_accumulate_on_first():
    X = np.ones((1, 3, 3, 1))
    tape = Tape()
    xv = Var(X)
    y = tape.maxpool2d(xv, 2, 1)
    tape.backward(y)
    expected = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=float)
    assert np.array_equal(xv.grad[0, :, :, 0], expected)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), c=st.integers(2, 8))
def test_softmax_gradient_closed_form(seed, n, c):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, c)) * 5
    labels = rng.integers(0, c, n)
    tape = Tape()
    zv = Var(Z)
    tape.backward(tape.softmax_cross_entropy(zv, labels))
    p = np.exp(Z - Z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = (p - np.eye(c)[labels]) / n
    assert np.allclose(zv.grad, expected, rtol=1e-12, atol=1e-15)


def test_losses_bit_identical_across_runs():
    x, y = batch(np.random.default_rng(10), 8)
    a = loss_and_grad(build_network(small_spec(), 3), x, y)
    b = loss_and_grad(build_network(small_spec(), 3), x, y)
    assert a[0] == b[0]
    assert all(np.array_equal(g, h) for g, h in zip(a[1].flat(), b[1].flat()))


# optimizer


def test_plain_sgd_step():
    (theta,), _ = sgd_step([np.zeros(())], [np.ones(())], OptimizerState((np.zeros(()),), 0.1, 0.0))
    assert theta == pytest.approx(-0.1, abs=1e-15)


def test_momentum_recurrence():
    state = OptimizerState((np.zeros(()),), 0.1, 0.9)
    params = [np.zeros(())]
    for _ in range(2):
        params, state = sgd_step(params, [np.ones(())], state)
    assert float(params[0]) == pytest.approx(-0.29, abs=1e-15)


def test_velocity_carries_with_zero_gradient():
    state = OptimizerState((np.full(3, 0.5),), 0.1, 0.9)
    (theta,), state = sgd_step([np.zeros(3)], [np.zeros(3)], state)
    assert np.allclose(theta, 0.45)
    assert np.allclose(state.velocities[0], 0.45)


def test_sgd_rejects_bad_input():
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(2)], [np.zeros(3)], OptimizerState((np.zeros(2),), 0.1))
    with pytest.raises(ValueError):
        OptimizerState((), 0.1, 1.0)
    with pytest.raises(NonFiniteError):
        sgd_step([np.zeros(1)], [np.array([np.inf])], OptimizerState((np.zeros(1),), 0.1))


def test_sgd_train_reduces_loss():
    rng = np.random.default_rng(11)
    x, y = batch(rng, 64)
    net = build_network(small_spec(), 11)
    before = forward(net, x, y, record=False)[0]
    net = sgd_train(net, x, y, 60, 16, 0.05, 0.9, np.random.default_rng(0))
    assert forward(net, x, y, record=False)[0] < before


# gradient checker


def test_grad_check_on_default_mini_cnn():
    # default MiniCNN-A with every parameter checked; 16x16 input keeps the run short
    net = build_network(mini_a(input_shape=(3, 16, 16)), 0)
    x, y = batch(np.random.default_rng(12), 4, (3, 16, 16), 10)
    report = grad_check(net, x, y)
    assert report.passed, report.worst
    assert report.max_rel_error <= 1e-4


def test_grad_check_flags_coarse_step():
    net = build_network(small_spec(), 13)
    x, y = batch(np.random.default_rng(13), 4)
    report = grad_check(net, x, y, step=1e-1)
    assert not report.passed


def test_grad_check_linear_network():
    spec = NetworkSpec([Conv(2, 1), Flatten(), Dense(3)], (2, 3, 3), 3)
    net = build_network(spec, 14)
    x, y = batch(np.random.default_rng(14), 4, (2, 3, 3))
    report = grad_check(net, x, y)
    assert report.max_rel_error <= 1e-8, report


# weight files


def test_weights_round_trip_bit_exact(tmp_path):
    net = build_network(mini_a(), 15)
    path = tmp_path / "w.plab"
    save_weights(net, path)
    back = load_weights(path, build_network(mini_a(), 99))
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    data = path.read_bytes()
    assert data[:4] == b"PLAB"
    assert int.from_bytes(data[4:6], "little") == 1
    assert int.from_bytes(data[6:10], "little") == 6


def test_weights_rejects_corruption():
    net = build_network(small_spec(), 0)
    data = weights_to_bytes(net)
    with pytest.raises(WeightFileError, match="magic"):
        weights_from_bytes(b"XXXX" + data[4:], net)
    with pytest.raises(WeightFileError, match="truncated"):
        weights_from_bytes(data[:-3], net)
    with pytest.raises(WeightFileError, match="trailing"):
        weights_from_bytes(data + b"\0", net)
    other = build_network(small_spec(input_shape=(3, 6, 6)), 0)
    with pytest.raises(WeightFileError, match="shapes"):
        weights_from_bytes(data, other)
