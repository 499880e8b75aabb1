import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab.netzoo import (
    Conv,
    Dense,
    Flatten,
    LayerParams,
    MaxPool,
    NetworkSpec,
    ReLU,
    SpecError,
    build_network,
    mini_a,
    mini_v,
    parameter_count,
    remove_filters,
    widen_layer,
)
from prunelab.netzoo.network import Network
from prunelab.tensorcore import logits


def conv_params(out, cin, k=3):
    return out * cin * k * k + out


def images(n=3, shape=(3, 32, 32), seed=0):
    return np.random.default_rng(seed).standard_normal((n,) + shape)


def test_mini_a_parameter_count_by_hand():
    # 32x32 -> stride-2 conv 16 -> pool 8 -> pool 4 -> pool 2; last conv has 32 maps of 2x2
    expected = (
        conv_params(16, 3) + conv_params(32, 16) + conv_params(64, 32) + conv_params(32, 64)
        + (32 * 2 * 2) * 64 + 64 + 64 * 10 + 10
    )  # fmt: skip
    assert expected == 50_954
    net = build_network(mini_a(), 0)
    assert net.num_parameters == parameter_count(mini_a()) == expected
    assert net.census == [16, 32, 64, 32]


def test_mini_v_shape():
    net = build_network(mini_v(), 0)
    assert net.census == [16, 16, 32, 32, 64, 64, 64, 64]
    assert logits(net, images(2)).shape == (2, 10)


def test_build_is_deterministic():
    a, b = build_network(mini_a(), 3), build_network(mini_a(), 3)
    c = build_network(mini_a(), 4)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0], c.parameters()[0])


def test_he_scaling():
    net = build_network(mini_a(), 0)
    w = net.params[6].weight  # third conv, fan-in 32*9
    assert w.std() == pytest.approx(np.sqrt(2 / 288), rel=0.05)
    assert np.all(net.params[6].bias == 0)


@pytest.mark.parametrize(
    "layers,why",
    [
        ([Conv(4, 3), Dense(10)], "dense before flatten"),
        ([Flatten(), Dense(10)], "conv"),
        ([Conv(4, 3), Flatten(), Dense(7)], "expected"),
        ([Conv(4, 7), Flatten(), Dense(10)], "shrinks"),
    ],
)
def test_inconsistent_specs_rejected(layers, why):
    with pytest.raises(SpecError, match=why):
        NetworkSpec(layers, (3, 5, 5), 10)


def test_spec_text_round_trip():
    spec = mini_a()
    assert NetworkSpec.from_text(spec.to_text()) == spec
    text = "input c=1 h=8 w=8\nclasses n=2\nconv out=4 k=3 p=1  # comment\nrelu\nmaxpool k=2\nflatten\ndense out=2\n"
    parsed = NetworkSpec.from_text(text)
    assert parsed.layers[2] == MaxPool(2, 2)
    assert parsed.layers[0] == Conv(4, 3, 1, 1)


@pytest.mark.parametrize(
    "text,line",
    [
        ("input c=1 h=8 w=8\nclasses n=2\nconv k=3\n", 3),
        ("input c=1 h=8 w=8\nclasses n=2\nconv out=x k=3\n", 3),
        ("input c=1 h=8 w=8\npool k=2\n", 2),
        ("input c=1 h=8 w=8\nclasses n=2\nrelu extra=1\n", 3),
    ],
)
def test_spec_text_errors_name_the_line(text, line):
    with pytest.raises(SpecError, match=f"line {line}"):
        NetworkSpec.from_text(text)


# widening


def test_widen_third_layer_by_four():
    net = build_network(mini_a(), 0)
    wide = widen_layer(net, 2, 4, 1)
    assert wide.census == [16, 32, 256, 32]
    assert wide.params[6].weight.shape == (256, 32, 3, 3)
    assert wide.params[8].weight.shape == (32, 256, 3, 3)
    # original filters and input slices are kept
    assert np.array_equal(wide.params[6].weight[:64], net.params[6].weight)
    assert np.array_equal(wide.params[8].weight[:, :64], net.params[8].weight)
    assert logits(wide, images(2)).shape == (2, 10)


@pytest.mark.parametrize("factor", [1, 0, 2.5])
def test_widen_rejects_bad_factor(factor):
    with pytest.raises(ValueError):
        widen_layer(build_network(mini_a(), 0), 2, factor, 1)


def test_widen_rejects_non_conv_index():
    with pytest.raises(SpecError):
        widen_layer(build_network(mini_a(), 0), 4, 2, 1)


def test_widen_last_conv_extends_dense_blocks():
    net = build_network(mini_a(), 0)
    wide = widen_layer(net, 3, 2, 1)
    assert wide.params[12].weight.shape == (64, 64 * 4)


@pytest.mark.parametrize("layer", [0, 1, 2, 3])
def test_widen_zero_outgoing_then_remove_recovers_function(layer):
    net = build_network(mini_a(), 5)
    old = net.census[layer]
    wide = widen_layer(net, layer, 4, 6, outgoing="zero")
    x = images(4, seed=1)
    assert np.array_equal(logits(wide, x, ordered=True), logits(net, x, ordered=True))
    # BLAS blocks the longer reduction differently, so only near-equality there
    assert np.allclose(logits(wide, x), logits(net, x), rtol=0, atol=1e-12)
    back = remove_filters(wide, layer, range(old, 4 * old))
    assert back.spec == net.spec
    assert all(np.array_equal(a, b) for a, b in zip(back.parameters(), net.parameters()))
    assert np.array_equal(logits(back, x), logits(net, x))


# removal


def test_remove_dead_filter_keeps_function():
    net = build_network(mini_a(), 7)
    params = list(net.params)
    w = params[3].weight.copy()
    w[:, 5] = 0.0  # conv 2 reads nothing from conv 1's filter 5
    params[3] = LayerParams(w, params[3].bias)
    net = Network(net.spec, params)
    x = images(4, seed=2)
    pruned = remove_filters(net, 0, [5])
    assert np.max(np.abs(logits(pruned, x, ordered=True) - logits(net, x, ordered=True))) == 0.0
    assert np.allclose(logits(pruned, x), logits(net, x), rtol=0, atol=1e-12)


def test_remove_dead_filter_before_dense_keeps_function():
    net = build_network(mini_a(), 8)
    params = list(net.params)
    w = params[12].weight.copy()
    w[:, 4 * 3 : 4 * 4] = 0.0  # channel 3 of the last conv, a 2x2 block
    params[12] = LayerParams(w, params[12].bias)
    net = Network(net.spec, params)
    x = images(4, seed=3)
    pruned = remove_filters(net, 3, [3])
    assert np.max(np.abs(logits(pruned, x, ordered=True) - logits(net, x, ordered=True))) == 0.0
    assert np.allclose(logits(pruned, x), logits(net, x), rtol=0, atol=1e-12)
    assert pruned.params[12].weight.shape == (64, 31 * 4)


@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_remove_parameter_count_closed_form(data):
    spec = mini_a()
    layer = data.draw(st.integers(0, 3))
    c = spec.census[layer]
    ids = sorted(data.draw(st.sets(st.integers(0, c - 1), min_size=1, max_size=c - 1)))
    net = build_network(spec, 0)
    pruned = remove_filters(net, layer, ids)
    k = len(ids)
    cin = ([3] + spec.census)[layer]
    # own weights + bias, and the consumer's input slices
    own = k * (cin * 9 + 1)
    consumer = spec.census[layer + 1] * 9 * k if layer < 3 else 64 * 4 * k
    assert net.num_parameters - pruned.num_parameters == own + consumer
    assert pruned.census[layer] == c - k


def test_remove_keeps_order_and_bits():
    net = build_network(mini_a(), 9)
    pruned = remove_filters(net, 1, [0, 31])
    assert np.array_equal(pruned.params[3].weight, net.params[3].weight[1:31])
    assert np.array_equal(pruned.params[6].weight, net.params[6].weight[:, 1:31])
    assert net.census == [16, 32, 64, 32]  # input untouched


def test_remove_matches_masked_network():
    net = build_network(mini_a(), 10)
    ids = [2, 9, 40]
    params = list(net.params)
    w, b = params[6].weight.copy(), params[6].bias.copy()
    w[ids] = 0.0
    b[ids] = 0.0
    params[6] = LayerParams(w, b)
    masked = Network(net.spec, params)
    x = images(3, seed=4)
    assert np.allclose(logits(remove_filters(net, 2, ids), x), logits(masked, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("ids", [[3, 1], [1, 1], [-1], [32], list(range(32))])
def test_remove_rejects_bad_ids(ids):
    with pytest.raises(ValueError):
        remove_filters(build_network(mini_a(), 0), 1, ids)
