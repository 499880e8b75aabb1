"""Realized networks and structural surgery (widening, filter removal).

Surgery never mutates its input: every operation returns a new
:class:`Network` whose untouched weights are copies of the originals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spec import Conv, Dense, Flatten, MaxPool, NetworkSpec, ReLU, SpecError


@dataclass(frozen=True)
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    # aligned with spec.layers; None for parameter-free layers
    params: tuple[LayerParams | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if len(self.params) != len(self.spec.layers):
            raise SpecError("params must align with spec.layers")
        for i, (layer, shape) in enumerate(zip(self.spec.layers, expected_shapes(self.spec))):
            p = self.params[i]
            if shape is None:
                if p is not None:
                    raise SpecError(f"layer {i} ({type(layer).__name__}) takes no parameters")
                continue
            if p is None or p.weight.shape != shape[0] or p.bias.shape != shape[1]:
                got = None if p is None else (p.weight.shape, p.bias.shape)
                raise SpecError(f"layer {i}: parameter shapes {got} do not match spec {shape}")

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W, b, W, b, ...] over weight-bearing layers."""
        out = []
        for p in self.params:
            if p is not None:
                out += [p.weight, p.bias]
        return out

    def with_parameters(self, arrays) -> "Network":
        it = iter(arrays)
        params = [None if p is None else LayerParams(next(it), next(it)) for p in self.params]
        return Network(self.spec, tuple(params))

    def copy(self) -> "Network":
        return self.with_parameters([a.copy() for a in self.parameters()])

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters())

    @property
    def census(self) -> list[int]:
        return self.spec.census


def expected_shapes(spec: NetworkSpec):
    """(weight shape, bias shape) per layer, or None for parameter-free layers."""
    shapes = spec.shapes()
    out = []
    prev = spec.input_shape
    for layer, shape in zip(spec.layers, shapes):
        if isinstance(layer, Conv):
            out.append(((layer.out, prev[0], layer.k, layer.k), (layer.out,)))
        elif isinstance(layer, Dense):
            out.append(((layer.out, prev[0]), (layer.out,)))
        else:
            out.append(None)
        prev = shape
    return out


def parameter_count(spec: NetworkSpec) -> int:
    total = 0
    for s in expected_shapes(spec):
        if s is not None:
            total += int(np.prod(s[0])) + s[1][0]
    return total


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_network(spec: NetworkSpec, init_seed: int) -> Network:
    """He (fan-in) normal weights, zero biases."""
    rng = np.random.default_rng(init_seed)
    params = []
    for s in expected_shapes(spec):
        if s is None:
            params.append(None)
            continue
        w_shape, b_shape = s
        fan_in = int(np.prod(w_shape[1:]))
        params.append(LayerParams(_he(rng, w_shape, fan_in), np.zeros(b_shape)))
    return Network(spec, tuple(params))


def _consumer(spec: NetworkSpec, conv_index: int) -> tuple[int, int, int]:
    """Next weight-bearing layer after a conv.

    Returns (position, block, consumer_position): ``block`` is the number of
    input columns each channel occupies in the consumer (1 for a conv, H*W
    for a dense layer right after flatten).
    """
    positions = spec.conv_positions
    if not 0 <= conv_index < len(positions):
        raise SpecError(f"conv layer index {conv_index} out of range (have {len(positions)})")
    pos = positions[conv_index]
    shapes = spec.shapes()
    block = 1
    for j in range(pos + 1, len(spec.layers)):
        layer = spec.layers[j]
        if isinstance(layer, Conv):
            return pos, block, j
        if isinstance(layer, Flatten):
            _, h, w = shapes[j - 1]
            block = h * w
        elif isinstance(layer, Dense):
            if block == 1 and not isinstance(spec.layers[j - 1], Flatten):
                raise SpecError(f"dense layer {j} does not directly follow flatten")
            return pos, block, j
        elif not isinstance(layer, (ReLU, MaxPool)):
            raise SpecError(f"cannot route channels through {layer!r}")
    raise SpecError(f"conv layer {conv_index} has no consumer layer")


def _channel_columns(channels, block: int) -> np.ndarray:
    channels = np.asarray(channels, dtype=np.int64)
    return (channels[:, None] * block + np.arange(block)[None, :]).ravel()


def widen_layer(
    network: Network,
    layer_index: int,
    factor: int,
    init_seed: int,
    outgoing: str = "random",
) -> Network:
    """Multiply a conv layer's filter count by ``factor``.

    New filters are appended after the existing ones and He-initialized;
    the consumer's new input slices are He-initialized too, or zeroed with
    ``outgoing="zero"`` (which leaves the network function unchanged).
    """
    if int(factor) != factor or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor}")
    if outgoing not in ("random", "zero"):
        raise ValueError("outgoing must be 'random' or 'zero'")
    spec = network.spec
    pos, block, cpos = _consumer(spec, layer_index)
    rng = np.random.default_rng(init_seed)
    old = spec.layers[pos].out
    added = old * (factor - 1)
    new_spec = spec.with_conv_out(layer_index, old * factor)

    params = list(network.params)
    p = params[pos]
    fan_in = int(np.prod(p.weight.shape[1:]))
    params[pos] = LayerParams(
        np.concatenate([p.weight, _he(rng, (added,) + p.weight.shape[1:], fan_in)]),
        np.concatenate([p.bias, np.zeros(added)]),
    )
    c = params[cpos]
    if c.weight.ndim == 4:
        extra_shape = (c.weight.shape[0], added) + c.weight.shape[2:]
        new_fan_in = old * factor * c.weight.shape[2] * c.weight.shape[3]
        axis = 1
    else:
        extra_shape = (c.weight.shape[0], added * block)
        new_fan_in = old * factor * block
        axis = 1
    extra = np.zeros(extra_shape) if outgoing == "zero" else _he(rng, extra_shape, new_fan_in)
    params[cpos] = LayerParams(np.concatenate([c.weight, extra], axis=axis), c.bias.copy())
    out = Network(new_spec, tuple(params))
    return out.with_parameters([a.copy() for a in out.parameters()])


def remove_filters(network: Network, layer_index: int, filter_ids) -> Network:
    """Physically drop output channels of a conv layer and their downstream inputs."""
    spec = network.spec
    pos, block, cpos = _consumer(spec, layer_index)
    count = spec.layers[pos].out
    ids = [int(i) for i in filter_ids]
    if ids != sorted(set(ids)):
        raise ValueError("filter_ids must be sorted and unique")
    if ids and (ids[0] < 0 or ids[-1] >= count):
        raise ValueError(f"filter ids {ids} out of range for layer with {count} filters")
    if len(ids) >= count:
        raise ValueError(f"removing {len(ids)} of {count} filters would empty conv layer {layer_index}")
    keep = np.setdiff1d(np.arange(count), ids)

    params = [None if p is None else LayerParams(p.weight.copy(), p.bias.copy()) for p in network.params]
    p = params[pos]
    params[pos] = LayerParams(p.weight[keep].copy(), p.bias[keep].copy())
    c = params[cpos]
    if c.weight.ndim == 4:
        params[cpos] = LayerParams(c.weight[:, keep].copy(), c.bias)
    else:
        params[cpos] = LayerParams(c.weight[:, _channel_columns(keep, block)].copy(), c.bias)
    return Network(spec.with_conv_out(layer_index, len(keep)), tuple(params))
