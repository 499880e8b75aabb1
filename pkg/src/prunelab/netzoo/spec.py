"""Layer descriptors and the plain-text network spec format.

One directive per line; ``#`` starts a comment::

    input c=3 h=32 w=32
    classes n=10
    conv out=16 k=3 s=1 p=1
    relu
    maxpool k=2 s=2
    flatten
    dense out=10

``input`` and ``classes`` must each appear once. Layer lines are applied
in order. Omitted ``s``/``p`` on conv default to 1 and 0; omitted ``s`` on
maxpool defaults to ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    out: int
    k: int
    s: int = 1
    p: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    s: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out: int


Layer = Union[Conv, ReLU, MaxPool, Flatten, Dense]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch) of every layer; raises SpecError on a broken chain."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        if not any(isinstance(l, Conv) for l in self.layers):
            raise SpecError("network needs at least one conv layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, MaxPool)):
                if len(shape) != 3:
                    raise SpecError(f"layer {i} ({type(layer).__name__}) needs a C,H,W input, got {shape}")
                c, h, w = shape
                if isinstance(layer, Conv):
                    if min(layer.out, layer.k, layer.s) < 1 or layer.p < 0:
                        raise SpecError(f"layer {i}: invalid conv parameters {layer}")
                    h = (h + 2 * layer.p - layer.k) // layer.s + 1
                    w = (w + 2 * layer.p - layer.k) // layer.s + 1
                    c = layer.out
                else:
                    if min(layer.k, layer.s) < 1:
                        raise SpecError(f"layer {i}: invalid maxpool parameters {layer}")
                    h = (h - layer.k) // layer.s + 1
                    w = (w - layer.k) // layer.s + 1
                if h < 1 or w < 1:
                    raise SpecError(f"layer {i} ({type(layer).__name__}) shrinks the feature map to {h}x{w}")
                shape = (c, h, w)
            elif isinstance(layer, Flatten):
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: flatten needs a C,H,W input")
                shape = (shape[0] * shape[1] * shape[2],)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise SpecError(f"layer {i}: dense before flatten (input shape {shape})")
                if layer.out < 1:
                    raise SpecError(f"layer {i}: dense out must be >= 1")
                shape = (layer.out,)
            elif not isinstance(layer, ReLU):
                raise SpecError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        if shape != (self.num_classes,):
            raise SpecError(f"network outputs {shape}, expected ({self.num_classes},)")
        return out

    @property
    def conv_positions(self) -> list[int]:
        """Positions in ``layers`` of the conv layers, in order."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv)]

    @property
    def census(self) -> list[int]:
        """Filter count of every conv layer."""
        return [self.layers[i].out for i in self.conv_positions]

    def with_conv_out(self, conv_index: int, out: int) -> "NetworkSpec":
        pos = self.conv_positions[conv_index]
        layers = list(self.layers)
        layers[pos] = replace(layers[pos], out=out)
        return replace(self, layers=tuple(layers))

    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input c={c} h={h} w={w}", f"classes n={self.num_classes}"]
        for layer in self.layers:
            if isinstance(layer, Conv):
                lines.append(f"conv out={layer.out} k={layer.k} s={layer.s} p={layer.p}")
            elif isinstance(layer, MaxPool):
                lines.append(f"maxpool k={layer.k} s={layer.s}")
            elif isinstance(layer, Dense):
                lines.append(f"dense out={layer.out}")
            else:
                lines.append(type(layer).__name__.lower())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        layers: list[Layer] = []
        input_shape = num_classes = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            word, *pairs = line.split()
            try:
                kv = dict(p.split("=", 1) for p in pairs)
                kv = {k: int(v) for k, v in kv.items()}
            except ValueError:
                raise SpecError(f"line {lineno}: expected key=integer pairs, got {line!r}")
            try:
                if word == "input":
                    input_shape = (kv.pop("c"), kv.pop("h"), kv.pop("w"))
                elif word == "classes":
                    num_classes = kv.pop("n")
                elif word == "conv":
                    layers.append(Conv(kv.pop("out"), kv.pop("k"), kv.pop("s", 1), kv.pop("p", 0)))
                elif word == "maxpool":
                    k = kv.pop("k")
                    layers.append(MaxPool(k, kv.pop("s", k)))
                elif word == "dense":
                    layers.append(Dense(kv.pop("out")))
                elif word == "relu":
                    layers.append(ReLU())
                elif word == "flatten":
                    layers.append(Flatten())
                else:
                    raise SpecError(f"line {lineno}: unknown directive {word!r}")
            except KeyError as exc:
                raise SpecError(f"line {lineno}: {word} is missing {exc.args[0]}=")
            if kv:
                raise SpecError(f"line {lineno}: unexpected keys {sorted(kv)} for {word}")
        if input_shape is None or num_classes is None:
            raise SpecError("spec needs both an 'input' and a 'classes' line")
        return cls(tuple(layers), input_shape, num_classes)


def _vgg_like(widths, pools, hidden, input_shape, num_classes) -> NetworkSpec:
    layers: list[Layer] = []
    for width, pool in zip(widths, pools):
        layers += [Conv(width, 3, 1, 1), ReLU()]
        if pool:
            layers.append(MaxPool(2, 2))
    layers += [Flatten(), Dense(hidden), ReLU(), Dense(num_classes)]
    return NetworkSpec(tuple(layers), input_shape, num_classes)


def mini_a(input_shape=(3, 32, 32), num_classes: int = 10) -> NetworkSpec:
    """AlexNet stand-in: 4 conv layers (16, 32, 64, 32 filters) and 2 dense layers.

    The first conv has stride 2, as AlexNet's first layer downsamples hard.
    """
    layers: list[Layer] = [
        Conv(16, 3, 2, 1), ReLU(), MaxPool(2, 2),
        Conv(32, 3, 1, 1), ReLU(), MaxPool(2, 2),
        Conv(64, 3, 1, 1), ReLU(),
        Conv(32, 3, 1, 1), ReLU(), MaxPool(2, 2),
        Flatten(), Dense(64), ReLU(), Dense(num_classes),
    ]  # fmt: skip
    return NetworkSpec(tuple(layers), input_shape, num_classes)


def mini_v(input_shape=(3, 32, 32), num_classes: int = 10) -> NetworkSpec:
    """VGG stand-in: 8 conv layers in four pooled blocks and 2 dense layers."""
    widths = (16, 16, 32, 32, 64, 64, 64, 64)
    pools = (False, True, False, True, False, True, False, True)
    return _vgg_like(widths, pools, 64, input_shape, num_classes)


ARCHITECTURES = {"mini-a": mini_a, "mini-v": mini_v}
