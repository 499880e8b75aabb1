from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..netzoo.network import Network
from .engine import NetTape, _run_layers, backward, forward
from .tape import Var


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, str, int]  # (layer position, "weight"|"bias", flat index)
    per_layer: dict[int, float]
    checked: int
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _suffix_loss(network: Network, start: int, x_in: np.ndarray, labels: np.ndarray) -> float:
    tape = NetTape(record=False)
    tape.param_vars = [None] * len(network.params)
    out = _run_layers(tape, network, Var(x_in), start)
    return float(tape.softmax_cross_entropy(out, labels).value)


def grad_check(
    network: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare every parameter gradient with a central difference.

    Each perturbed loss reruns only the layers from the perturbed one
    onward; the prefix output is computed once per layer.
    """
    _, tape, _ = forward(network, batch, labels)
    grads = backward(tape)
    net = network.copy()
    layers = net.spec.layers
    labels = np.asarray(labels)

    x = np.asarray(batch, dtype=np.float64).transpose(0, 2, 3, 1)
    prefix_tape = NetTape(record=False)
    prefix_tape.param_vars = [None] * len(layers)
    worst_err, worst = -1.0, (-1, "", -1)
    per_layer = {}
    checked = 0
    for pos in range(len(layers)):
        p = net.params[pos]
        if p is not None:
            layer_max = 0.0
            for kind, arr, g in (("weight", p.weight, grads.params[pos].weight),
                                 ("bias", p.bias, grads.params[pos].bias)):  # fmt: skip
                flat = arr.reshape(-1)
                numeric = np.empty(flat.size)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    up = _suffix_loss(net, pos, x, labels)
                    flat[j] = orig - step
                    down = _suffix_loss(net, pos, x, labels)
                    flat[j] = orig
                    numeric[j] = (up - down) / (2 * step)
                err = relative_error(g.reshape(-1), numeric, floor)
                checked += flat.size
                j = int(err.argmax())
                layer_max = max(layer_max, float(err[j]))
                if err[j] > worst_err:
                    worst_err, worst = float(err[j]), (pos, kind, j)
            per_layer[pos] = layer_max
        # advance the cached prefix through this layer
        x = _run_layers(prefix_tape, net, Var(x), pos, pos + 1).value
    return GradCheckReport(worst_err, worst, per_layer, checked, tolerance, step)
