"""Forward/backward passes of a :class:`~prunelab.netzoo.Network`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..netzoo.network import LayerParams, Network
from ..netzoo.spec import Conv, Dense, Flatten, MaxPool, ReLU
from .tape import NonFiniteError, ShapeError, Tape, Var, check_finite


@dataclass
class NetTape(Tape):
    """Tape of one network forward pass, with handles to its key slots."""

    loss: Var | None = None
    param_vars: list[tuple[Var, Var] | None] = field(default_factory=list)
    # one per conv layer: the ReLU output right after it (or the conv output)
    activation_vars: list[Var] = field(default_factory=list)


@dataclass
class Gradients:
    params: list[LayerParams | None]
    activations: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        out = []
        for p in self.params:
            if p is not None:
                out += [p.weight, p.bias]
        return out


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2) if a.ndim == 4 else a


def _check_batch(network: Network, batch: np.ndarray, labels: np.ndarray | None):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != network.spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {network.spec.input_shape}")
    check_finite(batch, "input batch")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (batch.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match batch size {batch.shape[0]}")
        if labels.min() < 0 or labels.max() >= network.spec.num_classes:
            raise ValueError(f"labels must lie in [0, {network.spec.num_classes})")
    return batch, labels


def _run_layers(tape: NetTape, network: Network, x: Var, start: int = 0, stop: int | None = None) -> Var:
    layers = network.spec.layers
    for i in range(start, len(layers) if stop is None else stop):
        layer = layers[i]
        p = network.params[i]
        if p is not None:
            w, b = Var(p.weight, f"w{i}"), Var(p.bias, f"b{i}")
            tape.param_vars[i] = (w, b)
        if isinstance(layer, Conv):
            x = tape.conv2d(x, w, b, layer.s, layer.p)
            tape.activation_vars.append(x)
        elif isinstance(layer, ReLU):
            x = tape.relu(x)
            if i > start and isinstance(layers[i - 1], Conv):
                tape.activation_vars[-1] = x
        elif isinstance(layer, MaxPool):
            x = tape.maxpool2d(x, layer.k, layer.s)
        elif isinstance(layer, Flatten):
            x = tape.flatten(x)
        elif isinstance(layer, Dense):
            x = tape.dense(x, w, b)
    return x


def forward(
    network: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    record: bool = True,
    loss_scale: float | None = None,
) -> tuple[float, NetTape, list[np.ndarray]]:
    """Mean softmax cross-entropy of ``batch``.

    Returns the loss, the tape for :func:`backward`, and the retained
    per-conv-layer activations.
    """
    batch, labels = _check_batch(network, batch, labels)
    tape = NetTape(record=record)
    tape.param_vars = [None] * len(network.params)
    logits = _run_layers(tape, network, Var(batch.transpose(0, 2, 3, 1), "input"))
    check_finite(logits.value, "logits")
    loss = tape.softmax_cross_entropy(logits, labels)
    if loss_scale is not None:
        loss = tape.scale(loss, loss_scale)
    tape.loss = loss
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError("loss is not finite")
    return value, tape, [_nchw(v.value) for v in tape.activation_vars]


def backward(tape: NetTape) -> Gradients:
    """Gradients of the recorded loss w.r.t. every parameter and conv activation."""
    tape.backward(tape.loss)
    params = []
    for pv in tape.param_vars:
        if pv is None:
            params.append(None)
            continue
        w, b = pv
        params.append(
            LayerParams(
                w.grad if w.grad is not None else np.zeros_like(w.value),
                b.grad if b.grad is not None else np.zeros_like(b.value),
            )
        )
    acts = [_nchw(v.grad if v.grad is not None else np.zeros_like(v.value)) for v in tape.activation_vars]
    return Gradients(params, acts)


def loss_and_grad(network: Network, batch, labels) -> tuple[float, Gradients]:
    loss, tape, _ = forward(network, batch, labels)
    return loss, backward(tape)


def logits(network: Network, batch: np.ndarray, ordered: bool = False) -> np.ndarray:
    """Forward pass without a loss; ``ordered`` selects the fixed-order kernels (see :class:`Tape`)."""
    batch, _ = _check_batch(network, batch, None)
    tape = NetTape(record=False, ordered=ordered)
    tape.param_vars = [None] * len(network.params)
    return _run_layers(tape, network, Var(batch.transpose(0, 2, 3, 1), "input")).value


def predict(network: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [logits(network, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    return float(np.mean(predict(network, x, batch_size) == y))


def mean_loss(network: Network, x: np.ndarray, y: np.ndarray) -> float:
    return forward(network, x, y, record=False)[0]
