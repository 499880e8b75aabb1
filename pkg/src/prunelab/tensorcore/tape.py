"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records each primitive as it runs; :meth:`Tape.backward`
walks the records in reverse and accumulates gradients into the
:class:`Var` slots. Arrays are float64; image tensors are NHWC inside the
tape (the engine converts from and to NCHW at its boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class Var:
    """A value slot on the tape, with room for its gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.value.shape} for {self.name}")
        self.grad = g if self.grad is None else self.grad + g


@dataclass
class Record:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def check_finite(x: np.ndarray, what: str):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class Tape:
    """Ordered record of primitives. ``record=False`` gives a forward-only pass.

    ``ordered=True`` makes conv2d and dense forward passes accumulate input
    channels one at a time in index order instead of calling BLAS. It is much
    slower, but the result no longer depends on how many input channels
    there are, so dropping a channel with all-zero weights leaves every output
    bit-identical.
    """

    record: bool = True
    ordered: bool = False
    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def _push(self, op, inputs, out_value, backward) -> Var:
        out = Var(out_value, op)
        if self.record:
            self.records.append(Record(op, inputs, out, backward))
        return out

    def backward(self, loss: Var, seed: float = 1.0):
        if self.consumed:
            raise TapeConsumedError("backward already ran on this tape")
        if not self.record:
            raise TapeConsumedError("tape was created with record=False")
        self.consumed = True
        loss.grad = np.full(loss.value.shape, seed, dtype=np.float64)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for var, gin in zip(rec.inputs, rec.backward(g)):
                if gin is not None:
                    var._accumulate(gin)

    # primitives

    def conv2d(self, x: Var, w: Var, b: Var, stride: int = 1, padding: int = 0) -> Var:
        """Cross-correlation of an NHWC input with an (O, C, k, k) weight."""
        X, W = x.value, w.value
        if X.ndim != 4 or W.ndim != 4 or X.shape[3] != W.shape[1]:
            raise ShapeError(f"conv2d: input {X.shape} (NHWC) incompatible with weight {W.shape}")
        B, H, Wd, C = X.shape
        O, k = W.shape[0], W.shape[2]
        p, s = padding, stride
        xp = np.pad(X, ((0, 0), (p, p), (p, p), (0, 0))) if p else X
        if xp.shape[1] < k or xp.shape[2] < k:
            raise ShapeError(f"conv2d: padded input {xp.shape[1:3]} smaller than kernel {k}")
        ho, wo = (xp.shape[1] - k) // s + 1, (xp.shape[2] - k) // s + 1
        cols = _im2col(xp, k, s, ho, wo)
        # rows of wmat ordered (di, dj, c) to match the im2col columns
        wmat = W.transpose(2, 3, 1, 0).reshape(k * k * C, O)
        if self.ordered:
            out = np.zeros((B, ho, wo, O))
            for c in range(C):
                for di in range(k):
                    for dj in range(k):
                        tap = xp[:, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s, c]
                        out += tap[..., None] * W[:, c, di, dj]
            out += b.value
        else:
            out = (cols @ wmat + b.value).reshape(B, ho, wo, O)
        needs_input_grad = x.name != "input"

        def backward(g):
            gmat = g.reshape(B * ho * wo, O)
            gw = (cols.T @ gmat).reshape(k, k, C, O).transpose(3, 2, 0, 1)
            gb = gmat.sum(axis=0)
            if not needs_input_grad:
                return None, gw, gb
            # input gradient as a full correlation with the flipped kernel
            hp, wp = xp.shape[1], xp.shape[2]
            gp = np.zeros((B, hp + k - 1, wp + k - 1, O))
            gp[:, k - 1 : k - 1 + (ho - 1) * s + 1 : s, k - 1 : k - 1 + (wo - 1) * s + 1 : s] = g
            gp = gp[:, p : p + H + k - 1, p : p + Wd + k - 1]
            flipped = W[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * O, C)
            gx = (_im2col(gp, k, 1, H, Wd) @ flipped).reshape(B, H, Wd, C)
            return gx, gw, gb

        return self._push("conv2d", (x, w, b), out, backward)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        out = np.where(mask, x.value, 0.0)
        return self._push("relu", (x,), out, lambda g: (g * mask,))

    def maxpool2d(self, x: Var, kernel: int, stride: int) -> Var:
        """Max-pool over NHWC; ties go to the lowest row-major index in the window."""
        X = x.value
        B, H, W, C = X.shape
        k = kernel
        ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool2d: input {X.shape[1:3]} smaller than kernel {k}")
        if k == stride:
            flat = (
                X[:, : ho * k, : wo * k]
                .reshape(B, ho, k, wo, k, C)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(B, ho, wo, k * k, C)
            )
        else:
            win = sliding_window_view(X, (k, k), axis=(1, 2))[:, ::stride, ::stride]
            flat = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, ho, wo, k * k, C)
        arg = flat.argmax(axis=3)[:, :, :, None]
        out = np.take_along_axis(flat, arg, axis=3)[:, :, :, 0]

        def backward(g):
            routed = np.zeros((B, ho, wo, k * k, C))
            np.put_along_axis(routed, arg, g[:, :, :, None], axis=3)
            gx = np.zeros(X.shape)
            if k == stride:
                routed = routed.reshape(B, ho, wo, k, k, C).transpose(0, 1, 3, 2, 4, 5)
                gx[:, : ho * k, : wo * k] = routed.reshape(B, ho * k, wo * k, C)
            else:
                routed = routed.reshape(B, ho, wo, k, k, C)
                for di in range(k):
                    for dj in range(k):
                        gx[:, di : di + (ho - 1) * stride + 1 : stride, dj : dj + (wo - 1) * stride + 1 : stride] += routed[:, :, :, di, dj]
            return (gx,)

        return self._push("maxpool2d", (x,), out, backward)

    def flatten(self, x: Var) -> Var:
        """NHWC to (B, C*H*W) in channel-major order, as an NCHW flatten would give."""
        B, H, W, C = x.value.shape
        out = x.value.transpose(0, 3, 1, 2).reshape(B, -1)
        return self._push("flatten", (x,), out, lambda g: (g.reshape(B, C, H, W).transpose(0, 2, 3, 1),))

    def dense(self, x: Var, w: Var, b: Var) -> Var:
        X, W = x.value, w.value
        if X.ndim != 2 or X.shape[1] != W.shape[1]:
            raise ShapeError(f"dense: input {X.shape} incompatible with weight {W.shape}")
        if self.ordered:
            out = np.zeros((X.shape[0], W.shape[0]))
            for j in range(X.shape[1]):
                out += X[:, j, None] * W[None, :, j]
            out += b.value
        else:
            out = X @ W.T + b.value

        def backward(g):
            return g @ W, g.T @ X, g.sum(axis=0)

        return self._push("dense", (x, w, b), out, backward)

    def scale(self, x: Var, factor: float) -> Var:
        return self._push("scale", (x,), x.value * factor, lambda g: (g * factor,))

    def softmax_cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        Z = logits.value
        B = Z.shape[0]
        shifted = Z - Z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logsum - shifted[np.arange(B), labels]))

        def backward(g):
            probs = np.exp(shifted - logsum[:, None])
            probs[np.arange(B), labels] -= 1.0
            return (probs * (g / B),)

        return self._push("softmax_cross_entropy", (logits,), np.array(loss), backward)


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B, H, W, C) -> (B*ho*wo, k*k*C), columns ordered (di, dj, c)."""
    B, C = xp.shape[0], xp.shape[3]
    taps = [
        xp[:, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s]
        for di in range(k)
        for dj in range(k)
    ]
    return np.concatenate(taps, axis=3).reshape(B * ho * wo, k * k * C)
