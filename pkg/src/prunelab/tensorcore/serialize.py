"""Binary weight files.

Layout (little-endian)::

    b"PLAB"  u16 version  u32 layer_count
    per weight-bearing layer, in network order:
        u8 weight_ndim, u32 dims...   u8 bias_ndim, u32 dims...
        f64 weight values (row-major), f64 bias values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..netzoo.network import Network

MAGIC = b"PLAB"
VERSION = 1


class WeightFileError(ValueError):
    pass


def _shape_header(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def weights_to_bytes(network: Network) -> bytes:
    layers = [p for p in network.params if p is not None]
    parts = [MAGIC, struct.pack("<HI", VERSION, len(layers))]
    for p in layers:
        parts.append(_shape_header(p.weight.shape) + _shape_header(p.bias.shape))
        parts.append(np.ascontiguousarray(p.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def weights_from_bytes(data: bytes, network: Network) -> Network:
    """Fill ``network``'s architecture with the weights stored in ``data``."""
    if data[:4] != MAGIC:
        raise WeightFileError("not a PLAB weight file (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported PLAB version {version}")
    offset = 10

    def read_shape():
        nonlocal offset
        (ndim,) = struct.unpack_from("<B", data, offset)
        shape = struct.unpack_from(f"<{ndim}I", data, offset + 1)
        offset += 1 + 4 * ndim
        return shape

    def read_values(shape):
        nonlocal offset
        size = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * size > len(data):
            raise WeightFileError(f"weight file truncated at byte {offset}")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * size
        return arr

    arrays = []
    try:
        for _ in range(count):
            w_shape, b_shape = read_shape(), read_shape()
            arrays += [read_values(w_shape), read_values(b_shape)]
    except struct.error:
        raise WeightFileError(f"weight file truncated at byte {offset}")
    if offset != len(data):
        raise WeightFileError(f"{len(data) - offset} trailing bytes after the last layer")
    expected = network.parameters()
    if len(arrays) != len(expected) or any(a.shape != e.shape for a, e in zip(arrays, expected)):
        raise WeightFileError("stored shapes do not match the network spec")
    return network.with_parameters(arrays)


def save_weights(network: Network, path) -> None:
    Path(path).write_bytes(weights_to_bytes(network))


def load_weights(path, network: Network) -> Network:
    return weights_from_bytes(Path(path).read_bytes(), network)
