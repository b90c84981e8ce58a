"""Binary model and checkpoint files.

Model layout (integers u32, little-endian)::

    b"REAN" | version | D | H | n_layers | n_arrays
    | per array: len(name) | name | ndim | dims...
    | all arrays as float32, in manifest order

``n_layers == 0`` marks a scalar quality MLP, in which case ``H`` is the MLP
hidden width. A checkpoint appends an optimizer block::

    b"ADAM" | step (u32) | lr, beta1, beta2, epsilon (f64)
    | first moments then second moments, float64, in manifest order
"""

import struct
from pathlib import Path

import numpy as np

from .aggregator import FORMAT_VERSION, AggregatorParams, QualityMLP
from .training import AdamState

MODEL_MAGIC = b"REAN"
ADAM_MAGIC = b"ADAM"


class ModelFormatError(ValueError):
    pass


def _manifest_bytes(arrays):
    out = struct.pack("<I", len(arrays))
    for name, a in arrays.items():
        nb = name.encode("ascii")
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
    return out


def encode_model(params):
    arrays = params.named_arrays()
    if isinstance(params, QualityMLP):
        n_layers, hidden = 0, params.hidden
    else:
        n_layers, hidden = len(params.layers), params.hidden
    head = MODEL_MAGIC + struct.pack("<IIII", FORMAT_VERSION, params.dim, hidden, n_layers)
    data = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    return head + _manifest_bytes(arrays) + data


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated model file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals if count > 1 else vals[0]


def _decode_model(reader):
    if reader.take(4, "magic") != MODEL_MAGIC:
        raise ModelFormatError("bad model magic")
    version, dim, hidden, n_layers = reader.u32("header", 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    shapes = {}
    for _ in range(reader.u32("array count")):
        name = reader.take(reader.u32("name length"), "name").decode("ascii")
        ndim = reader.u32("ndim")
        shapes[name] = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, "dims"))
    arrays = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(reader.take(4 * n, name), dtype="<f4").reshape(shape).astype(np.float64)
    params = QualityMLP.from_named_arrays(arrays) if n_layers == 0 else AggregatorParams.from_named_arrays(arrays)
    if params.dim != dim or params.hidden != hidden:
        raise ModelFormatError(f"header says D={dim}, H={hidden} but arrays give D={params.dim}, H={params.hidden}")
    return params, shapes


def decode_model(buf):
    reader = _Reader(bytes(buf))
    params, _ = _decode_model(reader)
    return params


def save_model(path, params):
    Path(path).write_bytes(encode_model(params))


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return decode_model(path.read_bytes())


def encode_checkpoint(params, state):
    arrays = params.named_arrays()
    out = encode_model(params) + ADAM_MAGIC
    out += struct.pack("<I4d", state.step, state.lr, state.beta1, state.beta2, state.epsilon)
    for moments in (state.m, state.v):
        for k, a in arrays.items():
            out += np.ascontiguousarray(moments.get(k, np.zeros_like(a)), dtype="<f8").tobytes()
    return out


def decode_checkpoint(buf):
    reader = _Reader(bytes(buf))
    params, shapes = _decode_model(reader)
    if reader.take(4, "optimizer magic") != ADAM_MAGIC:
        raise ModelFormatError("bad optimizer block magic")
    step = reader.u32("step")
    lr, b1, b2, eps = struct.unpack("<4d", reader.take(32, "optimizer header"))
    moments = []
    for _ in range(2):
        d = {}
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            d[name] = np.frombuffer(reader.take(8 * n, name), dtype="<f8").reshape(shape).copy()
        moments.append(d)
    return params, AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step=step, m=moments[0], v=moments[1])
