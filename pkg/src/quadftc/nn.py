"""Small dense-network engine: batched forward/backward, Adam, weight files.

Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b`` on a
``(batch, in)`` input. Arithmetic follows the parameter dtype: float64 for
gradient checks, float32 for training throughput. Files hold float32.

Weight file layout (all little-endian)::

    b"FTCW"  u32 version  u32 network_count
    per network:  u32 layer_count
        per layer: u32 rows  u32 cols  u8 activation
                   rows*cols f32 weights (row-major), rows f32 biases
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDENTITY, TANH, SOFTMAX = 0, 1, 2
ACTIVATION_NAMES = {IDENTITY: "identity", TANH: "tanh", SOFTMAX: "softmax"}

MAGIC = b"FTCW"
VERSION = 1


class WeightFileError(ValueError):
    code = "weights"


class BadMagicError(WeightFileError):
    code = "bad-magic"


class VersionMismatchError(WeightFileError):
    code = "version-mismatch"


class ShapeMismatchError(WeightFileError):
    code = "shape-mismatch"


class TruncatedFileError(WeightFileError):
    code = "truncated"


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    z = z.astype(np.result_type(z.dtype, np.float32), copy=False)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: int = TANH


class Mlp:
    """Stack of affine layers; tanh on hidden layers, chosen output activation."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ShapeMismatchError(f"layer widths {prev.W.shape} -> {nxt.W.shape} do not chain")
        self.layers = layers

    @classmethod
    def init(
        cls,
        widths: list[int],
        out_act: int,
        rng: np.random.Generator,
        final_scale: float = 1.0,
        dtype: type = np.float64,
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        layers = []
        n = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if i == n - 1:
                W *= final_scale
            layers.append(Layer(W.astype(dtype), np.zeros(fan_out, dtype=dtype), out_act if i == n - 1 else TANH))
        return cls(layers)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].W.dtype

    def astype(self, dtype: type) -> "Mlp":
        """Copy with parameters (and therefore arithmetic) in ``dtype``."""
        return Mlp([Layer(l.W.astype(dtype), l.b.astype(dtype), l.act) for l in self.layers])

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].W.shape[1]] + [layer.W.shape[0] for layer in self.layers]

    def param_count(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatchError(f"input width {x.shape[-1]} != {self.widths[0]}")
        cache = [x]
        h = x
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            if layer.act == TANH:
                h = np.tanh(z)
            elif layer.act == SOFTMAX:
                h = softmax(z)
            else:
                h = z
            cache.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(dy * y)`` w.r.t. the parameters and the input.

        Parameter gradients are summed over the batch and ordered like
        :meth:`params`.
        """
        if len(cache) != len(self.layers) + 1:
            raise ShapeMismatchError("cache does not belong to this network")
        dy = np.asarray(dy, dtype=self.dtype)
        if dy.shape != cache[-1].shape:
            raise ShapeMismatchError(f"dy shape {dy.shape} != output shape {cache[-1].shape}")
        grads: list[np.ndarray] = []
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            out = cache[i + 1]
            if layer.act == TANH:
                g = g * (1.0 - out * out)
            elif layer.act == SOFTMAX:
                g = out * (g - np.sum(g * out, axis=-1, keepdims=True))
            inp = cache[i]
            if g.ndim == 1:
                dW = np.outer(g, inp)
                db = g.copy()
            else:
                dW = g.T @ inp
                db = g.sum(axis=0)
            grads = [dW, db] + grads
            g = g @ layer.W
        return grads, g


class Adam:
    """Adam over a flat list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8, max_grad_norm: float | None = 0.5):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> float:
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# -- serialization -----------------------------------------------------------


def save_weights(path: str | Path, nets: list[Mlp]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(nets))
    for net in nets:
        buf += struct.pack("<I", len(net.layers))
        for layer in net.layers:
            rows, cols = layer.W.shape
            buf += struct.pack("<IIB", rows, cols, layer.act)
            buf += np.ascontiguousarray(layer.W, dtype="<f4").tobytes()
            buf += np.ascontiguousarray(layer.b, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: str | Path, expected: list[list[int]] | None = None) -> list[Mlp]:
    """Read a weight file; ``expected`` optionally pins each network's widths."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError("not a weight file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader version {VERSION}")
    nets = []
    for _ in range(count):
        (n_layers,) = r.unpack("<I")
        layers = []
        for _ in range(n_layers):
            rows, cols, act = r.unpack("<IIB")
            if act not in ACTIVATION_NAMES:
                raise WeightFileError(f"unknown activation code {act}")
            W = np.frombuffer(r.take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
            b = np.frombuffer(r.take(4 * rows), dtype="<f4")
            layers.append(Layer(W.astype(np.float64), b.astype(np.float64), act))
        try:
            nets.append(Mlp(layers))
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(str(exc)) from None
    if r.pos != len(r.data):
        raise WeightFileError(f"{len(r.data) - r.pos} trailing bytes after last network")
    if expected is not None:
        got = [net.widths for net in nets]
        if got != [list(w) for w in expected]:
            raise ShapeMismatchError(f"network shapes {got} != expected {expected}")
    return nets
