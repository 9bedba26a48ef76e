"""Weight export and a single-precision inference path with a tanh lookup table.

Blob layout (little-endian): magic ``AMPCNN01``, u32 net count, then per net a
u32 layer count, per layer u32 rows and u32 cols followed by the f32 row-major
weights and f32 biases, and finally the net's f32 normalizers (input mean,
input scale, output mean, output scale).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .config import CartpoleParams
from .dynamics import wrap_angle
from .neural import Mlp

MAGIC = b"AMPCNN01"
LUT_SIZE = 2048
LUT_RANGE = 5.0


class BlobError(ValueError):
    pass


# ---------------------------------------------------------------- tanh table
def make_lut(n: int = LUT_SIZE, xmax: float = LUT_RANGE) -> np.ndarray:
    # integer numerators keep the grid exactly symmetric about 0
    grid = (2.0 * np.arange(n) - (n - 1)) * (xmax / (n - 1))
    return np.tanh(grid).astype(np.float32)


TANH_LUT = make_lut()


@njit(cache=True)
def _lut_tanh(x, lut, xmax):
    # odd by construction: interpolate on |x| and restore the sign
    a = abs(x)
    n = lut.shape[0]
    if a > xmax:
        r = np.float32(1.0)
    else:
        t = (a + xmax) * np.float32((n - 1) / (2.0 * xmax))
        i = int(t)
        if i > n - 2:
            i = n - 2
        f = t - np.float32(i)
        r = lut[i] + f * (lut[i + 1] - lut[i])
    return r if x >= 0 else -r


@njit(cache=True)
def _lut_tanh_array(x, lut, xmax):
    out = np.empty(x.shape[0], dtype=np.float32)
    for k in range(x.shape[0]):
        out[k] = _lut_tanh(x[k], lut, xmax)
    return out


def lut_tanh(x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float32))
    return _lut_tanh_array(x.ravel(), TANH_LUT, np.float32(LUT_RANGE)).reshape(x.shape)


def lut_error_scan(n_points: int = 10_000_000, span: float = 6.0, chunk: int = 1_000_000) -> float:
    """Max ``|lut(x) - tanh(x)|`` over a dense grid on ``[-span, span]``.

    Points just beyond the table ends are added explicitly; outside ``span``
    the error ``1 - tanh|x|`` only shrinks.
    """
    edges = np.array([np.nextafter(np.float32(LUT_RANGE), np.float32(np.inf)), LUT_RANGE], dtype=np.float32)
    edges = np.concatenate([edges, -edges])
    worst = float(np.max(np.abs(lut_tanh(edges).astype(float) - np.tanh(edges.astype(float)))))
    for start in range(0, n_points, chunk):
        k = np.arange(start, min(start + chunk, n_points))
        x = (-span + 2 * span * k / (n_points - 1)).astype(np.float32)
        err = np.abs(lut_tanh(x).astype(float) - np.tanh(x.astype(float)))
        worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------- blob
@dataclass
class EmbeddedNet:
    """One network in f32, weights packed into a single array."""

    params: np.ndarray  # f32, per layer W (row-major) then b
    shapes: np.ndarray  # int64 (L, 2): rows, cols
    offsets: np.ndarray  # int64 (L,): start of W in params
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray

    @classmethod
    def from_mlp(cls, net: Mlp) -> "EmbeddedNet":
        parts, shapes, offsets, k = [], [], [], 0
        for W, b in zip(net.weights, net.biases):
            offsets.append(k)
            shapes.append(W.shape)
            parts += [W.astype(np.float32).ravel(), b.astype(np.float32)]
            k += W.size + b.size
        f32 = lambda a: np.asarray(a, dtype=np.float32).copy()
        return cls(np.concatenate(parts), np.array(shapes, dtype=np.int64), np.array(offsets, dtype=np.int64),
                   f32(net.in_mean), f32(net.in_scale), f32(net.out_mean), f32(net.out_scale))

    def to_mlp(self) -> Mlp:
        weights, biases = [], []
        for (r, c), o in zip(self.shapes, self.offsets):
            weights.append(self.params[o: o + r * c].reshape(r, c).astype(float))
            biases.append(self.params[o + r * c: o + r * c + r].astype(float))
        return Mlp(weights, biases, self.in_mean.astype(float), self.in_scale.astype(float),
                   self.out_mean.astype(float), self.out_scale.astype(float))

    @property
    def width(self) -> int:
        return int(max(self.shapes[:, 0].max(), self.shapes[:, 1].max()))


def blob_size(nets) -> int:
    """Byte size of the blob for a list of networks (closed form from the shapes)."""
    size = len(MAGIC) + 4
    for net in nets:
        size += 4
        for W in net.weights:
            r, c = W.shape
            size += 8 + 4 * (r * c + r)
        size += 4 * 2 * (net.input_dim + net.output_dim)
    return size


def export(pi_nn: Mlp, grad_nn: Mlp, path) -> None:
    """Write both networks as single precision."""
    out = [MAGIC, struct.pack("<I", 2)]
    for net in (pi_nn, grad_nn):
        out.append(struct.pack("<I", net.n_layers))
        for W, b in zip(net.weights, net.biases):
            out.append(struct.pack("<II", *W.shape))
            out.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
            out.append(np.asarray(b, dtype="<f4").tobytes())
        for arr in (net.in_mean, net.in_scale, net.out_mean, net.out_scale):
            out.append(np.asarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def _parse(raw: bytes) -> list[EmbeddedNet]:
    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise BlobError("weight blob is truncated")
        chunk = raw[pos: pos + n]
        pos += n
        return chunk

    pos = 0
    if take(8) != MAGIC:
        raise BlobError("bad magic in weight blob")
    (n_nets,) = struct.unpack("<I", take(4))
    nets = []
    for _ in range(n_nets):
        (n_layers,) = struct.unpack("<I", take(4))
        if n_layers == 0 or n_layers > 64:
            raise BlobError(f"implausible layer count {n_layers}")
        parts, shapes, offsets, k = [], [], [], 0
        for _ in range(n_layers):
            r, c = struct.unpack("<II", take(8))
            if shapes and c != shapes[-1][0]:
                raise BlobError("layer sizes do not chain")
            parts.append(np.frombuffer(take(4 * (r * c + r)), dtype="<f4"))
            offsets.append(k)
            shapes.append((r, c))
            k += r * c + r
        n_in, n_out = shapes[0][1], shapes[-1][0]
        norms = [np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32) for n in (n_in, n_in, n_out, n_out)]
        nets.append(EmbeddedNet(np.concatenate(parts).astype(np.float32), np.array(shapes, dtype=np.int64),
                                np.array(offsets, dtype=np.int64), *norms))
    if pos != len(raw):
        raise BlobError(f"{len(raw) - pos} trailing bytes in weight blob")
    return nets


@dataclass
class WeightBlob:
    pi: EmbeddedNet
    grad: EmbeddedNet

    @classmethod
    def from_nets(cls, pi_nn: Mlp, grad_nn: Mlp) -> "WeightBlob":
        return cls(EmbeddedNet.from_mlp(pi_nn), EmbeddedNet.from_mlp(grad_nn))


def load_blob(path) -> WeightBlob:
    nets = _parse(Path(path).read_bytes())
    if len(nets) != 2:
        raise BlobError(f"expected 2 networks, found {len(nets)}")
    return WeightBlob(*nets)


def import_weights(path) -> tuple[Mlp, Mlp]:
    """Read a blob back as float64 networks (values are the f32-rounded weights)."""
    blob = load_blob(path)
    return blob.pi.to_mlp(), blob.grad.to_mlp()


# ---------------------------------------------------------------- inference
@njit(cache=True)
def _net_f32(params, shapes, offsets, x, in_mean, in_scale, out_mean, out_scale, lut, xmax, a, b, out):
    n_in = shapes[0, 1]
    for i in range(n_in):
        a[i] = (x[i] - in_mean[i]) / in_scale[i]
    L = shapes.shape[0]
    for layer in range(L):
        r = shapes[layer, 0]
        c = shapes[layer, 1]
        o = offsets[layer]
        for i in range(r):
            acc = params[o + r * c + i]
            row = o + i * c
            for j in range(c):
                acc += params[row + j] * a[j]
            b[i] = acc if layer == L - 1 else _lut_tanh(acc, lut, xmax)
        for i in range(r):
            a[i] = b[i]
    for i in range(out.shape[0]):
        out[i] = a[i] * out_scale[i] + out_mean[i]


class EmbeddedEvaluator:
    """Evaluates both networks in f32 using buffers allocated once at construction."""

    def __init__(self, blob: WeightBlob):
        self.blob = blob
        width = max(blob.pi.width, blob.grad.width)
        self._x = np.zeros(blob.pi.shapes[0, 1], dtype=np.float32)
        self._a = np.zeros(width, dtype=np.float32)
        self._b = np.zeros(width, dtype=np.float32)
        self.u = np.zeros(blob.pi.shapes[-1, 0], dtype=np.float32)
        self.grad = np.zeros(blob.grad.shapes[-1, 0], dtype=np.float32)
        self._xmax = np.float32(LUT_RANGE)

    def _run(self, net: EmbeddedNet, out):
        _net_f32(net.params, net.shapes, net.offsets, self._x, net.in_mean, net.in_scale, net.out_mean,
                 net.out_scale, TANH_LUT, self._xmax, self._a, self._b, out)

    def __call__(self, x):
        """Both network outputs for state ``x`` (returned arrays are reused buffers)."""
        self._x[:] = x
        self._run(self.blob.pi, self.u)
        self._run(self.blob.grad, self.grad)
        return self.u, self.grad


def forward_embedded(blob: WeightBlob, x):
    """One-off evaluation; returns copies of ``(pi output, grad output)``."""
    u, g = EmbeddedEvaluator(blob)(x)
    return u.copy(), g.copy()


class EmbeddedPolicy:
    """The adaptive control law evaluated through the single-precision path."""

    def __init__(self, blob: WeightBlob, theta_nom: CartpoleParams, u_bounds=(-9.0, 9.0)):
        self.ev = EmbeddedEvaluator(blob)
        self.theta_nom = theta_nom
        self._nom32 = np.asarray(theta_nom.as_array(), dtype=np.float32)
        self.u_bounds = u_bounds

    def evaluate(self, x, theta: CartpoleParams) -> float:
        xt = np.array(x, dtype=float)
        xt[2] = wrap_angle(xt[2])
        u, g = self.ev(xt)
        dtheta = np.asarray(theta.as_array(), dtype=np.float32) - self._nom32
        return float(np.clip(u[0] + np.dot(g, dtheta), *self.u_bounds))

    def evaluate_batch(self, X, thetas) -> np.ndarray:
        return np.array([self.evaluate(x, CartpoleParams.from_array(th)) for x, th in zip(X, thetas)])

    def evaluate_nominal(self, x) -> float:
        xt = np.array(x, dtype=float)
        xt[2] = wrap_angle(xt[2])
        u, _ = self.ev(xt)
        return float(np.clip(u[0], *self.u_bounds))
