"""Small dense network with manual backprop and Adam.

Parameters may carry a leading agent axis: weights of shape (A, in, out)
and biases of shape (A, out) evaluate A independent networks in one
batched matmul, with inputs of shape (A, N, in).  Unstacked weights
(in, out) take inputs of shape (N, in) or (in,).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"QNET"
_VERSION = 1


@dataclass
class NetConfig:
    hidden: tuple[int, ...] = (256, 128, 64)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"

    def sizes(self, n_in: int, n_out: int) -> list[int]:
        return [n_in, *self.hidden, n_out]


class NetworkParams:
    """Weights and biases stored as views into one flat buffer.

    ``flat`` has shape (n,) or (A, n) for a stack of A networks, so the
    optimizer can update everything with a few vector operations.
    """

    def __init__(self, weights, biases, dtype=None):
        weights = [np.asarray(w) for w in weights]
        biases = [np.asarray(b) for b in biases]
        dtype = np.dtype(dtype) if dtype is not None else np.result_type(*weights, *biases, np.float32)
        lead = weights[0].shape[:-2]
        sizes = [weights[0].shape[-2]] + [w.shape[-1] for w in weights]
        n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        self._bind(np.empty(lead + (n,), dtype=dtype), sizes)
        for dst, src in zip(self.arrays(), [a for pair in zip(weights, biases) for a in pair]):
            dst[...] = src

    def _bind(self, flat: np.ndarray, sizes) -> None:
        lead = flat.shape[:-1]
        self.flat = flat
        self.weights, self.biases = [], []
        off = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(flat[..., off:off + n_in * n_out].reshape(lead + (n_in, n_out)))
            off += n_in * n_out
            self.biases.append(flat[..., off:off + n_out])
            off += n_out

    @classmethod
    def _from_flat(cls, flat: np.ndarray, sizes) -> "NetworkParams":
        obj = cls.__new__(cls)
        obj._bind(flat, sizes)
        return obj

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, stack: int | None = None,
             dtype="float64") -> "NetworkParams":
        """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
        lead = () if stack is None else (stack,)
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / n_in)
            ws.append(rng.uniform(-lim, lim, size=lead + (n_in, n_out)))
            bs.append(np.zeros(lead + (n_out,)))
        return cls(ws, bs, dtype)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-2]] + [w.shape[-1] for w in self.weights]

    @property
    def stack(self) -> int | None:
        return self.weights[0].shape[0] if self.weights[0].ndim == 3 else None

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "NetworkParams":
        return self._from_flat(self.flat.copy(), self.sizes)

    def zeros_like(self) -> "NetworkParams":
        return self._from_flat(np.zeros_like(self.flat), self.sizes)

    def agent(self, a: int) -> "NetworkParams":
        """Unstacked copy of agent ``a``'s network."""
        return self._from_flat(self.flat[a].copy(), self.sizes)

    def validate(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[-1] != b.shape[-1]:
                raise ValueError(f"layer {i}: bias length {b.shape[-1]} != {w.shape[-1]} outputs")
            if i and w.shape[-2] != self.weights[i - 1].shape[-1]:
                raise ValueError(f"layer {i}: input size {w.shape[-2]} does not match previous layer")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameters")

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Header (magic, version, stack, layer count, sizes) then '<f8' data layer by layer."""
        sizes = self.sizes
        head = struct.pack("<4sIII", _MAGIC, _VERSION, self.stack or 0, len(sizes))
        head += struct.pack(f"<{len(sizes)}I", *sizes)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes, dtype="float64") -> "NetworkParams":
        magic, version, stack, n = struct.unpack_from("<4sIII", blob, 0)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a serialized network (bad magic or version)")
        off = struct.calcsize("<4sIII")
        sizes = struct.unpack_from(f"<{n}I", blob, off)
        off += 4 * n
        lead = (stack,) if stack else ()
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            for shape, dest in ((lead + (n_in, n_out), ws), (lead + (n_out,), bs)):
                count = int(np.prod(shape))
                dest.append(np.frombuffer(blob, "<f8", count, off).reshape(shape).astype(float))
                off += 8 * count
        if off != len(blob):
            raise ValueError(f"trailing bytes in serialized network ({len(blob) - off})")
        return cls(ws, bs, dtype)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype="float64") -> "NetworkParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype)


def _bias(b: np.ndarray, x: np.ndarray) -> np.ndarray:
    # stacked biases (A, out) broadcast against activations (A, N, out)
    return b[..., None, :] if b.ndim == 2 and x.ndim == 3 else b


def forward(params: NetworkParams, x, return_cache: bool = False):
    """ReLU hidden layers, linear output.  Optionally returns layer inputs for backward."""
    h = np.asarray(x, dtype=params.flat.dtype)
    if h.shape[-1] != params.weights[0].shape[-2]:
        raise ValueError(f"input size {h.shape[-1]} != network input {params.weights[0].shape[-2]}")
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + _bias(b, h) if h.ndim > 1 else h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
            cache.append(h)
    return (h, cache) if return_cache else h


def backward(params: NetworkParams, cache, grad_out) -> NetworkParams:
    """Gradients of sum(grad_out * output) with respect to every parameter."""
    g = np.asarray(grad_out, dtype=params.flat.dtype)
    if g.ndim == 1:
        g = g[None, :]
        cache = [c[None, :] for c in cache]
    grads = params.zeros_like()
    for i in range(len(params.weights) - 1, -1, -1):
        h_in = cache[i]
        np.matmul(np.swapaxes(h_in, -1, -2), g, out=grads.weights[i])
        g.sum(axis=-2, out=grads.biases[i])
        if i:
            g = g @ np.swapaxes(params.weights[i], -1, -2)
            g *= h_in > 0
    return grads


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    step: np.ndarray | int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rejected: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams, cfg: NetConfig | None = None) -> "AdamState":
        cfg = cfg or NetConfig()
        step = 0 if params.stack is None else np.zeros(params.stack, dtype=np.int64)
        return cls(params.zeros_like(), params.zeros_like(), step, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState):
    """In-place Adam update with bias correction.

    Non-finite gradients are rejected (per agent for stacked params); the
    return value is the acceptance flag (bool or per-agent bool array).
    """
    stack = params.stack
    g = grads.flat
    ok = np.isfinite(g).all(axis=-1)
    if not np.all(ok):
        state.rejected += int(np.size(ok) - np.count_nonzero(ok))
        g = np.where(np.asarray(ok)[..., None], g, 0.0)
    m, v = state.m.flat, state.v.flat
    if stack is None:
        if not ok:
            return False
        state.step += 1
        c1, c2 = 1 - state.beta1 ** state.step, 1 - state.beta2 ** state.step
        keep = None
    else:
        state.step = state.step + ok
        t = np.maximum(state.step, 1)[:, None]
        c1, c2 = 1 - state.beta1 ** t, 1 - state.beta2 ** t
        keep = None if ok.all() else ok[:, None]
        m_old, v_old = (m.copy(), v.copy()) if keep is not None else (None, None)
    m *= state.beta1
    m += (1 - state.beta1) * g
    g2 = np.square(g)
    g2 *= 1 - state.beta2
    v *= state.beta2
    v += g2
    if keep is not None:
        np.copyto(m, m_old, where=~keep)
        np.copyto(v, v_old, where=~keep)
    # lr * m_hat / (sqrt(v_hat) + eps), reusing the g2 buffer
    denom = np.sqrt(v, out=g2)
    denom *= 1.0 / np.sqrt(c2)
    denom += state.eps
    np.divide(m, denom, out=denom)
    denom *= state.lr / c1
    if keep is not None:
        denom *= keep
    params.flat -= denom
    return ok if stack is not None else True


def clone_into(source: NetworkParams, target: NetworkParams) -> None:
    """Copy ``source`` into ``target``'s existing buffers."""
    if source.flat.shape != target.flat.shape or source.sizes != target.sizes:
        raise ValueError(f"shape mismatch {source.sizes} vs {target.sizes}")
    np.copyto(target.flat, source.flat)
