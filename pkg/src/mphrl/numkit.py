"""Small numpy toolkit: tanh MLPs with manual backprop, distribution heads,
Adam, keyed noise streams, and the flat parameter checkpoint format.

Everything runs in float64.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple.

    String keys are hashed with crc32 so that streams are stable across runs.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode()))
        else:
            entropy.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def label_code(label: str) -> int:
    return zlib.crc32(label.encode())


# --------------------------------------------------------------------------
# Multi-layer perceptron


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


class Mlp:
    """Fully connected net, tanh on hidden layers and identity on the output.

    Parameters live in one flat float64 vector (``self.params``); the
    per-layer weight and bias arrays are views into it, so optimizers can
    update the flat vector in place.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        output_scale: float = 1.0,
        hidden_gain: float = math.sqrt(2.0),
        buffer: np.ndarray | None = None,
    ):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise InvalidInputError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        self.layer_sizes = sizes
        n = param_count(sizes)
        if buffer is None:
            buffer = np.zeros(n)
        elif buffer.shape != (n,):
            raise InvalidInputError(f"buffer must have shape ({n},), got {buffer.shape}")
        self.params = buffer
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.weights.append(buffer[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(buffer[off:off + b])
            off += b
        if rng is not None:
            last = len(self.weights) - 1
            for i, w in enumerate(self.weights):
                gain = output_scale if i == last else hidden_gain
                w[...] = _orthogonal(rng, w.shape[0], w.shape[1], gain)
        self._cache: list[np.ndarray] | None = None

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if x.shape[-1] != self.in_dim or x.ndim > 2:
            raise InvalidInputError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        h = x[None, :] if single else x
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        self._single = single
        return h[0] if single else h

    __call__ = forward

    def backward(self, output_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of a scalar loss given d loss / d output.

        Returns (flat parameter gradient, input gradient). Batch rows are
        summed.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts = self._cache
        g = np.asarray(output_grad, dtype=np.float64)
        if self._single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise InvalidInputError(f"output grad shape {g.shape} != output shape {acts[-1].shape}")
        grad = np.zeros_like(self.params)
        gw, gb = _views(grad, self.layer_sizes)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i][...] = acts[i].T @ g
            gb[i][...] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (1.0 - acts[i] ** 2)
        return grad, (g[0] if self._single else g)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, buffer=self.params.copy())


def _views(flat: np.ndarray, sizes: Sequence[int]):
    ws, bs = [], []
    off = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(flat[off:off + a * b].reshape(a, b))
        off += a * b
        bs.append(flat[off:off + b])
        off += b
    return ws, bs


# --------------------------------------------------------------------------
# Distributions


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def log_prob(self, x: np.ndarray) -> float:
        return gaussian_log_prob(self, x)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float64)
        return mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * np.size(self.log_std) * (LOG_2PI + 1.0))


def gaussian_log_prob(d: DiagGaussian, x: np.ndarray) -> float:
    mean = np.asarray(d.mean, dtype=np.float64)
    log_std = np.broadcast_to(np.asarray(d.log_std, dtype=np.float64), mean.shape)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mean.shape:
        raise InvalidInputError(f"dimension mismatch: {x.shape} vs {mean.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise NumericError("non-finite input to gaussian_log_prob")
    z = (x - mean) * np.exp(-log_std)
    return float(np.sum(-log_std - 0.5 * LOG_2PI - 0.5 * z * z))


def diag_gaussian_logp(mean: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise log density for batched means (n, d) and a shared log_std (d,)."""
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-log_std - 0.5 * LOG_2PI - 0.5 * z * z, axis=-1)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # an all -inf slice sums to 0 and yields -inf
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - np.max(logits, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class Categorical:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if not np.all(np.isfinite(self.logits)):
            raise NumericError("non-finite logits")

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def sample(self, rng: np.random.Generator) -> int:
        return sample_index(self.probs, rng.random())

    def entropy(self) -> float:
        p = self.probs
        lp = self.log_probs
        return float(-np.sum(np.where(p > 0, p * lp, 0.0)))


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from a probability vector given a uniform u in [0, 1)."""
    c = np.cumsum(probs)
    k = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(k, len(probs) - 1)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam descent step, applied to ``params`` in place."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise InvalidInputError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --------------------------------------------------------------------------
# Keyed normal noise (counter-based, stateless)

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return z ^ (z >> np.uint64(31))


def hash_keys(*parts) -> np.ndarray:
    """Combine integer key arrays (broadcast together) into uint64 hashes."""
    with np.errstate(over="ignore"):
        h = np.zeros(np.broadcast(*[np.asarray(p) for p in parts]).shape, dtype=np.uint64)
        for p in parts:
            p = np.asarray(p).astype(np.int64).astype(np.uint64)
            h = _splitmix64(h ^ p)
    return h


def keyed_normals(keys: np.ndarray, dim: int) -> np.ndarray:
    """Standard normals of shape keys.shape + (dim,), a pure function of the keys."""
    keys = np.asarray(keys, dtype=np.uint64)
    n_pairs = (dim + 1) // 2
    with np.errstate(over="ignore"):
        ctr = np.arange(2 * n_pairs, dtype=np.uint64)
        bits = _splitmix64(keys[..., None] ^ _splitmix64(ctr))
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    u1, u2 = u[..., 0::2], u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=-1)
    return z[..., :dim]


# --------------------------------------------------------------------------
# Checkpoints
#
# ASCII header, one line per block ("mlp <role> <sizes>" or "vec <role> <n>"),
# terminated by "end", followed by little-endian float64 data in block order.

CKPT_MAGIC = "MPHRL-PARAMS"
CKPT_VERSION = 1


@dataclass
class ParamBlock:
    kind: str  # "mlp" or "vec"
    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)


def save_params(path: str | Path, blocks: dict[str, ParamBlock]) -> None:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    payload = []
    for role, blk in blocks.items():
        if " " in role or not role:
            raise InvalidInputError(f"bad role name {role!r}")
        n = param_count(blk.shape) if blk.kind == "mlp" else int(np.prod(blk.shape))
        if blk.data.size != n:
            raise InvalidInputError(f"block {role}: expected {n} values, got {blk.data.size}")
        lines.append(f"{blk.kind} {role} {','.join(str(s) for s in blk.shape)}")
        payload.append(np.ascontiguousarray(blk.data, dtype="<f8").tobytes())
    lines.append("end")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + b"".join(payload))


def load_params(path: str | Path) -> dict[str, ParamBlock]:
    raw = Path(path).read_bytes()
    blocks: dict[str, ParamBlock] = {}
    pos = 0
    header = []
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    magic = header[0].split()
    if magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint header {header[0]!r}")
    for line in header[1:]:
        kind, role, shape_s = line.split()
        shape = tuple(int(s) for s in shape_s.split(","))
        n = param_count(shape) if kind == "mlp" else int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        blocks[role] = ParamBlock(kind, shape, data)
    if pos != len(raw):
        raise InvalidInputError("trailing bytes in checkpoint")
    return blocks
