"""Reference feature extractor: two affine layers with a tanh in between.

This stands in for the CNN backbone. It maps raw input vectors to
intra-normalized D-dimensional features and exposes a hand-written backward
pass. The backward pass has a gradient-reversal input: that gradient is
negated at the boundary right before intra-normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import InvalidConfig, ShapeMismatch, ZeroVector
from .numerics import ZERO_TOL, SubspaceShape, split_subvectors

MAGIC = b"GPQE"
VERSION = 1

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class EncoderParams:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (D, hidden)
    b2: np.ndarray  # (D,)

    def __post_init__(self):
        hidden, n_in = self.W1.shape
        if hidden < 1 or self.b1.shape != (hidden,):
            raise ShapeMismatch("b1 must have shape (hidden,)")
        if self.W2.ndim != 2 or self.W2.shape[1] != hidden:
            raise ShapeMismatch("W2 must have shape (D, hidden)")
        if self.b2.shape != (self.W2.shape[0],):
            raise ShapeMismatch("b2 must have shape (D,)")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(getattr(self, n).copy() for n in PARAM_NAMES))


@dataclass
class EncoderCache:
    raw: np.ndarray
    hidden: np.ndarray  # tanh activations
    out: np.ndarray  # pre-normalization output
    norms: np.ndarray  # (..., M, 1) sub-vector norms of ``out``
    features: np.ndarray  # intra-normalized output
    shape: SubspaceShape


@dataclass
class GradientBundle:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    out: np.ndarray  # gradient w.r.t. the pre-normalization output

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def init_params(input_dim: int, hidden: int, output_dim: int, seed: int) -> EncoderParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, seeded."""
    if min(input_dim, hidden, output_dim) < 1:
        raise InvalidConfig("encoder dimensions must be positive")
    rng = np.random.default_rng(seed)
    s1 = 1.0 / np.sqrt(input_dim)
    s2 = 1.0 / np.sqrt(hidden)
    return EncoderParams(
        W1=rng.uniform(-s1, s1, size=(hidden, input_dim)),
        b1=rng.uniform(-s1, s1, size=hidden),
        W2=rng.uniform(-s2, s2, size=(output_dim, hidden)),
        b2=rng.uniform(-s2, s2, size=output_dim),
    )


def encode(params: EncoderParams, raw: np.ndarray, shape: SubspaceShape):
    """Forward pass for a single raw vector or a ``(N, input)`` batch.

    Returns:
        ``(features, cache)`` where ``features`` is intra-normalized.

    Raises:
        ShapeMismatch: on dimension disagreement.
        ZeroVector: if a sub-vector of the pre-normalization output vanishes.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != params.input_dim:
        raise ShapeMismatch(f"raw input has dimension {raw.shape[-1]}, encoder expects {params.input_dim}")
    if params.output_dim != shape.D:
        raise ShapeMismatch(f"encoder outputs {params.output_dim} dims, shape needs D={shape.D}")
    h = np.tanh(raw @ params.W1.T + params.b1)
    out = h @ params.W2.T + params.b2
    blocks = split_subvectors(out, shape)
    norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
    bad = np.argwhere(norms[..., 0] < ZERO_TOL)
    if len(bad):
        m = int(bad[0][-1])
        raise ZeroVector(f"encoder output sub-vector {m} has zero norm", index=m)
    features = (blocks / norms).reshape(out.shape)
    return features, EncoderCache(raw, h, out, norms, features, shape)


def normalization_vjp(cache: EncoderCache, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. intra-normalized features back to the raw output.

    For ``x = y / |y|`` per block: ``dy = (g - x (x . g)) / |y|``.
    """
    shape = cache.shape
    g = split_subvectors(grad, shape)
    x = split_subvectors(cache.features, shape)
    dy = (g - x * np.sum(x * g, axis=-1, keepdims=True)) / cache.norms
    return dy.reshape(cache.out.shape)


def backward(
    params: EncoderParams,
    cache: EncoderCache,
    upstream_grad: np.ndarray,
    reversal_grad: np.ndarray | None = None,
) -> GradientBundle:
    """Parameter gradients for ``upstream_grad`` minus ``reversal_grad``.

    Both gradients are taken w.r.t. the intra-normalized features. The
    reversal gradient is negated before it enters the normalization
    Jacobian, which is where the reversal layer sits.
    """
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != cache.features.shape:
        raise ShapeMismatch(f"upstream gradient shape {upstream_grad.shape} != features {cache.features.shape}")
    g = upstream_grad
    if reversal_grad is not None:
        reversal_grad = np.asarray(reversal_grad, dtype=np.float64)
        if reversal_grad.shape != cache.features.shape:
            raise ShapeMismatch(f"reversal gradient shape {reversal_grad.shape} != features {cache.features.shape}")
        g = g - reversal_grad
    d_out = normalization_vjp(cache, g)

    d2 = np.atleast_2d(d_out)
    h = np.atleast_2d(cache.hidden)
    raw = np.atleast_2d(cache.raw)
    d_pre = (d2 @ params.W2) * (1.0 - h * h)
    return GradientBundle(
        W1=d_pre.T @ raw,
        b1=d_pre.sum(axis=0),
        W2=d2.T @ h,
        b2=d2.sum(axis=0),
        out=d_out,
    )


def to_bytes(params: EncoderParams) -> bytes:
    """Serialize to the ``GPQE`` checkpoint layout (float32 parameters)."""
    header = MAGIC + _binio.pack("HIII", VERSION, params.input_dim, params.hidden, params.output_dim)
    return header + b"".join(_binio.f32(getattr(params, n)) for n in PARAM_NAMES)


def read_params(reader: _binio.Reader) -> EncoderParams:
    reader.magic(MAGIC)
    reader.version(VERSION)
    n_in, hidden, D = reader.unpack("III")
    arrays = [
        reader.array("f4", (hidden, n_in)),
        reader.array("f4", (hidden,)),
        reader.array("f4", (D, hidden)),
        reader.array("f4", (D,)),
    ]
    return EncoderParams(*(a.astype(np.float64) for a in arrays))


def from_bytes(data: bytes) -> EncoderParams:
    return read_params(_binio.Reader(data))


def save(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
