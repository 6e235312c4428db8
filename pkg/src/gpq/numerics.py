"""Vector math shared by the quantizer, objectives and encoder.

All functions accept a single vector or a batch stacked along the leading
axes; the reduction always happens over the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidDistribution, ShapeMismatch, ZeroVector

ZERO_TOL = 1e-12
LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class SubspaceShape:
    """Layout of a feature vector split into ``M`` sub-vectors of size ``d``.

    ``K`` is the number of codewords per sub-codebook; it has to be a power of
    two so that each sub-index fits in exactly ``log2(K)`` bits.
    """

    M: int
    d: int
    K: int = 16

    def __post_init__(self):
        if self.M < 1 or self.d < 1:
            raise InvalidConfig(f"M and d must be >= 1, got M={self.M}, d={self.d}")
        if self.K < 2 or self.K & (self.K - 1):
            raise InvalidConfig(f"K must be a power of two >= 2, got {self.K}")

    @property
    def D(self) -> int:
        return self.M * self.d

    @property
    def bits_per_index(self) -> int:
        return self.K.bit_length() - 1

    @property
    def bits(self) -> int:
        return self.M * self.bits_per_index

    @property
    def code_bytes(self) -> int:
        return (self.bits + 7) // 8

    @classmethod
    def from_dims(cls, D: int, M: int, K: int = 16) -> "SubspaceShape":
        if M < 1 or D % M:
            raise InvalidConfig(f"D={D} is not divisible by M={M}")
        return cls(M=M, d=D // M, K=K)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along the last axis.

    Raises:
        ZeroVector: if any vector has norm below ``ZERO_TOL``.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < ZERO_TOL):
        raise ZeroVector("cannot normalize a zero vector")
    return v / norms


def split_subvectors(x: np.ndarray, shape: SubspaceShape) -> np.ndarray:
    """View ``(..., D)`` as ``(..., M, d)``."""
    x = np.asarray(x)
    if x.shape[-1] != shape.D:
        raise ShapeMismatch(f"expected last dimension {shape.D}, got {x.shape[-1]}")
    return x.reshape(x.shape[:-1] + (shape.M, shape.d))


def intra_normalize(x: np.ndarray, shape: SubspaceShape) -> np.ndarray:
    """L2-normalize each of the ``M`` sub-vectors of ``x`` independently."""
    blocks = split_subvectors(np.asarray(x, dtype=np.float64), shape)
    norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
    bad = np.argwhere(norms[..., 0] < ZERO_TOL)
    if len(bad):
        m = int(bad[0][-1])
        raise ZeroVector(f"sub-vector {m} has zero norm", index=m)
    return (blocks / norms).reshape(np.shape(x))


def scaled_softmax(scores: np.ndarray, scale: float) -> np.ndarray:
    """``softmax(scale * scores)`` over the last axis.

    ``scale == 0`` yields the uniform distribution.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scale < 0 or not math.isfinite(scale):
        raise ValueError(f"scale must be finite and >= 0, got {scale}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    z = scale * scores
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def shannon_entropy(p: np.ndarray) -> np.ndarray:
    """Entropy in nats, ``0 * log 0`` taken as 0.

    Raises:
        InvalidDistribution: if entries are negative or do not sum to 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistribution("input is not a probability vector")
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(l2_normalize(a), l2_normalize(b)))
