"""Codebooks, soft/hard codeword assignment and binary code packing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, MalformedBytes, ShapeMismatch
from .numerics import SubspaceShape, l2_normalize, scaled_softmax, split_subvectors


@dataclass
class Codebook:
    """``M`` sub-codebooks of ``K`` unit-norm codewords each, ``Z[m, k]``."""

    shape: SubspaceShape
    Z: np.ndarray
    alpha: float = 20.0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        expected = (self.shape.M, self.shape.K, self.shape.d)
        if self.Z.shape != expected:
            raise ShapeMismatch(f"codebook array has shape {self.Z.shape}, expected {expected}")

    def copy(self) -> "Codebook":
        return Codebook(self.shape, self.Z.copy(), self.alpha)


def init_codebook(shape: SubspaceShape, seed: int, alpha: float = 20.0) -> Codebook:
    """Codewords drawn uniformly on the unit sphere of each subspace."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((shape.M, shape.K, shape.d))
    return Codebook(shape, l2_normalize(Z), alpha)


def soft_assign(x_m: np.ndarray, Z_m: np.ndarray, alpha: float):
    """Softmax-weighted combination of codewords.

    Weights are ``softmax(alpha * x_m . z_k)``; ``x_m`` may be batched.

    Returns:
        ``(q_m, weights)`` with ``q_m`` shaped like ``x_m`` and ``weights``
        of shape ``(..., K)``.
    """
    x_m = np.asarray(x_m, dtype=np.float64)
    Z_m = np.asarray(Z_m, dtype=np.float64)
    if x_m.shape[-1] != Z_m.shape[-1]:
        raise ShapeMismatch(f"sub-vector dim {x_m.shape[-1]} != codeword dim {Z_m.shape[-1]}")
    a = scaled_softmax(x_m @ Z_m.T, alpha)
    return a @ Z_m, a


def soft_quantize(x: np.ndarray, cb: Codebook) -> np.ndarray:
    """Per-subspace soft assignment, concatenated back to ``(..., D)``."""
    q, _ = soft_quantize_with_weights(x, cb)
    return q


def soft_quantize_with_weights(x: np.ndarray, cb: Codebook):
    blocks = split_subvectors(np.asarray(x, dtype=np.float64), cb.shape)
    sims = np.einsum("...md,mkd->...mk", blocks, cb.Z)
    a = scaled_softmax(sims, cb.alpha)
    q = np.einsum("...mk,mkd->...md", a, cb.Z)
    return q.reshape(np.shape(x)), a


def soft_quantize_vjp(x: np.ndarray, cb: Codebook, grad_q: np.ndarray):
    """Backward pass of :func:`soft_quantize`.

    Returns:
        ``(grad_x, grad_Z)`` for the upstream gradient ``grad_q``.
    """
    x = np.asarray(x, dtype=np.float64)
    _, a = soft_quantize_with_weights(x, cb)
    xb = split_subvectors(x, cb.shape)
    g = split_subvectors(np.asarray(grad_q, dtype=np.float64), cb.shape)
    gz = np.einsum("...md,mkd->...mk", g, cb.Z)
    # d loss / d logit_k = a_k (g.z_k - sum_j a_j g.z_j); logits = alpha x.z_k
    ds = a * (gz - np.sum(a * gz, axis=-1, keepdims=True))
    grad_x = cb.alpha * np.einsum("...mk,mkd->...md", ds, cb.Z)
    M, K, d = cb.Z.shape
    a2, ds2 = a.reshape(-1, M, K), ds.reshape(-1, M, K)
    g2, x2 = g.reshape(-1, M, d), xb.reshape(-1, M, d)
    grad_Z = np.einsum("bmk,bmd->mkd", a2, g2) + cb.alpha * np.einsum("bmk,bmd->mkd", ds2, x2)
    return grad_x.reshape(x.shape), grad_Z


def hard_assign(x_m: np.ndarray, Z_m: np.ndarray) -> np.ndarray:
    """Index of the most similar codeword; ties go to the lowest index."""
    sims = np.asarray(x_m, dtype=np.float64) @ np.asarray(Z_m, dtype=np.float64).T
    return np.argmax(sims, axis=-1)


def encode(x: np.ndarray, cb: Codebook) -> np.ndarray:
    """Hard-assign every sub-vector. Returns ``(..., M)`` int64 indices."""
    blocks = split_subvectors(np.asarray(x, dtype=np.float64), cb.shape)
    sims = np.einsum("...md,mkd->...mk", blocks, cb.Z)
    return np.argmax(sims, axis=-1)


def reconstruct(code: np.ndarray, cb: Codebook) -> np.ndarray:
    code = _check_code(code, cb.shape)
    parts = cb.Z[np.arange(cb.shape.M), code]  # (..., M, d)
    return parts.reshape(code.shape[:-1] + (cb.shape.D,))


def _check_code(code, shape: SubspaceShape) -> np.ndarray:
    code = np.asarray(code)
    if code.shape[-1:] != (shape.M,):
        raise ShapeMismatch(f"code must have {shape.M} entries, got shape {code.shape}")
    if not np.issubdtype(code.dtype, np.integer):
        raise ShapeMismatch("code entries must be integers")
    if code.size and (code.min() < 0 or code.max() >= shape.K):
        raise IndexOutOfRange(f"code entries must lie in [0, {shape.K})")
    return code.astype(np.int64)


def pack_codes(codes: np.ndarray, shape: SubspaceShape) -> np.ndarray:
    """Pack ``(N, M)`` codes into ``(N, code_bytes)`` uint8 rows.

    Each sub-index takes ``log2 K`` bits, sub-indices are laid out in
    subspace order and bits fill each byte least-significant first.
    """
    codes = _check_code(codes, shape)
    codes = codes.reshape(-1, shape.M)
    nb = shape.bits_per_index
    bits = (codes[:, :, None] >> np.arange(nb)) & 1
    bits = bits.reshape(len(codes), shape.bits).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, shape: SubspaceShape) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] != shape.code_bytes:
        raise MalformedBytes(f"expected rows of {shape.code_bytes} bytes, got array of shape {packed.shape}")
    bits = np.unpackbits(packed, axis=1, bitorder="little")
    if bits[:, shape.bits :].any():
        raise MalformedBytes("non-zero padding bits")
    nb = shape.bits_per_index
    bits = bits[:, : shape.bits].reshape(len(packed), shape.M, nb).astype(np.int64)
    return (bits << np.arange(nb)).sum(axis=-1)


def pack(code, shape: SubspaceShape) -> bytes:
    """Pack a single code into ``ceil(M log2 K / 8)`` bytes."""
    return pack_codes(np.asarray(code).reshape(1, -1), shape)[0].tobytes()


def unpack(data: bytes, shape: SubspaceShape) -> np.ndarray:
    if len(data) != shape.code_bytes:
        raise MalformedBytes(f"expected {shape.code_bytes} bytes, got {len(data)}")
    return unpack_codes(np.frombuffer(data, dtype=np.uint8).reshape(1, -1), shape)[0]
