"""Retrieval database of packed codes with LUT-based asymmetric search.

File layout (little-endian)::

    "GPQI" | u16 version=1 | u32 M | u32 K | u32 d | u32 D | u64 count
    | M*K*d float32 codewords (subspace, codeword, component)
    | count * ceil(M*log2(K)/8) bytes of packed codes
    | u8 has_ids | [count * u64 ids]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import FormatError, IndexOutOfRange, IoError, ShapeMismatch
from .numerics import SubspaceShape, split_subvectors
from .quantizer import Codebook, encode, pack_codes, unpack_codes

MAGIC = b"GPQI"
VERSION = 1


@dataclass
class RetrievalIndex:
    codebook: Codebook
    packed: np.ndarray  # (count, code_bytes) uint8
    ids: np.ndarray | None = None  # (count,) uint64
    _codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = self.codebook.shape
        self.packed = np.asarray(self.packed, dtype=np.uint8).reshape(-1, shape.code_bytes)
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.uint64)
            if self.ids.shape != (len(self.packed),):
                raise ShapeMismatch("id table length must equal the item count")
        self._codes = unpack_codes(self.packed, shape)

    @property
    def shape(self) -> SubspaceShape:
        return self.codebook.shape

    @property
    def count(self) -> int:
        return len(self.packed)

    @property
    def codes(self) -> np.ndarray:
        """Unpacked ``(count, M)`` sub-indices."""
        return self._codes

    def item_ids(self) -> np.ndarray:
        if self.ids is None:
            return np.arange(self.count, dtype=np.uint64)
        return self.ids


def round_codebook(cb: Codebook) -> Codebook:
    """Codebook with codewords rounded to float32, as stored on disk."""
    return Codebook(cb.shape, cb.Z.astype(np.float32).astype(np.float64), cb.alpha)


def build_index(features: np.ndarray, cb: Codebook, ids=None) -> RetrievalIndex:
    """Hard-encode every database feature and pack its code.

    The codebook is rounded to float32 first so that an index built in
    memory is identical to one loaded back from disk.
    """
    cb = round_codebook(cb)
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        features = np.zeros((0, cb.shape.D))
    if features.ndim != 2 or features.shape[1] != cb.shape.D:
        raise ShapeMismatch(f"features have dimension {features.shape[-1]}, codebook expects {cb.shape.D}")
    codes = encode(features, cb)
    return RetrievalIndex(cb, pack_codes(codes, cb.shape), ids)


def compute_lut(query: np.ndarray, cb: Codebook) -> np.ndarray:
    """Similarity of each query sub-vector with every codeword: ``(..., M, K)``."""
    blocks = split_subvectors(np.asarray(query, dtype=np.float64), cb.shape)
    return np.einsum("...md,mkd->...mk", blocks, cb.Z)


def asymmetric_score(code, lut: np.ndarray) -> float:
    code = np.asarray(code)
    M, K = lut.shape
    if code.shape != (M,):
        raise ShapeMismatch(f"code must have {M} entries")
    if code.min() < 0 or code.max() >= K:
        raise IndexOutOfRange(f"code entries must lie in [0, {K})")
    return float(lut[np.arange(M), code].sum())


def score_all(luts: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Asymmetric scores of every code against every LUT: ``(Q, N)``.

    Subspace contributions are summed in order ``m = 0 .. M-1``.
    """
    luts = np.asarray(luts)
    single = luts.ndim == 2
    if single:
        luts = luts[None]
    out = np.zeros((len(luts), len(codes)))
    for m in range(luts.shape[1]):
        out += luts[:, m, :][:, codes[:, m]]
    return out[0] if single else out


def rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


def search_topk(query: np.ndarray, index: RetrievalIndex, k: int) -> list[tuple[int, float]]:
    """Exhaustive asymmetric search; returns ``min(k, count)`` ``(id, score)`` pairs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.count == 0:
        return []
    scores = score_all(compute_lut(query, index.codebook), index.codes)
    ids = index.item_ids()
    order = rank(scores, ids)[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def codebook_to_bytes(cb: Codebook) -> bytes:
    s = cb.shape
    return _binio.pack("IIII", s.M, s.K, s.d, s.D) + _binio.f32(cb.Z)


def read_codebook(reader: _binio.Reader, alpha: float = 20.0) -> Codebook:
    M, K, d, D = reader.unpack("IIII")
    if D != M * d:
        raise FormatError(f"inconsistent dimensions: D={D} but M*d={M * d}")
    shape = SubspaceShape(M=M, d=d, K=K)
    Z = reader.array("f4", (M, K, d)).astype(np.float64)
    return Codebook(shape, Z, alpha)


def to_bytes(index: RetrievalIndex) -> bytes:
    parts = [
        MAGIC,
        _binio.pack("H", VERSION),
        _binio.pack("IIII", index.shape.M, index.shape.K, index.shape.d, index.shape.D),
        _binio.pack("Q", index.count),
        _binio.f32(index.codebook.Z),
        np.ascontiguousarray(index.packed).tobytes(),
    ]
    if index.ids is None:
        parts.append(_binio.pack("B", 0))
    else:
        parts.append(_binio.pack("B", 1))
        parts.append(index.ids.astype("<u8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> RetrievalIndex:
    reader = _binio.Reader(data)
    reader.magic(MAGIC)
    reader.version(VERSION)
    M, K, d, D = reader.unpack("IIII")
    if D != M * d:
        raise FormatError(f"inconsistent dimensions: D={D} but M*d={M * d}")
    count = reader.unpack("Q")
    shape = SubspaceShape(M=M, d=d, K=K)
    Z = reader.array("f4", (M, K, d)).astype(np.float64)
    packed = reader.array("u1", (count, shape.code_bytes))
    has_ids = reader.unpack("B")
    ids = reader.array("u8", (count,)) if has_ids else None
    if reader.remaining:
        raise FormatError(f"{reader.remaining} trailing bytes after index payload")
    return RetrievalIndex(Codebook(shape, Z), packed, ids)


def save(index: RetrievalIndex, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(to_bytes(index))
    except OSError as exc:
        raise IoError(f"cannot write index to {path}: {exc}") from exc


def load(path) -> RetrievalIndex:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read index from {path}: {exc}") from exc
    return from_bytes(data)
