"""Datasets, the synthetic Gaussian mixture and the two retrieval protocols.

``GPQD`` layout (little-endian)::

    "GPQD" | u16 version=1 | u64 N | u32 dim | u32 Nc
    | N*dim float32 features (row-major)
    | N label bitmaps of ceil(Nc/8) bytes, bit c (LSB-first) set for class c

Item ids are row positions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import InsufficientClasses, InsufficientItems, InvalidConfig, IoError, ShapeMismatch
from .numerics import l2_normalize

MAGIC = b"GPQD"
VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray  # (N, dim) float32
    labels: np.ndarray  # (N, Nc) bool

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels).astype(bool)
        if self.features.ndim != 2 or self.labels.ndim != 2 or len(self.features) != len(self.labels):
            raise ShapeMismatch("features must be (N, dim) and labels (N, Nc) with matching N")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def multi_label(self) -> bool:
        return bool((self.labels.sum(axis=1) > 1).any())

    def primary_class(self) -> np.ndarray:
        """Lowest set label per item, -1 for unlabeled rows."""
        has = self.labels.any(axis=1)
        return np.where(has, np.argmax(self.labels, axis=1), -1)


def synth_gaussian_mixture(
    n_classes: int = 10,
    per_class: int = 600,
    input_dim: int = 96,
    spread: float = 0.15,
    seed: int = 0,
    max_similarity: float = 0.9,
) -> Dataset:
    """Isotropic Gaussian clusters around random unit directions.

    Class means are redrawn until every pair has cosine similarity below
    ``max_similarity``. Items are stored class by class.
    """
    if n_classes < 1 or per_class < 1 or input_dim < 1:
        raise InvalidConfig("class count, items per class and dimension must be positive")
    if spread < 0:
        raise InvalidConfig("spread must be non-negative")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        means = l2_normalize(rng.standard_normal((n_classes, input_dim)))
        sims = means @ means.T - 2 * np.eye(n_classes)
        if n_classes == 1 or sims.max() < max_similarity:
            break
    else:
        raise InvalidConfig(f"could not draw {n_classes} means with pairwise similarity < {max_similarity}")
    noise = rng.standard_normal((n_classes, per_class, input_dim)) * spread
    features = (means[:, None, :] + noise).reshape(-1, input_dim)
    labels = np.repeat(np.eye(n_classes, dtype=bool), per_class, axis=0)
    return Dataset(features, labels)


def to_bytes(ds: Dataset) -> bytes:
    n, dim = ds.features.shape
    bitmaps = np.packbits(ds.labels, axis=1, bitorder="little")
    return b"".join([
        MAGIC,
        _binio.pack("HQII", VERSION, n, dim, ds.n_classes),
        _binio.f32(ds.features),
        bitmaps.tobytes(),
    ])


def from_bytes(data: bytes) -> Dataset:
    reader = _binio.Reader(data)
    reader.magic(MAGIC)
    reader.version(VERSION)
    n, dim, nc = reader.unpack("QII")
    features = reader.array("f4", (n, dim)).astype(np.float32)
    bitmaps = reader.array("u1", (n, (nc + 7) // 8))
    labels = np.unpackbits(bitmaps, axis=1, count=nc, bitorder="little").astype(bool)
    return Dataset(features, labels)


def save(ds: Dataset, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(to_bytes(ds))
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


def load(path) -> Dataset:
    """Read a ``GPQD`` file, or CSV when the path ends in ``.csv``."""
    if str(path).endswith(".csv"):
        return load_csv(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
    return from_bytes(data)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """CSV with a header row, then ``id, feature..., labels``.

    Labels are semicolon-separated class indices; rows are ordered by id.
    """
    rows = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                if row:
                    rows.append(row)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows.sort(key=lambda r: int(r[0]))
    ids = [int(r[0]) for r in rows]
    if ids != list(range(len(rows))):
        raise InvalidConfig("CSV ids must be 0..N-1")
    features = np.array([[float(v) for v in r[1:-1]] for r in rows], dtype=np.float32)
    concepts = [[int(c) for c in r[-1].split(";") if c.strip()] for r in rows]
    nc = n_classes or (max((max(c) for c in concepts if c), default=-1) + 1)
    labels = np.zeros((len(rows), nc), dtype=bool)
    for i, cs in enumerate(concepts):
        labels[i, cs] = True
    return Dataset(features.reshape(len(rows), -1), labels)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"f{j}" for j in range(ds.dim)] + ["labels"])
        for i in range(len(ds)):
            concepts = ";".join(str(c) for c in np.flatnonzero(ds.labels[i]))
            writer.writerow([i] + [repr(float(v)) for v in ds.features[i]] + [concepts])


@dataclass
class ProtocolSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray
    database: np.ndarray
    query: np.ndarray
    protocol: int

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "labeled": self.labeled.tolist(),
            "unlabeled": self.unlabeled.tolist(),
            "database": self.database.tolist(),
            "query": self.query.tolist(),
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ProtocolSplit":
        p = json.loads(text)
        arr = lambda key: np.asarray(p[key], dtype=np.int64)  # noqa: E731
        return cls(arr("labeled"), arr("unlabeled"), arr("database"), arr("query"), int(p["protocol"]))

    def save(self, path) -> None:
        try:
            with open(path, "w") as fh:
                fh.write(self.to_json())
        except OSError as exc:
            raise IoError(f"cannot write split {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ProtocolSplit":
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise IoError(f"cannot read split {path}: {exc}") from exc


def split_protocol1(ds: Dataset, labels_per_class: int, query_per_class: int, seed: int = 0) -> ProtocolSplit:
    """Known-category split.

    Per class: ``labels_per_class`` labeled training items, ``query_per_class``
    queries, the rest goes to the database. Database items double as the
    unlabeled training set. Items are grouped by their lowest label; rows
    without any label go to the database.
    """
    if labels_per_class < 0 or query_per_class < 0:
        raise InvalidConfig("per-class counts must be non-negative")
    rng = np.random.default_rng(seed)
    primary = ds.primary_class()
    labeled, query, database = [], [], [np.flatnonzero(primary < 0)]
    for c in range(ds.n_classes):
        members = np.flatnonzero(primary == c)
        if len(members) < labels_per_class + query_per_class:
            raise InsufficientItems(
                f"class {c} has {len(members)} items, needs {labels_per_class + query_per_class}"
            )
        members = rng.permutation(members)
        labeled.append(members[:labels_per_class])
        query.append(members[labels_per_class : labels_per_class + query_per_class])
        database.append(members[labels_per_class + query_per_class :])
    database = np.sort(np.concatenate(database))
    return ProtocolSplit(
        labeled=np.sort(np.concatenate(labeled)),
        unlabeled=database.copy(),
        database=database,
        query=np.sort(np.concatenate(query)),
        protocol=1,
    )


def split_protocol2(ds: Dataset, seed: int = 0) -> ProtocolSplit:
    """Unseen-category split.

    ``floor(0.75 * Nc)`` classes are seen, the rest unseen. Every class is
    halved into train and test parts. Seen-train is labeled; unseen-train and
    seen-test form the database (and the unlabeled training set); unseen-test
    is the query set.
    """
    nc = ds.n_classes
    if nc < 4:
        raise InsufficientClasses(f"protocol 2 needs at least 4 classes, got {nc}")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(nc)
    n_seen = (3 * nc) // 4
    seen = set(classes[:n_seen].tolist())
    primary = ds.primary_class()
    train75, test75, train25, test25 = [], [], [], []
    for c in range(nc):
        members = rng.permutation(np.flatnonzero(primary == c))
        half = len(members) // 2
        if half == 0:
            raise InsufficientItems(f"class {c} has too few items to halve")
        train, test = members[:half], members[half:]
        if c in seen:
            train75.append(train)
            test75.append(test)
        else:
            train25.append(train)
            test25.append(test)
    database = np.sort(np.concatenate(train25 + test75))
    return ProtocolSplit(
        labeled=np.sort(np.concatenate(train75)),
        unlabeled=database.copy(),
        database=database,
        query=np.sort(np.concatenate(test25)),
        protocol=2,
    )
