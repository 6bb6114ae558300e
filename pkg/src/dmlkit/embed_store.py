"""Labeled embedding sets: data model, synthetic generators and file I/O.

Binary layout of an ``EMB1`` file (all little-endian)::

    magic    4s   b"EMB1"
    version  u16  1
    flags    u8   bit0 -> class-name table present
    reserved u8   0
    n        u64
    d        u32
    data     n*d f32, row-major
    labels   n u32
    [names]  u32 count, then per name: u16 byte length + UTF-8 bytes
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateRow,
    EmptyInput,
    EmptySplit,
    FormatError,
    NonFiniteValue,
    TruncatedError,
    UnknownClass,
    VersionError,
)

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQI")
_FLAG_NAMES = 0x01


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """N x D float64 embeddings with one integer class label per row.

    Arrays are copied on construction and frozen, so a set can be shared
    freely between threads.
    """

    data: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {data.shape}")
        labels = np.asarray(self.labels)
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integers")
        labels = np.array(labels, dtype=np.int64, copy=True).reshape(-1)
        n, d = data.shape
        if n < 1 or d < 1:
            raise EmptyInput(f"embedding set needs N >= 1 and D >= 1, got {data.shape}")
        if labels.shape[0] != n:
            raise ValueError(f"{labels.shape[0]} labels for {n} rows")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding data contains non-finite values")
        names = self.class_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if labels.max() >= len(names):
                raise ValueError("label id exceeds class-name table")
        data.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"EmbeddingSet(n={self.n}, dim={self.dim}, classes={len(self.classes)})"

    def equals(self, other: "EmbeddingSet") -> bool:
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
        )

    def subset(self, rows) -> "EmbeddingSet":
        rows = np.asarray(rows)
        return EmbeddingSet(self.data[rows], self.labels[rows], self.class_names)

    def with_data(self, data) -> "EmbeddingSet":
        return EmbeddingSet(data, self.labels, self.class_names)

    def class_index(self) -> "ClassIndex":
        return ClassIndex.build(self)


@dataclass(frozen=True)
class ClassIndex:
    class_ids: np.ndarray
    row_groups: tuple[np.ndarray, ...]
    class_means: np.ndarray

    @classmethod
    def build(cls, es: EmbeddingSet) -> "ClassIndex":
        ids, inverse = np.unique(es.labels, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        bounds = np.cumsum(np.bincount(inverse, minlength=len(ids)))[:-1]
        groups = tuple(np.split(order, bounds))
        means = np.stack([es.data[g].mean(axis=0) for g in groups])
        return cls(ids, groups, means)

    def counts(self) -> np.ndarray:
        return np.array([len(g) for g in self.row_groups])

    def position(self, class_id: int) -> int:
        i = int(np.searchsorted(self.class_ids, class_id))
        if i >= len(self.class_ids) or self.class_ids[i] != class_id:
            raise UnknownClass(f"unknown class id {class_id}")
        return i


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    samples_per_class: int
    dim: int
    class_mean_scale: float = 1.0
    within_class_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.num_classes, self.samples_per_class, self.dim) < 1:
            raise ValueError("counts must be >= 1")
        if self.within_class_std < 0 or self.class_mean_scale < 0:
            raise ValueError("scales must be non-negative")


def synth_gaussian_classes(spec: SynthSpec) -> EmbeddingSet:
    """Isotropic Gaussian blobs around class means drawn uniformly from a cube.

    Rows are grouped by class (class 0 first). Output depends only on ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.class_mean_scale
    means = rng.uniform(-s, s, size=(spec.num_classes, spec.dim))
    noise = rng.standard_normal((spec.num_classes, spec.samples_per_class, spec.dim))
    data = means[:, None, :] + spec.within_class_std * noise
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    return EmbeddingSet(data.reshape(-1, spec.dim), labels)


def synth_class_means(spec: SynthSpec) -> np.ndarray:
    """The true class means used by :func:`synth_gaussian_classes` for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    s = spec.class_mean_scale
    return rng.uniform(-s, s, size=(spec.num_classes, spec.dim))


def l2_normalize(es: EmbeddingSet, eps: float = 1e-12) -> EmbeddingSet:
    norms = np.linalg.norm(es.data, axis=1)
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return es.with_data(es.data / norms[:, None])


def split_by_classes(es: EmbeddingSet, train_classes: Iterable[int]) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Partition rows into (train, test) by class membership, keeping row order."""
    train = {int(c) for c in train_classes}
    present = set(es.classes.tolist())
    unknown = sorted(train - present)
    if unknown:
        raise UnknownClass(f"unknown class ids {unknown}")
    if not train or train == present:
        raise EmptySplit("both sides of a class split must be non-empty")
    mask = np.isin(es.labels, sorted(train))
    return es.subset(np.flatnonzero(mask)), es.subset(np.flatnonzero(~mask))


# -- CSV ----------------------------------------------------------------------

def load_csv(path, has_header: bool = False) -> EmbeddingSet:
    """Read ``label, v1, ..., vD`` rows. Line numbers in errors are 1-based."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if has_header and lineno == 1:
                continue
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) < 2:
                raise FormatError("expected a label and at least one value", line=lineno)
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise FormatError(f"expected {width} fields, got {len(rec)}", line=lineno)
            try:
                label = int(rec[0].strip())
            except ValueError:
                raise FormatError(f"label {rec[0]!r} is not an integer", line=lineno) from None
            if label < 0:
                raise FormatError(f"negative label {label}", line=lineno)
            vals = []
            for col, raw in enumerate(rec[1:], start=2):
                try:
                    v = float(raw)
                except ValueError:
                    raise NonFiniteValue(lineno, col, raw) from None
                if not math.isfinite(v):
                    raise NonFiniteValue(lineno, col, raw)
                vals.append(v)
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise EmptyInput(f"{path}: no data rows")
    return EmbeddingSet(np.array(rows), np.array(labels))


def save_csv(es: EmbeddingSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for lab, row in zip(es.labels, es.data):
            w.writerow([int(lab), *(repr(float(v)) for v in row)])


# -- EMB1 binary ----------------------------------------------------------------

def save_binary(es: EmbeddingSet, path) -> None:
    """Write ``es`` as EMB1. Data is stored as float32."""
    if es.labels.max() > np.iinfo(np.uint32).max:
        raise ValueError("label does not fit in u32")
    flags = _FLAG_NAMES if es.class_names is not None else 0
    parts = [
        _HEADER.pack(MAGIC, VERSION, flags, 0, es.n, es.dim),
        es.data.astype("<f4").tobytes(order="C"),
        es.labels.astype("<u4").tobytes(),
    ]
    if es.class_names is not None:
        parts.append(struct.pack("<I", len(es.class_names)))
        for name in es.class_names:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"class name too long ({len(raw)} bytes)")
            parts.append(struct.pack("<H", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def load_binary(path) -> EmbeddingSet:
    buf = Path(path).read_bytes()
    return decode_binary(buf)


def decode_binary(buf: bytes) -> EmbeddingSet:
    if len(buf) < 4:
        raise TruncatedError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("file shorter than header")
    _, version, flags, _reserved, n, d = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionError(f"unsupported EMB1 version {version}")
    off = _HEADER.size
    n_data = n * d * 4
    if len(buf) < off + n_data + n * 4:
        raise TruncatedError(f"payload needs {off + n_data + n * 4} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n_data
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
    off += n * 4
    names = None
    if flags & _FLAG_NAMES:
        if len(buf) < off + 4:
            raise TruncatedError("missing class-name count")
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        names = []
        for _ in range(count):
            if len(buf) < off + 2:
                raise TruncatedError("class-name table cut short")
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            if len(buf) < off + ln:
                raise TruncatedError("class-name table cut short")
            names.append(buf[off:off + ln].decode("utf-8"))
            off += ln
    return EmbeddingSet(data.astype(np.float64), labels.astype(np.int64), names)


def load_any(path) -> EmbeddingSet:
    """Load EMB1 or CSV, chosen by file content (magic bytes)."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_binary(p)
    return load_csv(p)


def concat(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    return EmbeddingSet(
        np.concatenate([s.data for s in sets]), np.concatenate([s.labels for s in sets])
    )
