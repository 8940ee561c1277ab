"""Synthetic mixtures, embedding files and minibatching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs plus optional labels and annotations.

    ``means`` holds the generating component means for synthetic data; it
    drives the graded similarity scores.
    """

    X: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: Optional[List[str]] = None
    means: Optional[np.ndarray] = None
    pairs: Optional[np.ndarray] = None  # (P, 2) int indices
    gold: Optional[np.ndarray] = None  # (P,) scores in [0, 5]
    triples: Optional[np.ndarray] = None  # (T, 3) anchor, positive, negative

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataFormatError(f"X must be 2-D, got shape {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise DataFormatError("X contains NaN or Inf")
        n = self.X.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataFormatError(f"{self.labels.shape[0]} labels for {n} rows")
        if self.ids is not None and len(self.ids) != n:
            raise DataFormatError(f"{len(self.ids)} ids for {n} rows")
        for name, arr, width in (("pairs", self.pairs, 2), ("triples", self.triples, 3)):
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.ndim != 2 or arr.shape[1] != width:
                    raise DataFormatError(f"{name} must have shape (*, {width})")
                if arr.size and (arr.min() < 0 or arr.max() >= n):
                    raise DataFormatError(f"{name} index out of range")
                setattr(self, name, arr)
        if self.pairs is not None and (self.gold is None or len(self.gold) != len(self.pairs)):
            raise DataFormatError("pairs need one gold score each")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index) -> "Dataset":
        """Rows ``index``; annotations are dropped (their indices no longer apply)."""
        index = np.asarray(index)
        return Dataset(
            self.X[index],
            None if self.labels is None else self.labels[index],
            None if self.ids is None else [self.ids[i] for i in index],
            self.means,
        )


@dataclass
class MixtureSpec:
    means: np.ndarray  # (C, d)
    stds: np.ndarray  # (C,)
    weights: np.ndarray  # (C,)
    n: int

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = self.means.shape[0]
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), (c,)).copy()
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (c,):
            raise ValueError(f"{self.weights.shape} weights for {c} components")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(self.stds < 0):
            raise ValueError("stds must be non-negative")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def generate_mixture(spec: MixtureSpec, seed) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.components, size=spec.n, p=spec.weights)
    noise = rng.normal(size=(spec.n, spec.dim)) * spec.stds[labels, None]
    return Dataset(spec.means[labels] + noise, labels, means=spec.means.copy())


def blob_means(components: int, dim: int, separation: float, offset: float = 0.0, seed=0) -> np.ndarray:
    """Random unit directions scaled by ``separation``, shifted by a shared offset.

    The shared offset mimics an anisotropic encoder space where all points
    sit in a narrow cone, so cosine neighborhoods start out poor.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(components, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shift = rng.normal(size=dim)
    shift /= np.linalg.norm(shift)
    return separation * dirs + offset * shift


# ---------------------------------------------------------------------------
# Graded pairs and triples
# ---------------------------------------------------------------------------


def component_gold_table(means: np.ndarray) -> np.ndarray:
    """Gold score for each pair of components.

    ``5 * exp(-dist / bandwidth)`` with bandwidth the median inter-component
    distance, min-max rescaled so the farthest pair scores 0 and a component
    with itself scores 5.
    """
    means = np.atleast_2d(means)
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    c = means.shape[0]
    if c < 2:
        return np.full((1, 1), 5.0)
    off = dist[~np.eye(c, dtype=bool)]
    bandwidth = float(np.median(off))
    if bandwidth <= 0:
        raise ValueError("components coincide; graded scores are undefined")
    raw = np.exp(-dist / bandwidth)
    lo = raw.min()
    return 5.0 * (raw - lo) / (1.0 - lo)


def gold_score(dataset: Dataset, i: int, j: int) -> float:
    if dataset.means is None or dataset.labels is None:
        raise DataFormatError("graded scores need component means and labels")
    table = component_gold_table(dataset.means)
    return float(table[dataset.labels[i], dataset.labels[j]])


def generate_graded_pairs(dataset: Dataset, seed, n_pairs: int = 1000) -> Dataset:
    """Copy of ``dataset`` annotated with random pairs and their gold scores."""
    if dataset.means is None or dataset.labels is None:
        raise DataFormatError("graded pairs need a labeled mixture dataset")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    a = rng.integers(0, n, size=n_pairs)
    b = rng.integers(0, n - 1, size=n_pairs)
    b = b + (b >= a)  # never pair a point with itself
    pairs = np.stack([a, b], axis=1)
    table = component_gold_table(dataset.means)
    gold = table[dataset.labels[a], dataset.labels[b]]
    return Dataset(dataset.X, dataset.labels, dataset.ids, dataset.means, pairs, gold, dataset.triples)


def generate_triples(dataset: Dataset, seed, n_triples: int = 1000) -> Dataset:
    """Annotate (anchor, same-class positive, other-class negative) triples."""
    if dataset.labels is None:
        raise DataFormatError("triples need labels")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    usable = [c for c in classes if len(members[c]) >= 2]
    if not usable or len(classes) < 2:
        raise DataFormatError("triples need two classes and a class with two members")
    anchors_pool = np.concatenate([members[c] for c in usable])
    out = np.empty((n_triples, 3), dtype=np.int64)
    for t in range(n_triples):
        a = int(rng.choice(anchors_pool))
        same = members[labels[a]]
        p = a
        while p == a:
            p = int(rng.choice(same))
        others = np.flatnonzero(labels != labels[a])
        out[t] = (a, p, int(rng.choice(others)))
    return Dataset(dataset.X, dataset.labels, dataset.ids, dataset.means, dataset.pairs, dataset.gold, out)


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------
# Text: optional "# vemb dim=<d> labels=<0|1>" header, other "#" lines are
#   comments; each record is "id [label] f_1 ... f_d". Without a header the
#   records carry no labels and d comes from the first record.
# Binary: "VEMB" | version u16 | N u64 | d u32 | flags u8 (bit0 labels) |
#   f32[N*d] row-major | i32[N] labels if flagged. Little-endian.

BIN_MAGIC = b"VEMB"
BIN_VERSION = 1
_BIN_HEADER = struct.Struct("<4sHQIB")


def save_embeddings(dataset: Dataset, path, fmt: Optional[str] = None) -> None:
    path = Path(path)
    fmt = fmt or ("binary" if path.suffix in (".bin", ".vemb") else "text")
    if fmt == "binary":
        path.write_bytes(dump_binary(dataset))
    elif fmt == "text":
        path.write_text(dump_text(dataset))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def dump_text(dataset: Dataset) -> str:
    has_labels = dataset.labels is not None
    lines = [f"# vemb dim={dataset.dim} labels={int(has_labels)}"]
    for i, row in enumerate(dataset.X):
        rid = dataset.ids[i] if dataset.ids is not None else str(i)
        head = [rid, str(int(dataset.labels[i]))] if has_labels else [rid]
        lines.append(" ".join(head + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def dump_binary(dataset: Dataset) -> bytes:
    n, d = dataset.X.shape
    flags = 1 if dataset.labels is not None else 0
    parts = [
        _BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, n, d, flags),
        np.ascontiguousarray(dataset.X, dtype="<f4").tobytes(),
    ]
    if flags & 1:
        parts.append(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def parse_text(text: str) -> Dataset:
    dim: Optional[int] = None
    has_labels = False
    ids, labels, rows = [], [], []
    record = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tokens = line[1:].split()
            if tokens and tokens[0] == "vemb":
                if rows:
                    raise DataFormatError(f"line {lineno}: header after records")
                try:
                    fields = dict(t.split("=", 1) for t in tokens[1:])
                    dim = int(fields["dim"])
                    has_labels = bool(int(fields.get("labels", "0")))
                except (KeyError, ValueError) as exc:
                    raise DataFormatError(f"line {lineno}: malformed header {line!r}") from exc
            continue
        tokens = line.split()
        rid, rest = tokens[0], tokens[1:]
        if has_labels:
            if not rest:
                raise DataFormatError(f"record {record}: missing label")
            try:
                labels.append(int(rest[0]))
            except ValueError as exc:
                raise DataFormatError(f"record {record}: label {rest[0]!r} is not an integer") from exc
            rest = rest[1:]
        try:
            values = [float(t) for t in rest]
        except ValueError as exc:
            raise DataFormatError(f"record {record}: {exc}") from exc
        if dim is None:
            dim = len(values)
        if len(values) != dim or dim == 0:
            raise DataFormatError(f"record {record}: expected {dim} values, got {len(values)}")
        if not all(np.isfinite(values)):
            raise DataFormatError(f"record {record}: non-finite value")
        ids.append(rid)
        rows.append(values)
        record += 1
    if not rows:
        raise DataFormatError("no records found")
    return Dataset(np.array(rows), np.array(labels) if has_labels else None, ids)


def parse_binary(blob: bytes) -> Dataset:
    if len(blob) < _BIN_HEADER.size:
        raise DataFormatError("binary embedding file shorter than its header")
    magic, version, n, d, flags = _BIN_HEADER.unpack_from(blob, 0)
    if magic != BIN_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    if version != BIN_VERSION:
        raise DataFormatError(f"unsupported version {version}")
    if n == 0 or d == 0:
        raise DataFormatError("empty matrix")
    expected = _BIN_HEADER.size + 4 * n * d + (4 * n if flags & 1 else 0)
    if len(blob) != expected:
        raise DataFormatError(f"size {len(blob)} does not match header (expected {expected})")
    off = _BIN_HEADER.size
    X = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(X)):
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise DataFormatError(f"record {bad}: non-finite value")
    labels = None
    if flags & 1:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * n * d).astype(np.int64)
    return Dataset(X, labels)


def load_embeddings(path) -> Dataset:
    """Read a text or binary embedding file (sniffed by magic bytes)."""
    blob = Path(path).read_bytes()
    if not blob.strip():
        raise DataFormatError(f"{path}: empty file")
    if blob[:4] == BIN_MAGIC:
        return parse_binary(blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: neither a binary embedding file nor UTF-8 text") from exc
    return parse_text(text)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class BatchSampler:
    """Shuffled index batches; epoch ``e`` uses a stream derived from ``(seed, e)``."""

    n: int
    batch_size: int
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.batch_size > self.n:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {self.n}")

    def epoch(self, epoch: int) -> List[np.ndarray]:
        order = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        stop = self.n - self.n % self.batch_size if self.drop_last else self.n
        return [order[s: s + self.batch_size] for s in range(0, stop, self.batch_size)]

    def __iter__(self) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1


def batches(dataset, batch_size: int, seed=0, drop_last: bool = True, epoch: int = 0) -> List[np.ndarray]:
    """Index batches for one epoch."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    return BatchSampler(n, batch_size, seed, drop_last).epoch(epoch)
