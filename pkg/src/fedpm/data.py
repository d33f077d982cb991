"""Dataset ingestion, synthetic generation and client partitioning."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateIndex,
    InvalidAlpha,
    MalformedLine,
    NonBinaryLabel,
    TooManyClients,
)


@dataclass(frozen=True)
class Dataset:
    """Dense features ``X`` (n x d) and labels ``y``.

    Binary data carries labels in {-1, +1}; multi-class data carries class
    indices ``0 .. n_classes-1``.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int = 2

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.y), -1) if X.size else np.zeros((len(self.y), 0))
        y = np.asarray(self.y)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes)

    def class_indices(self) -> np.ndarray:
        """Labels mapped onto ``0 .. n_classes-1`` (binary: -1 -> 0, +1 -> 1)."""
        if self.n_classes == 2 and np.all(np.isin(self.y, (-1, 1))):
            return (self.y > 0).astype(np.int64)
        return self.y.astype(np.int64)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class Partition:
    shards: tuple  # tuple of sorted int arrays, one per client
    alpha: float | None = None

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


# --- LibSVM -----------------------------------------------------------------


def _parse_label(token: str, lineno: int, binary: bool) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedLine(lineno, 1, f"label {token!r} is not a number") from None
    if binary:
        if value not in (-1.0, 1.0):
            raise NonBinaryLabel(lineno, 1, f"label {token!r} is not +1 or -1")
    elif value != int(value) or value < 0:
        raise MalformedLine(lineno, 1, f"class label {token!r} is not a nonnegative integer")
    return value


def parse_libsvm(source, dim: int | None = None, binary: bool = True) -> Dataset:
    """Parse LibSVM text (``label idx:val ...``, 1-based indices).

    ``source`` may be bytes, str, or a text/binary file object.  ``dim``
    fixes the feature dimension; otherwise the largest index seen is used.
    Unsorted indices are accepted, duplicate indices are not.
    """
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw

    labels: list[float] = []
    rows: list[dict[int, float]] = []
    max_index = 0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        tokens = body.split()
        # column of each token for error reporting
        cols, pos = [], 0
        for tok in tokens:
            pos = body.index(tok, pos)
            cols.append(pos + 1)
            pos += len(tok)
        labels.append(_parse_label(tokens[0], lineno, binary))
        feats: dict[int, float] = {}
        for tok, col in zip(tokens[1:], cols[1:]):
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise MalformedLine(lineno, col, f"expected idx:value, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise MalformedLine(lineno, col, f"cannot parse {tok!r}") from None
            if idx < 1:
                raise MalformedLine(lineno, col, f"feature index {idx} is not 1-based")
            if dim is not None and idx > dim:
                raise MalformedLine(lineno, col, f"feature index {idx} exceeds dimension {dim}")
            if not np.isfinite(val):
                raise MalformedLine(lineno, col, f"non-finite value {val_s!r}")
            if idx in feats:
                raise DuplicateIndex(lineno, col, f"duplicate feature index {idx}")
            feats[idx] = val
            max_index = max(max_index, idx)
        rows.append(feats)

    d = dim if dim is not None else max_index
    X = np.zeros((len(rows), d))
    for r, feats in enumerate(rows):
        for idx, val in feats.items():
            X[r, idx - 1] = val
    if binary:
        y = np.asarray(labels, dtype=np.float64)
        n_classes = 2
    else:
        y = np.asarray(labels, dtype=np.int64)
        n_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, n_classes)


def load_libsvm(path, dim: int | None = None, binary: bool = True) -> Dataset:
    with open(path, "rb") as fh:
        return parse_libsvm(fh, dim=dim, binary=binary)


def dump_libsvm(ds: Dataset, out: IO[str] | None = None) -> str:
    """Render a dataset as LibSVM text with round-trippable floats."""
    lines = []
    binary = ds.n_classes == 2 and np.all(np.isin(ds.y, (-1, 1)))
    for x, label in zip(ds.X, ds.y):
        head = ("+1" if label > 0 else "-1") if binary else str(int(label))
        parts = [head] + [f"{j + 1}:{v:.17g}" for j, v in enumerate(x) if v != 0.0]
        lines.append(" ".join(parts))
    text = "".join(line + "\n" for line in lines)
    if out is not None:
        out.write(text)
    return text


# --- synthetic data ---------------------------------------------------------


def synth_logistic(d: int, n: int, separation: float, seed: int) -> Dataset:
    """Two unit-variance Gaussian clusters at ``+/- separation * u``.

    ``u`` is a random unit vector; labels alternate +1, -1 by index so the
    class counts differ by at most one.
    """
    if d < 1 or n < 2:
        raise DataError("synth_logistic needs d >= 1 and n >= 2")
    rng = np.random.default_rng([seed, 0x5EED])
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X = rng.standard_normal((n, d)) + separation * y[:, None] * u[None, :]
    return Dataset(X, y, 2)


def synth_classes(d: int, n: int, n_classes: int, separation: float, seed: int) -> Dataset:
    """``n_classes`` unit-variance Gaussian clusters with random centers of norm ``separation``."""
    if d < 1 or n < n_classes or n_classes < 2:
        raise DataError("synth_classes needs d >= 1 and n >= n_classes >= 2")
    rng = np.random.default_rng([seed, 0xC1A55])
    centers = rng.standard_normal((n_classes, d))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.arange(n, dtype=np.int64) % n_classes
    X = rng.standard_normal((n, d)) + centers[y]
    return Dataset(X, y, n_classes)


# --- partitioning -----------------------------------------------------------


def partition_even(ds: Dataset, n_clients: int) -> Partition:
    """Round-robin split: sample ``j`` goes to client ``j mod N``."""
    n = len(ds)
    if n_clients < 1:
        raise DataError("need at least one client")
    if n_clients > n:
        raise TooManyClients(f"{n_clients} clients for {n} samples")
    idx = np.arange(n)
    return Partition(tuple(idx[i::n_clients] for i in range(n_clients)))


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``total * proportions``.

    Leftover units go to the largest fractional parts; ties favour lower indices.
    """
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(raw.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_proportions(alpha: float, n_clients: int, seed: int, cls: int) -> np.ndarray:
    # one stream per (seed, class): independent of the order classes are visited
    rng = np.random.default_rng([seed, cls, 0xD1])
    g = rng.gamma(alpha, 1.0, size=n_clients)
    s = g.sum()
    if s == 0.0:
        # every draw underflowed (alpha far below 1): all mass to one random client
        g = np.zeros(n_clients)
        g[rng.integers(n_clients)] = 1.0
        s = 1.0
    return g / s


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Label-skew split with per-class client proportions drawn from Dirichlet(alpha)."""
    if not (alpha > 0 and np.isfinite(alpha)):
        raise InvalidAlpha(f"alpha must be positive and finite, got {alpha}")
    if n_clients < 1:
        raise DataError("need at least one client")
    if n_clients > len(ds):
        raise TooManyClients(f"{n_clients} clients for {len(ds)} samples")
    labels = ds.class_indices()
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        p = dirichlet_proportions(alpha, n_clients, seed, int(c))
        members = np.random.default_rng([seed, int(c), 0x5F]).permutation(members)
        counts = largest_remainder(members.size, p)
        start = 0
        for i, k in enumerate(counts):
            buckets[i].extend(members[start:start + k].tolist())
            start += k
    # every client must hold data for the 1/N-weighted averages downstream
    for i in range(n_clients):
        if not buckets[i]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            donor_items = sorted(buckets[donor])
            moved = donor_items[-1]
            buckets[donor].remove(moved)
            buckets[i].append(moved)
    shards = tuple(np.array(sorted(b), dtype=np.int64) for b in buckets)
    return Partition(shards, alpha)
