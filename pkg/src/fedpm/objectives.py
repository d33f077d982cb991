"""Objectives with exact gradients and curvature.

Every objective exposes ``dim``, ``value``, ``gradient`` and (for the
full-curvature ones) ``hessian``.  The MLP instead exposes
``loss_and_gradient`` over sample subsets plus per-layer FOOF statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, LengthMismatch, ShapeMismatch
from .linalg import matrix_mean, symmetrize


def _check_theta(theta: np.ndarray, d: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (d,):
        raise DimensionMismatch(f"parameter has shape {theta.shape}, expected ({d},)")
    return theta


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log1pexp_neg(z: np.ndarray) -> np.ndarray:
    """Stable ``log(1 + exp(-z))``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.log1p(np.exp(-z[pos]))
    out[~pos] = -z[~pos] + np.log1p(np.exp(z[~pos]))
    return out


class LogisticL2Objective:
    """``(1/M) sum log(1 + exp(-y x^T theta)) + (lam/2) ||theta||^2`` on one shard."""

    def __init__(self, X: np.ndarray, y: np.ndarray, lam: float, dim: int | None = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2:
            if X.size == 0 and dim is not None:
                X = X.reshape(0, dim)
            else:
                raise ShapeMismatch(f"features must be 2-D, got {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("logistic labels must be exactly -1 or +1")
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.X = X
        self.y = y
        self.lam = float(lam)
        self.dim = X.shape[1]
        self._yX = y[:, None] * X

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def margins(self, theta: np.ndarray) -> np.ndarray:
        return self._yX @ theta

    def value(self, theta: np.ndarray) -> float:
        theta = _check_theta(theta, self.dim)
        reg = 0.5 * self.lam * float(theta @ theta)
        if self.n_samples == 0:
            return reg
        return float(np.mean(log1pexp_neg(self.margins(theta)))) + reg

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = _check_theta(theta, self.dim)
        g = self.lam * theta
        if self.n_samples:
            s = sigmoid(-self.margins(theta))
            g = g - (self._yX.T @ s) / self.n_samples
        return g

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        theta = _check_theta(theta, self.dim)
        H = self.lam * np.eye(self.dim)
        if self.n_samples:
            s = sigmoid(self.margins(theta))
            w = s * (1.0 - s)
            H = H + (self.X.T * w) @ self.X / self.n_samples
        return symmetrize(H)

    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        # sign(0) -> +1
        return np.where(np.asarray(X) @ theta >= 0.0, 1.0, -1.0)


class QuadraticObjective:
    """``0.5 theta^T A theta - b^T theta`` with constant symmetric ``A``."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = symmetrize(A)
        b = np.asarray(b, dtype=np.float64)
        if A.shape != (b.size, b.size):
            raise ShapeMismatch(f"A has shape {A.shape} but b has length {b.size}")
        self.A = A
        self.b = b
        self.dim = b.size

    def value(self, theta: np.ndarray) -> float:
        theta = _check_theta(theta, self.dim)
        return float(0.5 * theta @ self.A @ theta - self.b @ theta)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = _check_theta(theta, self.dim)
        return self.A @ theta - self.b

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        _check_theta(theta, self.dim)
        return self.A.copy()


class MeanObjective:
    """Uniform average ``(1/N) sum f_i`` of full-curvature client objectives."""

    def __init__(self, parts: Sequence):
        if not parts:
            raise ValueError("MeanObjective needs at least one part")
        self.parts = list(parts)
        self.dim = self.parts[0].dim

    def value(self, theta: np.ndarray) -> float:
        total = 0.0
        for f in self.parts:
            total += f.value(theta)
        return total / len(self.parts)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return matrix_mean([f.gradient(theta) for f in self.parts])

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        return symmetrize(matrix_mean([f.hessian(theta) for f in self.parts]))

    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self.parts[0].predict(theta, X)


def has_hessian(obj) -> bool:
    return callable(getattr(obj, "hessian", None))


# --- layer layout -----------------------------------------------------------


def vec_layout(G: np.ndarray) -> np.ndarray:
    """Flatten an in x out matrix column by column (column-major)."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {G.shape}")
    return G.reshape(-1, order="F")


def unvec_layout(segment: np.ndarray, n_in: int, n_out: int) -> np.ndarray:
    segment = np.asarray(segment, dtype=np.float64)
    if segment.size != n_in * n_out:
        raise LengthMismatch(f"segment of length {segment.size} cannot hold a {n_in}x{n_out} matrix")
    return segment.reshape((n_in, n_out), order="F")


@dataclass(frozen=True)
class LayerSlot:
    n_in: int  # includes the bias row
    n_out: int
    start: int

    @property
    def stop(self) -> int:
        return self.start + self.n_in * self.n_out


@dataclass(frozen=True)
class FoofStats:
    """Per-layer uncentered input second moments ``A_l = (1/M) sum a a^T``."""

    matrices: tuple
    sample_count: int


@dataclass
class MlpObjective:
    """Fully connected ReLU network with a softmax cross-entropy head.

    Layer ``l`` holds a ``(n_{l-1} + 1) x n_l`` weight matrix whose last row
    is the bias; inputs are augmented with a constant 1.
    """

    layer_dims: Sequence[int]
    X: np.ndarray
    labels: np.ndarray
    l2: float = 0.0
    layout: tuple = field(init=False)

    def __post_init__(self):
        dims = [int(n) for n in self.layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        self.layer_dims = tuple(dims)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, dims[0])
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.X.shape[0],):
            raise ShapeMismatch(f"{self.X.shape[0]} samples but {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= dims[-1]):
            raise ValueError("class labels out of range for the output layer")
        slots, start = [], 0
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            slots.append(LayerSlot(n_in + 1, n_out, start))
            start += (n_in + 1) * n_out
        self.layout = tuple(slots)
        self.dim = start

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def foof_sizes(self) -> list[int]:
        return [s.n_in for s in self.layout]

    def weights(self, theta: np.ndarray) -> list[np.ndarray]:
        theta = _check_theta(theta, self.dim)
        return [unvec_layout(theta[s.start:s.stop], s.n_in, s.n_out) for s in self.layout]

    def flatten(self, weights: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([vec_layout(W) for W in weights])

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        Ws = []
        for s in self.layout:
            W = np.zeros((s.n_in, s.n_out))
            W[:-1] = rng.standard_normal((s.n_in - 1, s.n_out)) * np.sqrt(2.0 / (s.n_in - 1))
            Ws.append(W)
        return self.flatten(Ws)

    def _select(self, idx) -> np.ndarray:
        if idx is None:
            idx = np.arange(self.n_samples)
        # sorted order keeps reductions independent of how the batch was listed
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        if idx.size == 0:
            raise EmptyBatch("batch has no samples")
        return idx

    def _forward(self, Ws, X):
        inputs, pre = [], []
        h = X
        for l, W in enumerate(Ws):
            a = np.hstack([h, np.ones((h.shape[0], 1))])
            z = a @ W
            inputs.append(a)
            pre.append(z)
            h = np.maximum(z, 0.0) if l < len(Ws) - 1 else z
        return inputs, pre, h

    def logits(self, theta: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
        X = self.X if X is None else np.asarray(X, dtype=np.float64)
        return self._forward(self.weights(theta), X)[2]

    def loss_and_gradient(self, theta: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        """Mean softmax cross-entropy over ``idx`` (all samples by default) and its gradient."""
        Ws = self.weights(theta)
        idx = self._select(idx)
        X, y = self.X[idx], self.labels[idx]
        m = idx.size
        inputs, pre, out = self._forward(Ws, X)
        shifted = out - out.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logZ - shifted[np.arange(m), y]))
        delta = np.exp(shifted - logZ[:, None])
        delta[np.arange(m), y] -= 1.0
        delta /= m
        grads = [None] * len(Ws)
        for l in range(len(Ws) - 1, -1, -1):
            grads[l] = inputs[l].T @ delta
            if l > 0:
                delta = (delta @ Ws[l][:-1].T) * (pre[l - 1] > 0.0)
        g = self.flatten(grads)
        if self.l2:
            theta = np.asarray(theta, dtype=np.float64)
            loss += 0.5 * self.l2 * float(theta @ theta)
            g = g + self.l2 * theta
        return loss, g

    def value(self, theta: np.ndarray) -> float:
        return self.loss_and_gradient(theta)[0]

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.loss_and_gradient(theta)[1]

    def foof_stats(self, theta: np.ndarray, idx=None) -> FoofStats:
        Ws = self.weights(theta)
        idx = self._select(idx)
        inputs, _, _ = self._forward(Ws, self.X[idx])
        mats = tuple(symmetrize(a.T @ a / idx.size) for a in inputs)
        return FoofStats(mats, int(idx.size))

    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(theta, X), axis=1)


def compute_foof_stats(obj: MlpObjective, theta: np.ndarray, idx=None) -> FoofStats:
    return obj.foof_stats(theta, idx)


def mlp_loss_and_gradient(obj: MlpObjective, theta: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
    return obj.loss_and_gradient(theta, idx)


def logistic_value(obj: LogisticL2Objective, theta: np.ndarray) -> float:
    return obj.value(theta)


def logistic_gradient(obj: LogisticL2Objective, theta: np.ndarray) -> np.ndarray:
    return obj.gradient(theta)


def logistic_hessian(obj: LogisticL2Objective, theta: np.ndarray) -> np.ndarray:
    return obj.hessian(theta)
