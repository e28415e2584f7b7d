"""Target feature memory bank, neighbor search and the neighborhood-invariance loss."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

LOG_FLOOR = np.log(1e-12)


class MemoryBank:
    """N_t x D store of L2-normalized target features.

    ``mode`` is ``"adaptive"`` (relative-ratio neighborhoods governed by
    ``epsilon``) or ``"knn"`` (fixed ``k`` nearest rows).
    """

    def __init__(self, num_samples: int, dim: int, tau: float = 10.0, epsilon: float = 0.875,
                 mode: str = "adaptive", k: int = 5):
        if tau <= 0:
            raise DomainError("tau must be positive")
        if not 0.0 < epsilon <= 1.0:
            raise DomainError("epsilon must lie in (0, 1]")
        if mode not in ("adaptive", "knn"):
            raise DomainError(f"unknown neighborhood mode {mode!r}")
        self.rows = np.zeros((num_samples, dim))
        self.written = np.zeros(num_samples, dtype=bool)
        self.tau = tau
        self.epsilon = epsilon
        self.mode = mode
        self.k = k

    @classmethod
    def from_features(cls, features: np.ndarray, **kwargs) -> "MemoryBank":
        features = np.asarray(features, dtype=np.float64)
        bank = cls(features.shape[0], features.shape[1], **kwargs)
        memory_update(bank, np.arange(features.shape[0]), features)
        return bank

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    def update(self, indices, features):
        return memory_update(self, indices, features)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *[f"f{i}" for i in range(self.rows.shape[1])]])
            for j, row in enumerate(self.rows):
                w.writerow([j, *(repr(float(v)) for v in row)])


@dataclass
class NeighborSet:
    query_index: int
    neighbor_indices: np.ndarray
    confidences: np.ndarray


def memory_update(bank: MemoryBank, indices, features) -> MemoryBank:
    """Overwrite rows ``indices`` with the L2-normalized ``features`` (no gradient)."""
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape != (indices.size, bank.rows.shape[1]):
        raise ShapeError(f"features {features.shape} for {indices.size} indices of dim {bank.rows.shape[1]}")
    if indices.size and (indices.min() < 0 or indices.max() >= bank.size):
        raise IndexError("memory index out of range")
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("cannot normalize a zero or non-finite feature")
    bank.rows[indices] = features / norms[:, None]
    bank.written[indices] = True
    return bank


def similarities(bank: MemoryBank, query_index: int) -> np.ndarray:
    return bank.rows @ bank.rows[query_index]


def neighbor_probs(bank: MemoryBank, query_index: int) -> np.ndarray:
    logits = bank.tau * similarities(bank, query_index)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def neighborhood_masks(bank: MemoryBank, queries: Sequence[int], mode: str | None = None,
                       epsilon: float | None = None, k: int | None = None) -> np.ndarray:
    """Boolean (len(queries), N_t) membership matrix of each query's neighborhood."""
    mode = mode or bank.mode
    queries = np.asarray(queries, dtype=np.int64)
    n = bank.size
    if n < 2:
        raise DomainError("neighbor search needs at least two memory rows")
    sims = bank.rows[queries] @ bank.rows.T
    rows = np.arange(queries.size)
    sims[rows, queries] = -np.inf
    mask = np.zeros(sims.shape, dtype=bool)
    if mode == "adaptive":
        eps = bank.epsilon if epsilon is None else epsilon
        nearest = np.argmax(sims, axis=1)  # lowest index on ties
        best = sims[rows, nearest]
        mask = sims > eps * best[:, None]
        mask[rows, nearest] = True
    elif mode == "knn":
        k = bank.k if k is None else k
        if not 1 <= k <= n - 1:
            raise DomainError(f"k={k} outside [1, {n - 1}]")
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        mask[rows[:, None], order] = True
    else:
        raise DomainError(f"unknown neighborhood mode {mode!r}")
    mask[rows, queries] = False
    return mask


def adaptive_neighborhood(bank: MemoryBank, query_index: int, epsilon: float | None = None) -> np.ndarray:
    """Rows whose similarity beats ``epsilon`` times the nearest row's; the nearest is always kept."""
    return np.flatnonzero(neighborhood_masks(bank, [query_index], "adaptive", epsilon=epsilon)[0])


def knn_neighborhood(bank: MemoryBank, query_index: int, k: int | None = None) -> np.ndarray:
    return np.flatnonzero(neighborhood_masks(bank, [query_index], "knn", k=k)[0])


def jaccard_confidence(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(int(i) for i in a), set(int(i) for i in b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def build_neighbor_sets(bank: MemoryBank, queries: Sequence[int], use_confidence: bool = True) -> Dict[int, NeighborSet]:
    """Neighborhoods and Jaccard weights for every query against the current bank.

    The neighborhoods of the queries' neighbors are searched too, since the
    confidence of a pair compares both sides.
    """
    queries = np.asarray(queries, dtype=np.int64)
    qmask = neighborhood_masks(bank, queries)
    out = {}
    if not use_confidence:
        for j, m in zip(queries, qmask):
            idx = np.flatnonzero(m)
            out[int(j)] = NeighborSet(int(j), idx, np.ones(idx.size))
        return out

    needed = np.flatnonzero(qmask.any(axis=0))
    known = {int(j): m for j, m in zip(queries, qmask)}
    missing = [i for i in needed if int(i) not in known]
    if missing:
        for i, m in zip(missing, neighborhood_masks(bank, missing)):
            known[int(i)] = m
    for j, m in zip(queries, qmask):
        idx = np.flatnonzero(m)
        if idx.size:
            other = np.stack([known[int(i)] for i in idx])
            inter = (other & m).sum(axis=1)
            union = (other | m).sum(axis=1)
            w = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        else:
            w = np.zeros(0)
        out[int(j)] = NeighborSet(int(j), idx, w.astype(np.float64))
    return out


def nil_value(neighbor_probabilities, confidences) -> float:
    """-(1/|N|) * sum_k w_k log p_k for one query's neighbor probabilities."""
    p = np.asarray(neighbor_probabilities, dtype=np.float64)
    w = np.asarray(confidences, dtype=np.float64)
    if p.size == 0:
        return 0.0
    return -float(np.dot(w, np.maximum(np.log(np.maximum(p, 1e-12)), LOG_FLOOR))) / p.size


def loss_nil(bank: MemoryBank, query_index: int, query_feature_live: np.ndarray,
             neighbors: NeighborSet | None = None, use_confidence: bool = True):
    """Confidence-weighted negative log neighbor probability for one target query.

    Only the live feature of the query carries gradient; other memory rows are
    constants. Returns ``(loss, d loss / d query_feature_live)``.
    """
    z = np.asarray(query_feature_live, dtype=np.float64)
    if neighbors is None:
        neighbors = build_neighbor_sets(bank, [query_index], use_confidence)[query_index]
    idx, w = neighbors.neighbor_indices, neighbors.confidences
    if idx.size == 0 or not np.any(w):
        return 0.0, np.zeros_like(z)

    norm = np.linalg.norm(z)
    if norm == 0:
        raise NumericError("zero query feature")
    m = z / norm
    sims = bank.rows @ m
    sims[query_index] = 1.0
    logits = bank.tau * sims
    top = logits.max()
    lse = top + np.log(np.exp(logits - top).sum())
    logp = logits[idx] - lse
    live = logp > LOG_FLOOR
    logp = np.maximum(logp, LOG_FLOOR)
    count = idx.size
    loss = -float(np.dot(w, logp)) / count

    p = np.exp(logits - lse)
    wl = np.where(live, w, 0.0)
    coef = -(bank.tau / count) * (-wl.sum() * p)
    coef[idx] += -(bank.tau / count) * wl
    coef[query_index] = 0.0  # self-similarity is pinned at 1
    grad_m = coef @ bank.rows
    grad_z = (grad_m - m * np.dot(m, grad_m)) / norm
    return loss, grad_z


def brute_force_neighbors(features: np.ndarray, query_index: int, epsilon: float | None = None,
                          k: int | None = None) -> set:
    """Reference neighbor search by explicit loops over normalized copies.

    Pass exactly one of ``epsilon`` (adaptive rule) or ``k`` (k nearest).
    """
    if (epsilon is None) == (k is None):
        raise DomainError("give exactly one of epsilon or k")
    rows = []
    for f in features:
        f = [float(v) for v in f]
        n = sum(v * v for v in f) ** 0.5
        rows.append([v / n for v in f])
    q = rows[query_index]
    sims = {}
    for i, r in enumerate(rows):
        if i != query_index:
            sims[i] = float(np.dot(q, r))
    if k is not None:
        ranked = sorted(sims, key=lambda i: (-sims[i], i))
        return set(ranked[:k])
    nearest = min(sims, key=lambda i: (-sims[i], i))
    thresh = epsilon * sims[nearest]
    out = {i for i, s in sims.items() if s > thresh}
    out.add(nearest)
    return out


def relative_neighbor_ratio(bank: MemoryBank, labels: np.ndarray, major: int, minor: int,
                            mode: str | None = None, **kw) -> float:
    """(n_minor / n_major) * (k_major / k_minor), k being mean neighborhood size per class."""
    labels = np.asarray(labels)
    sizes = neighborhood_masks(bank, np.arange(bank.size), mode, **kw).sum(axis=1)
    n_major, n_minor = np.sum(labels == major), np.sum(labels == minor)
    k_major, k_minor = sizes[labels == major].mean(), sizes[labels == minor].mean()
    return float((n_minor / n_major) * (k_major / k_minor))
