"""Spectral clustering of a similarity graph (normalized affinity + K-means++)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from archsim import rng as rngmod
from archsim.sat import SimilarityMatrix

log = logging.getLogger(__name__)

ADJACENCY_MODES = ("percent", "shifted-log")


# ---------------------------------------------------------------- eigensolver


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and matching column eigenvectors,
    each with its largest-magnitude component made positive.  Rotation order
    is fixed, so the result is reproducible bit for bit.
    """
    A = np.array(a, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("matrix must be square and symmetric")
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq
    else:
        log.warning("jacobi_eigh: no convergence after %d sweeps", max_sweeps)
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    for k in range(n):
        i = int(np.argmax(np.abs(V[:, k])))
        if V[i, k] < 0:
            V[:, k] = -V[:, k]
    return w, V


# ---------------------------------------------------------------- adjacency


def adjacency_from_sat(sm: SimilarityMatrix, mode: str = "percent"):
    """Nonnegative symmetric adjacency with a zero diagonal.

    Returns ``(adjacency, kept_names, dropped_names)``.  Nodes missing more
    than half their pairs are dropped; remaining missing pairs get weight 0.
    """
    if mode not in ADJACENCY_MODES:
        raise ValueError(f"mode must be one of {ADJACENCY_MODES}")
    names = list(sm.model_names)
    if mode == "percent":
        A = np.array(sm.raw_transfer, dtype=np.float64)
    else:
        A = np.array(sm.values, dtype=np.float64) - np.log(sm.config.epsilon_floor)
    missing = ~np.isfinite(A)
    np.fill_diagonal(missing, False)
    keep = missing.sum(1) <= (len(names) - 1) / 2
    dropped = [n for n, k in zip(names, keep) if not k]
    A = np.where(np.isfinite(A), A, 0.0)[np.ix_(keep, keep)]
    if (A < 0).any():
        raise AssertionError("negative similarity entry; SimilarityMatrix invariant violated")
    np.fill_diagonal(A, 0.0)
    A = 0.5 * (A + A.T)
    return A, [n for n, k in zip(names, keep) if k], dropped


# ---------------------------------------------------------------- k-means


def _kmeans_pp_init(X, k, rng):
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300):
    """Lloyd iterations from a K-means++ start.  Returns (labels, centers, objective)."""
    C = _kmeans_pp_init(X, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        new = d2.argmin(1)  # ties -> lowest index
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(0)
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(1)
    objective = float(d2[np.arange(len(X)), labels].sum())
    return labels, C, objective


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Rename clusters in order of first appearance."""
    mapping = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(l)] for l in labels], dtype=np.int64)


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterAssignment:
    model_names: list[str]
    labels: np.ndarray
    embedding: np.ndarray
    kmeans_objective: float
    config: dict
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dropped: list[str] = field(default_factory=list)
    restart_objectives: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.config["k"])

    def members(self, cluster: int) -> list[str]:
        return [n for n, l in zip(self.model_names, self.labels) if l == cluster]

    def to_dict(self) -> dict:
        return {
            "format": "archsim-clusters/1",
            "model-names": self.model_names,
            "labels": [int(l) for l in self.labels],
            "embedding": np.round(self.embedding, 12).tolist(),
            "kmeans-objective": round(self.kmeans_objective, 12),
            "eigenvalues": np.round(self.eigenvalues, 12).tolist(),
            "config": self.config,
            "dropped": self.dropped,
        }

    def save(self, path) -> Path:
        p = Path(path)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return p

    @classmethod
    def load(cls, path) -> "ClusterAssignment":
        d = json.loads(Path(path).read_text())
        return cls(d["model-names"], np.array(d["labels"]), np.array(d["embedding"]),
                   d["kmeans-objective"], d["config"], np.array(d.get("eigenvalues", [])),
                   d.get("dropped", []))


def spectral_embedding(adjacency: np.ndarray, k: int):
    """Top-k eigenvectors of D^-1/2 A D^-1/2, rows normalized to unit length."""
    A = np.asarray(adjacency, dtype=np.float64)
    deg = A.sum(1)
    inv = 1.0 / np.sqrt(deg)
    M = A * inv[:, None] * inv[None, :]
    w, V = jacobi_eigh(M)
    U = V[:, :k]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    return U / np.where(norms > 0, norms, 1.0), w, M


def spectral_cluster(adjacency: np.ndarray, k: int = 10, restarts: int = 100, seed: int = 0,
                     names: Sequence[str] | None = None) -> ClusterAssignment:
    """Ng-Jordan-Weiss spectral clustering; best of ``restarts`` K-means++ runs."""
    A = np.asarray(adjacency, dtype=np.float64)
    n = A.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(n)]
    if A.shape != (n, n) or not np.allclose(A, A.T) or (A < 0).any():
        raise ValueError("adjacency must be square, symmetric and nonnegative")
    A = A.copy()
    np.fill_diagonal(A, 0.0)
    isolated = A.sum(1) <= 0
    dropped = [nm for nm, iso in zip(names, isolated) if iso]
    if dropped:
        log.warning("dropping isolated nodes: %s", dropped)
        keep = ~isolated
        A = A[np.ix_(keep, keep)]
        names = [nm for nm, iso in zip(names, isolated) if not iso]
        n = len(names)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N (K={k}, N={n})")
    U, w, _ = spectral_embedding(A, k)
    best = None
    objectives = []
    for r in range(restarts):
        labels, _, obj = kmeans(U, k, rngmod.stream(seed, "kmeans", r))
        objectives.append(obj)
        if best is None or obj < best[1] - 1e-12:
            best = (labels, obj)
    return ClusterAssignment(names, _canonical(best[0]), U, best[1],
                             {"k": k, "restarts": restarts, "seed": seed}, w, dropped, objectives)


def spectral_distance_map(assignment: ClusterAssignment):
    """Pairwise Euclidean distances of spectral features, sorted by cluster index."""
    order = np.argsort(assignment.labels, kind="stable")
    E = assignment.embedding[order]
    D = np.sqrt(np.maximum(((E[:, None, :] - E[None, :, :]) ** 2).sum(-1), 0.0))
    return [assignment.model_names[i] for i in order], D


def cluster_purity(labels: Sequence[int], truth: Sequence[str]) -> float:
    """Fraction of items whose cluster's majority ground-truth tag matches their own."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    total = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        total += counts.max()
    return total / len(labels)
