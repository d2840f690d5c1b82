import math

import numpy as np
import pytest

from archsim.attacks import AttackConfig
from archsim.sat import SatConfig, SimilarityMatrix
from archsim.spectral import (ClusterAssignment, adjacency_from_sat, cluster_purity, jacobi_eigh, kmeans,
                              spectral_cluster, spectral_distance_map, spectral_embedding)
from archsim import rng as rngmod


def _blocks(sizes, within=90.0, across=5.0):
    n = sum(sizes)
    A = np.full((n, n), across)
    start = 0
    for s in sizes:
        A[start:start + s, start:start + s] = within
        start += s
    np.fill_diagonal(A, 0)
    return A


def _same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(len(a)) for j in range(len(a)))


@pytest.mark.parametrize("n", [2, 5, 9])
def test_jacobi_matches_reference(n):
    rng = np.random.default_rng(n)
    M = rng.normal(size=(n, n))
    M = M + M.T
    w, V = jacobi_eigh(M)
    ref = np.linalg.eigvalsh(M)[::-1]
    np.testing.assert_allclose(w, ref, atol=1e-10)
    assert np.abs(M @ V - V * w).max() < 1e-8
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-10)
    for k in range(n):
        assert V[np.argmax(np.abs(V[:, k])), k] > 0


def test_jacobi_is_bit_reproducible():
    M = _blocks([3, 4]) / 90
    a, b = jacobi_eigh(M), jacobi_eigh(M)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_planted_blocks_recovered_any_seed():
    A = _blocks([4, 3, 5])
    truth = [0] * 4 + [1] * 3 + [2] * 5
    for seed in range(5):
        ca = spectral_cluster(A, k=3, restarts=10, seed=seed)
        assert _same_partition(ca.labels, truth)


def test_two_block_exact():
    A = _blocks([5, 5])
    ca = spectral_cluster(A, k=2, restarts=100, seed=0)
    assert ca.labels.tolist() == [0] * 5 + [1] * 5
    np.testing.assert_allclose(np.linalg.norm(ca.embedding, axis=1), 1.0)


def test_scale_invariance_exact():
    rng = np.random.default_rng(1)
    A = _blocks([3, 4, 3]) + rng.uniform(0, 3, size=(10, 10))
    A = (A + A.T) / 2
    base = spectral_cluster(A, k=3, restarts=20, seed=0)
    for c in (0.5, 7.0):
        assert spectral_cluster(A * c, k=3, restarts=20, seed=0).labels.tolist() == base.labels.tolist()


def test_permutation_equivariance():
    A = _blocks([3, 4, 3])
    perm = rngmod.stream(0, "perm").permutation(10)
    a = spectral_cluster(A, k=3, restarts=20, seed=0)
    b = spectral_cluster(A[np.ix_(perm, perm)], k=3, restarts=20, seed=0)
    assert _same_partition(a.labels[perm], b.labels)


def test_restart_monotonicity_and_isolated_nodes():
    A = _blocks([3, 3])
    A = np.pad(A, ((0, 1), (0, 1)))
    ca = spectral_cluster(A, k=2, restarts=30, seed=2, names=list("abcdefg"))
    assert ca.dropped == ["g"] and len(ca.labels) == 6
    assert ca.kmeans_objective <= min(ca.restart_objectives) + 1e-12
    with pytest.raises(ValueError):
        spectral_cluster(A[:6, :6], k=7)


def test_kmeans_ties_lowest_index():
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    labels, _, obj = kmeans(X, 2, np.random.default_rng(0))
    assert sorted(labels.tolist()) == [0, 1] and obj == 0


def test_distance_map_properties():
    emb = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    ca = ClusterAssignment(["a", "b", "c"], np.array([0, 0, 1]), emb, 0.0, {"k": 2})
    names, D = spectral_distance_map(ca)
    assert names == ["a", "b", "c"]
    assert D[0, 1] == 0
    assert D[0, 2] == pytest.approx(math.sqrt(2))


def test_adjacency_from_sat_preserves_blocks_and_zeroes_diagonal():
    names = list("abcd")
    raw = _blocks([2, 2]) + np.eye(4) * 100
    sm = SimilarityMatrix(names, np.log(raw), raw, SatConfig(), np.full((4, 4), 10))
    A, kept, dropped = adjacency_from_sat(sm)
    assert kept == names and dropped == []
    assert np.all(np.diag(A) == 0) and np.allclose(A, A.T)
    assert A[0, 1] == 90 and A[0, 2] == 5
    np.testing.assert_allclose(A.sum(1), raw.sum(1) - 100)
    A2, _, _ = adjacency_from_sat(sm, "shifted-log")
    assert (A2 >= 0).all()


def test_all_equal_offdiagonal_is_complete_graph():
    names = list("abc")
    raw = np.full((3, 3), 20.0)
    sm = SimilarityMatrix(names, np.log(raw), raw, SatConfig(), np.ones((3, 3)))
    A, _, _ = adjacency_from_sat(sm)
    assert (A == 20 * (1 - np.eye(3))).all()


def test_eigen_accuracy_on_normalized_affinity():
    A = _blocks([3, 4])
    U, w, M = spectral_embedding(A, 2)
    _, V = jacobi_eigh(M)
    assert np.abs(M @ V - V * w).max() < 1e-8


def test_purity():
    assert cluster_purity([0, 0, 1, 1], ["x", "x", "y", "y"]) == 1.0
    assert cluster_purity([0, 0, 0, 0], ["x", "x", "y", "y"]) == 0.5


def test_assignment_roundtrip(tmp_path):
    ca = spectral_cluster(_blocks([2, 2]), k=2, restarts=3, seed=0, names=list("abcd"))
    ca.save(tmp_path / "c.json")
    back = ClusterAssignment.load(tmp_path / "c.json")
    assert back.labels.tolist() == ca.labels.tolist() and back.model_names == ca.model_names
