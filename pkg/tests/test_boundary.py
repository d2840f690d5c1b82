import numpy as np
import pytest

from archsim.boundary import (barycentric_grid, boundary_disagreement_oracle, constant_planar, flip_radius,
                              linear_planar, min_flip_distance_similarity, planar_dataset, rank_benchmark,
                              spearman, triplet_plane_similarity, RankReport)

BOX = ((-1.0, 1.0), (-1.0, 1.0))


def test_oracle_identity_symmetry_and_linear_closed_form():
    f = linear_planar("f", [1.0, 0.0], 0.0)          # boundary x = 0
    for t in (0.1, 0.37, 0.8):
        g = linear_planar("g", [1.0, 0.0], -t)       # boundary x = t
        d = boundary_disagreement_oracle(f, g, BOX, grid_n=2000)
        assert abs(d - t / 2) < 1e-3
        assert d == boundary_disagreement_oracle(g, f, BOX, grid_n=2000)
    assert boundary_disagreement_oracle(f, f, BOX) == 0.0


def test_oracle_triangle_inequality():
    f = linear_planar("f", [1.0, 0.2], 0.0)
    g = linear_planar("g", [0.3, 1.0], 0.1)
    h = linear_planar("h", [-1.0, 0.5], 0.2)
    d = boundary_disagreement_oracle
    assert d(f, h, BOX) <= d(f, g, BOX) + d(g, h, BOX) + 1e-12


def test_oracle_rejects_bad_input():
    f = linear_planar("f", [1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        boundary_disagreement_oracle(f, f, ((0, 0), (0, 1)))
    with pytest.raises(ValueError):
        boundary_disagreement_oracle(f, f, BOX, grid_n=50)


def test_triplet_identity_and_constant_models():
    pts = np.random.default_rng(0).uniform(0, 1, size=(30, 2))
    f = linear_planar("f", [1.0, -1.0], 0.0)
    assert triplet_plane_similarity(f, f, pts, 5, 10) == 1.0
    a, b = constant_planar("a", 0), constant_planar("b", 1)
    assert triplet_plane_similarity(a, b, pts, 5, 10) == 0.0


def test_triplet_resamples_collinear():
    pts = np.array([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3], [0.9, 0.1]])
    f = linear_planar("f", [1.0, -1.0], 0.0)
    assert triplet_plane_similarity(f, f, pts, 4, 6) == 1.0
    with pytest.raises(RuntimeError):
        triplet_plane_similarity(f, linear_planar("g", [1, 1], -0.5), pts[:3], 1, 5)


def test_barycentric_grid_sums_to_one():
    g = barycentric_grid(5)
    assert len(g) == 15
    np.testing.assert_allclose(g.sum(1), 1.0)
    assert (g >= -1e-12).all()


def test_min_flip_linear_closed_form():
    f = linear_planar("f", [1.0, 0.0], -0.4)    # class 1 when x > 0.4
    g = linear_planar("g", [1.0, 0.0], -0.6)    # class 1 when x > 0.6
    x = np.array([[0.1, 0.5], [0.2, 0.3], [0.3, 0.7]], np.float32).reshape(3, 1, 2, 1)
    y = np.zeros(3, int)
    df = flip_radius(f.model, x, y, 0.9)
    np.testing.assert_allclose(df, [0.3, 0.2, 0.1], atol=1e-5)
    res = min_flip_distance_similarity(f, g, x, y, max_radius=0.9)
    assert res.dissimilarity == pytest.approx(0.2, abs=1e-5)
    assert res.skipped == 0
    assert min_flip_distance_similarity(f, f, x, y, 0.9).dissimilarity == 0


def test_min_flip_counts_skips():
    f = linear_planar("f", [1.0, 0.0], -0.4)
    x = np.array([[0.0, 0.5], [0.35, 0.5]], np.float32).reshape(2, 1, 2, 1)
    res = min_flip_distance_similarity(f, f, x, np.zeros(2, int), max_radius=0.1)
    assert res.skipped == 1 and res.evaluated == 1


def test_rank_benchmark_flags_identical_zoo():
    data = planar_dataset(0, 400)
    models = [linear_planar(f"m{i}", [1.0, -1.0], 0.0) for i in range(8)]
    rep = rank_benchmark(models, data, seeds=(0,), grid_n=100, num_triplets=2, triplet_grid=5, epsilon=0.05)
    assert rep.degenerate
    assert len(rep.pairs) == 28
    assert rep.rho["oracle"] != rep.rho["oracle"] or rep.rho["oracle"] == 1.0  # NaN when all tie
    with pytest.raises(ValueError):
        rank_benchmark(models[:7], data)


def test_spearman_oracle_vs_itself():
    x = [0.1, 0.3, 0.2, 0.5]
    assert spearman(x, x) == pytest.approx(1.0)


def test_report_outputs(tmp_path):
    rep = RankReport([("a", "b"), ("a", "c")], [0.1, 0.2], {"oracle": [0.1, 0.2], "sat": [2.0, 1.0]},
                     {"sat": -1.0}, {"sat": 0.0}, 0.01, False, 0.0)
    rep.save(tmp_path, svg=True)
    assert (tmp_path / "boundary-lab.csv").read_text().startswith("a,b,oracle")
    assert (tmp_path / "boundary-lab.svg").read_text().startswith("<svg")
