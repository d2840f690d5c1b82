"""Acceptance criteria, one test per criterion.

The desk zoo is read from a model cache (``ARCHSIM_ZOO_CACHE``, default
``.cache/zoo`` at the repository root) and trained on first use, which
takes about 25 minutes on one core.  Run with ``-s`` or read the terminal
summary for the one-line outcome of each criterion.
"""
from __future__ import annotations

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import pearsonr

from archsim import rng as rngmod
from archsim.attacks import AttackConfig
from archsim.boundary import boundary_disagreement_oracle, linear_planar, triplet_plane_similarity
from archsim.ensemble import diversity_protocol, ensemble_from_logits, model_logits
from archsim.features import COMPONENTS, ArchFeatureRecord
from archsim.importance import GbmConfig, PairFeatureRow, fit_gbm, permutation_importance
from archsim.keywords import keyword_table, tfidf_keywords
from archsim.sat import SatConfig, SimilarityMatrix, probe_zoo, sat_matrix, sat_score
from archsim.spectral import ClusterAssignment, adjacency_from_sat, cluster_purity, spectral_cluster
from archsim.zoo import build_zoo, default_manifest, pair_kind, subset_manifest

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ARCHSIM_ZOO_CACHE", ROOT / ".cache" / "zoo"))
STAGES = [
    ["train-zoo", "--cache-dir", str(CACHE)],
    ["sat-matrix", "--one-sided"],
    ["cluster"],
    ["importance"],
    ["keywords"],
    ["ensemble"],
    ["report"],
]


def _cli(*argv, check=True):
    r = subprocess.run([sys.executable, "-m", "archsim", *map(str, argv)], capture_output=True, text=True)
    if check and r.returncode != 0:
        raise AssertionError(f"archsim {' '.join(map(str, argv))} exited {r.returncode}: {r.stderr[-2000:]}")
    return r


@pytest.fixture(scope="session")
def manifest():
    return default_manifest()


@pytest.fixture(scope="session")
def desk(manifest):
    return build_zoo(manifest, CACHE, data=manifest.load_dataset())


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory, desk):
    """The default pipeline run twice into separate output directories."""
    runs, seconds = [], []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"pipeline{k}")
        t = time.time()
        for stage in STAGES:
            _cli(*stage, "--out-dir", out)
        seconds.append(time.time() - t)
        runs.append(out)
    return runs, seconds


@pytest.fixture(scope="session")
def sat_pgd(pipeline):
    return SimilarityMatrix.load(pipeline[0][0] / "sat-matrix" / "sat.csv")


def _primary_files(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "run.json"}


# ------------------------------------------------------------------ 1


def test_c01_gradient_oracle(criterion):
    criterion(1)
    t = time.time()
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                        str(ROOT / "tests" / "test_nn_gradients.py")], capture_output=True, text=True)
    secs = time.time() - t
    tail = r.stdout.strip().splitlines()[-1] if r.stdout.strip() else r.stderr[-200:]
    criterion(1, f"gradient suite: {tail}; {secs:.0f}s (limit 120s)")
    assert r.returncode == 0, r.stdout[-3000:]
    assert secs < 120
    criterion.ok()


# ------------------------------------------------------------------ 2


def test_c02_sat_algebra_and_symmetry(criterion, sat_pgd):
    criterion(2)
    ones, zeros = np.ones(10, int), np.zeros(10, int)
    assert sat_score(ones, ones) == np.log(100.0)
    assert sat_score(zeros, zeros) == np.log(0.01)
    mixed = np.array([1] * 4 + [0] * 6)
    assert sat_score(mixed, mixed) == np.log(40.0)
    v = sat_pgd.values
    symmetric = bool(np.array_equal(v, v.T, equal_nan=True))
    criterion(2, f"ln100/ln0.01/ln40 exact; desk matrix {v.shape[0]}x{v.shape[0]} bit-symmetric={symmetric}")
    assert symmetric
    assert np.array_equal(sat_pgd.raw_transfer, sat_pgd.raw_transfer.T, equal_nan=True)
    criterion.ok()


# ------------------------------------------------------------------ 3


def test_c03_self_maximality(criterion, sat_pgd):
    criterion(3)
    names, v = sat_pgd.model_names, sat_pgd.values
    strong = [n for n in names if sat_pgd.self_success[n] >= 0.99]
    violations_all = []
    for i, n in enumerate(names):
        off = np.delete(v[i], i)
        if not np.all(v[i, i] > off + 0.05):
            violations_all.append(n)
    violations = [n for n in violations_all if n in strong]
    lo, hi = min(sat_pgd.self_success.values()), max(sat_pgd.self_success.values())
    criterion(3, f"{len(strong)}/{len(names)} models with self-success >= 0.99 (range {lo:.2f}-{hi:.2f}); "
                 f"diagonal > row max + 0.05 for {len(names) - len(violations_all)}/{len(names)} models")
    assert violations == []
    criterion.ok()


# ------------------------------------------------------------------ 4


def test_c04_pair_type_ordering(criterion, manifest, sat_pgd, pipeline):
    criterion(4)
    groups: dict[str, list[float]] = {}
    for i, j, s in sat_pgd.pairs():
        groups.setdefault(pair_kind(manifest, sat_pgd.model_names[i], sat_pgd.model_names[j]), []).append(s)
    seed, hp, cross = (float(np.mean(groups[k])) for k in ("seed", "hparam", "cross"))
    regime = float(np.mean(groups["regime"])) if "regime" in groups else float("nan")
    secs = json.loads((pipeline[0][0] / "sat-matrix" / "run.json").read_text())["elapsed-seconds"]
    criterion(4, f"seed {seed:.2f} > hparam {hp:.2f} > cross {cross:.2f} (regime {regime:.2f}); "
                 f"SAT stage {secs / 60:.1f} min for {len(sat_pgd.model_names)} models")
    assert seed - hp > 0.2 and hp - cross > 0.2
    assert secs < 20 * 60
    criterion.ok()


# ------------------------------------------------------------------ 5


def test_c05_mifgsm_agrees_with_pgd(criterion, desk, manifest, sat_pgd):
    criterion(5)
    cfg = SatConfig(attack=AttackConfig(method="mifgsm"))
    mi = sat_matrix(desk.models, manifest.load_dataset(), cfg)
    assert mi.model_names == sat_pgd.model_names
    iu = np.triu_indices(len(mi.model_names), 1)
    r = float(pearsonr(sat_pgd.values[iu], mi.values[iu])[0])
    criterion(5, f"Pearson(PGD-SAT, MI-FGSM-SAT) = {r:.3f} over {len(iu[0])} pairs (need > 0.8)")
    assert r > 0.8
    criterion.ok()


# ------------------------------------------------------------------ 6


def test_c06_one_sided_tracks_two_sided(criterion, pipeline, sat_pgd):
    criterion(6)
    rows = (pipeline[0][0] / "sat-matrix" / "one-sided.csv").read_text().splitlines()[1:]
    one = np.array([[float(x) for x in r.split(",")[1:]] for r in rows])
    n = len(one)
    # every ordered off-diagonal pair: model i as the new model against member j
    mask = ~np.eye(n, dtype=bool)
    r = float(pearsonr(one[mask], sat_pgd.values[mask])[0])
    criterion(6, f"Pearson(one-sided, two-sided) = {r:.3f} over {mask.sum()} ordered pairs (need > 0.6)")
    assert r > 0.6
    criterion.ok()


# ------------------------------------------------------------------ 7

# matched compute in forward-pass units: one SAT estimate on n images costs
# 2 models x n x (3 x 50 attack passes + 2 predictions); one triplet-plane
# estimate costs 2 models x T triangles x G(G+1)/2 grid points
BUDGETS = ((500, 10), (1000, 20), (2500, 50))
STABILITY_PAIR = ("mlp-s0", "mlp-s1")


def _matched_grid(n_images, triplets, iterations=50):
    target = 2 * n_images * (3 * iterations + 2) / (2 * triplets)
    g = 2
    while g * (g + 1) / 2 < target:
        g += 1
    return g


def test_c07_stability_trend(criterion, desk):
    criterion(7)
    by_name = {m.name: m for m in desk.models}
    pair = [by_name[n] for n in STABILITY_PAIR]
    ev = default_manifest().load_dataset().subset("eval")
    cfg = SatConfig()
    correct, probes, preds = probe_zoo(pair, ev, cfg.attack)
    both = correct[0] & correct[1]

    def sat_pct(idx):
        x = idx[both[idx]]
        r0 = np.array([probes[0].positions[int(i)] for i in x])
        r1 = np.array([probes[1].positions[int(i)] for i in x])
        return np.exp(sat_score(preds[0][1][r0] != ev.labels[x], preds[1][0][r1] != ev.labels[x]))

    flat = ev.images.reshape(len(ev), -1)
    sat_std, tri_std = [], []
    for n, triplets in BUDGETS:
        subs = [np.sort(rngmod.stream(0, "stability", n, k).permutation(len(ev))[:n]) for k in range(10)]
        sat_std.append(float(np.std([sat_pct(s) for s in subs])))
        g = _matched_grid(n, triplets)
        tri = [100 * triplet_plane_similarity(*pair, flat, triplets, g, seed=k, sample_shape=ev.resolution)
               for k in range(10)]
        tri_std.append(float(np.std(tri)))
    text = ", ".join(f"{n}: SAT {s:.2f} vs triplet {t:.2f}" for (n, _), s, t in zip(BUDGETS, sat_std, tri_std))
    criterion(7, f"std in percentage points on {'/'.join(STABILITY_PAIR)}; {text}")
    assert sat_std[0] > sat_std[1] > sat_std[2]
    assert all(s < t for s, t in zip(sat_std, tri_std))
    criterion.ok()


# ------------------------------------------------------------------ 8


def test_c08_boundary_oracle(criterion, tmp_path):
    criterion(8)
    box = ((-1.0, 1.0), (-1.0, 1.0))
    f = linear_planar("f", [1.0, 0.0], 0.0)
    worst = max(abs(boundary_disagreement_oracle(f, linear_planar("g", [1.0, 0.0], -t), box, grid_n=2000) - t / 2)
                for t in (0.1, 0.37, 0.8))
    _cli("boundary-lab", "--out-dir", tmp_path)
    rep = json.loads((tmp_path / "boundary-lab" / "boundary-lab.json").read_text())
    rho = rep["spearman-vs-oracle"]
    criterion(8, f"{len(rep['pairs'])} pairs; rho SAT {rho['sat']:.3f} (need <= -0.5), triplet-plane {rho['triplet-plane']:.3f},"
                 f" min-flip {rho['min-flip']:.3f}; linear t/2 error {worst:.1e}")
    assert len(rep["pairs"]) >= 28
    assert rho["sat"] <= -0.5
    assert worst < 1e-3
    criterion.ok()


# ------------------------------------------------------------------ 9

PURITY_MODELS = ("cnn-s0", "cnn-s1", "patch-s0", "patch-s1", "attn-s0", "attn-s1", "mlp-s0", "mlp-s1")


def test_c09_clustering(criterion, manifest, sat_pgd):
    criterion(9)
    A = np.full((6, 6), 5.0)
    A[:3, :3] = A[3:, 3:] = 90.0
    np.fill_diagonal(A, 0.0)
    planted = spectral_cluster(A, k=2, restarts=10, seed=0).labels
    exact = len(set(planted[:3])) == 1 and len(set(planted[3:])) == 1 and planted[0] != planted[3]
    scaled = spectral_cluster(7.5 * A, k=2, restarts=10, seed=0).labels
    perm = np.array([4, 0, 5, 2, 1, 3])
    permuted = spectral_cluster(A[np.ix_(perm, perm)], k=2, restarts=10, seed=0).labels
    equivariant = np.array_equal(permuted[:, None] == permuted[None, :],
                                 (planted[perm][:, None] == planted[perm][None, :]))
    sub = sat_pgd.subset(list(PURITY_MODELS))
    adj, names, _ = adjacency_from_sat(sub)
    ca = spectral_cluster(adj, k=4, restarts=100, seed=0, names=names)
    fam = manifest.families()
    purity = cluster_purity(ca.labels, [fam[n] for n in ca.model_names])
    criterion(9, f"planted exact={exact}, scale-invariant={np.array_equal(scaled, planted)}, "
                 f"permutation-equivariant={equivariant}; desk purity {purity:.2f} "
                 f"(4 families x 2 seeds, K=4; need >= 0.8)")
    assert exact and np.array_equal(scaled, planted) and equivariant
    assert purity >= 0.8
    criterion.ok()


# ------------------------------------------------------------------ 10


def _synthetic_rows(seed, n=200, noise=0.01):
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n):
        diff = tuple(int(v) for v in rng.integers(0, 2, 13))
        rows.append(PairFeatureRow((f"a{k}", f"b{k}"), diff, 3.0 * diff[0] + float(rng.normal(0, noise))))
    return rows


def test_c10_importance(criterion):
    criterion(10)
    assert COMPONENTS[0] == "base-architecture"
    firsts, worst_unused = 0, 0.0
    for seed in range(10):
        rows = _synthetic_rows(seed, n=120)
        model = fit_gbm(rows, GbmConfig())
        imp = permutation_importance(model, rows, repeats=10, seed=seed)
        firsts += int(np.argmax(imp)) == 0
        unused = sorted(set(range(13)) - model.used_features())
        if unused:
            worst_unused = max(worst_unused, float(np.abs(imp[unused]).max()))
    rows = _synthetic_rows(100, n=300)
    held = fit_gbm(rows[:200], GbmConfig())
    X = np.array([r.diff for r in rows[200:]], float)
    r2 = held.score(X, np.array([r.target for r in rows[200:]]))
    criterion(10, f"signal ranked first {firsts}/10; max |unused| {worst_unused:.1e}; "
                  f"held-out R2 {r2:.3f} at 500/12/4/0.02")
    assert firsts == 10 and worst_unused < 1e-6 and r2 > 0.95
    criterion.ok()


# ------------------------------------------------------------------ 11


def test_c11_ensembles(criterion, desk, manifest, sat_pgd, pipeline):
    criterion(11)
    ev = manifest.load_dataset().subset("eval")
    logits = model_logits(desk.models, ev)
    first = desk.models[0].name
    dup = ensemble_from_logits([first, first], logits, ev.labels).err_reduction_rate
    report = json.loads((pipeline[0][0] / "ensemble" / "ensemble.json").read_text())["sat-vs-err"]
    r = report["pearson"]
    # clusters at the family count so k = 1 stays feasible for N = 3
    adj, names, _ = adjacency_from_sat(sat_pgd)
    ca = spectral_cluster(adj, k=len(set(manifest.families().values())), restarts=100, seed=0, names=names)
    cluster_of = dict(zip(ca.model_names, map(int, ca.labels)))
    diversity = {}
    for n in (2, 3):
        lo = diversity_protocol(cluster_of, logits, ev.labels, n, 1, trials=100, seed=0)
        hi = diversity_protocol(cluster_of, logits, ev.labels, n, n, trials=100, seed=0)
        diversity[n] = (lo.mean_err, hi.mean_err, lo.feasible and hi.feasible)
    order = [m.name for m in desk.models]
    wrong = [ensemble_from_logits(order[:k], logits, ev.labels).all_wrong_ratio for k in range(1, len(order) + 1)]
    monotone = all(b <= a for a, b in zip(wrong, wrong[1:]))
    text = "; ".join(f"N={n}: k=1 {lo:.3f} < k=N {hi:.3f}" for n, (lo, hi, _) in diversity.items())
    criterion(11, f"duplicate ERR {dup}; Pearson(SAT, ERR) {r:.3f} over {report['n']} pairs; {text}; "
                  f"all-wrong nonincreasing={monotone}")
    assert dup == 0.0
    assert r < 0
    assert all(ok and hi > lo for lo, hi, ok in diversity.values())
    assert monotone
    criterion.ok()


# ------------------------------------------------------------------ 12


def _record(**over):
    base = dict(zip(COMPONENTS, ("CNN", "3s2", "32", "BN", "Yes", "ReLU", "No", "No", "No", "No", "No",
                                 "GAP", "~")))
    base.update(over)
    return ArchFeatureRecord.from_dict(base)


def test_c12_tfidf(criterion, pipeline):
    criterion(12)
    recs = {
        "a": _record(), "b": _record(),
        "c": _record(**{"base-architecture": "Transformer", "stem-layer": "4s4", "normalization": "LN",
                        "activation": "GeLU", "2d-self-attention": "Yes"}),
        "d": _record(**{"stem-layer": "3s1", "activation": "SiLU", "channel-wise-attention": "Yes (SE)"}),
    }
    labels = {"a": 0, "b": 0, "c": 1, "d": 2}
    kw = tfidf_keywords(labels, recs)
    everywhere = {"input-resolution=32", "final-pooling=GAP"}
    leaked = [t for items in kw.values() for t, _ in items if t in everywhere]
    rare = [t for t, _ in kw[1]] == ["2d-self-attention=Yes", "activation=GeLU", "base-architecture=Transformer",
                                     "normalization=LN", "stem-layer=4s4"]
    ca = ClusterAssignment(list(recs), np.array([0, 0, 1, 2]), np.eye(4)[:, :3], 0.0, {"k": 3})
    table = keyword_table(ca, recs)
    desk = json.loads((pipeline[0][0] / "keywords" / "keywords.json").read_text())
    header = (pipeline[0][0] / "keywords" / "keywords.csv").read_text().splitlines()[0]
    shape = (all(set(r) >= {"cluster", "members", "keywords"} and len(r["keywords"]) <= 5 for r in table + desk)
             and header == "cluster,members,keyword-1,keyword-2,keyword-3,keyword-4,keyword-5")
    criterion(12, f"ubiquitous tokens leaked: {len(leaked)}; identical cluster gets rarest tokens={rare}; "
                  f"top-5 table shape={shape} ({len(desk)} desk clusters)")
    assert not leaked and rare and shape
    criterion.ok()


# ------------------------------------------------------------------ 13


def test_c13_end_to_end_determinism(criterion, pipeline, manifest, desk, tmp_path):
    criterion(13)
    (first, second), seconds = pipeline
    a, b = _primary_files(first), _primary_files(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    # the shared cache hides training nondeterminism, so retrain two members from scratch
    names = ["mlp-s0", "cnn-s0"]
    fresh = build_zoo(subset_manifest(manifest, names), tmp_path / "cache", data=manifest.load_dataset())
    cached = {m.name: m for m in desk.models}
    same_weights = all(
        set(m.weights) == set(cached[m.name].weights)
        and all(np.array_equal(w, cached[m.name].weights[k]) for k, w in m.weights.items())
        for m in fresh.models)
    total = sum(seconds)
    criterion(13, f"{len(a)} artifacts, {len(differing)} differ; retrained {'/'.join(names)} bit-identical="
                  f"{same_weights}; two runs {total / 60:.1f} min on {os.cpu_count()} core(s) (limit 45)")
    assert differing == []
    assert same_weights
    assert total < 45 * 60
    criterion.ok()
