"""A 2-D testbed where decision-boundary difference is exactly computable.

Planar models are ordinary engine models with a (1, 2, 1) input and two
classes, so forward passes and attacks reuse the same code as image models.
The grid oracle measures the fraction of the domain where two models
disagree; SAT and two baselines are scored by rank correlation against it.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from archsim import rng as rngmod
from archsim.attacks import AttackConfig, attack
from archsim.data import Dataset
from archsim.nn.model import Model, ModelSpec, predict
from archsim.nn.train import TrainConfig, train
from archsim.sat import sat_score

log = logging.getLogger(__name__)

PLANAR_SHAPE = (1, 2, 1)
PLANAR_FAMILIES = ("mlp-relu", "mlp-gelu", "rbf-ish", "piecewise-linear")
UNIT_BOX = ((0.0, 1.0), (0.0, 1.0))


def _L(kind, **params):
    return {"kind": kind, "params": params}


def planar_layers(family: str) -> list[dict]:
    if family == "mlp-relu":
        return [_L("flatten"), _L("dense", units=32), _L("relu"), _L("dense", units=32), _L("relu"),
                _L("dense", units=2)]
    if family == "mlp-gelu":
        return [_L("flatten"), _L("dense", units=32), _L("gelu"), _L("dense", units=32), _L("gelu"),
                _L("dense", units=2)]
    if family == "rbf-ish":
        # one wide smooth hidden layer: a sum of soft bumps
        return [_L("flatten"), _L("dense", units=64), _L("silu"), _L("dense", units=2)]
    if family == "piecewise-linear":
        return [_L("flatten"), _L("dense", units=8), _L("leaky-relu"), _L("dense", units=2)]
    if family == "linear":
        return [_L("flatten"), _L("dense", units=2)]
    raise KeyError(f"unknown planar family {family!r}")


@dataclass(frozen=True)
class PlanarModel:
    model: Model
    family: str

    @property
    def name(self) -> str:
        return self.model.name

    def predict_points(self, pts: np.ndarray, chunk: int = 65536) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float32).reshape(-1, *PLANAR_SHAPE)
        return predict(self.model, pts, chunk=chunk)


def planar_spec(family: str, name: str) -> ModelSpec:
    return ModelSpec(name, planar_layers(family), PLANAR_SHAPE, 2, None, family)


def linear_planar(name: str, w, b: float) -> PlanarModel:
    """Model whose class-1 logit minus class-0 logit is ``w . x + b``."""
    spec = planar_spec("linear", name)
    w = np.asarray(w, dtype=np.float32)
    W = np.stack([np.zeros(2, np.float32), w], axis=1)
    weights = {"01.dense.W": W, "01.dense.b": np.array([0.0, b], np.float32)}
    return PlanarModel(Model(spec, weights, {}), "linear")


def constant_planar(name: str, cls: int) -> PlanarModel:
    spec = planar_spec("linear", name)
    b = np.array([1.0, 0.0] if cls == 0 else [0.0, 1.0], np.float32)
    return PlanarModel(Model(spec, {"01.dense.W": np.zeros((2, 2), np.float32), "01.dense.b": b}, {}), "linear")


def planar_truth(pts: np.ndarray) -> np.ndarray:
    """Ground-truth label: above a sinusoidal curve through the unit square."""
    x, y = pts[:, 0], pts[:, 1]
    return (y > 0.5 + 0.18 * np.sin(2 * math.pi * 1.25 * x + 0.4)).astype(np.int64)


def planar_dataset(seed: int, n: int = 3000, label_noise: float = 0.03) -> Dataset:
    rng = rngmod.stream(seed, "planar-data")
    pts = rng.uniform(0, 1, size=(n, 2))
    y = planar_truth(pts)
    flip = rng.uniform(size=n) < label_noise
    y = np.where(flip, 1 - y, y)
    split = np.where(np.arange(n) < n // 2, "train", "eval")
    return Dataset("planar", pts.astype(np.float32).reshape(n, *PLANAR_SHAPE), y, split, 2,
                   {"synthetic": {"seed": seed, "generator": "planar-sine/1"}})


def default_planar_zoo(seed: int = 0, count: int = 10) -> list[tuple[str, str, dict]]:
    """(name, family, train overrides); epochs vary so boundaries differ by degree."""
    plan = []
    epochs = (60, 25, 10, 40)
    for i in range(count):
        fam = PLANAR_FAMILIES[i % len(PLANAR_FAMILIES)]
        plan.append((f"{fam}-{i}", fam, {"seed": seed * 1000 + i, "epochs": epochs[(i // 4 + i) % 4]}))
    return plan


def train_planar_zoo(data: Dataset, plan=None, seed: int = 0) -> list[PlanarModel]:
    plan = plan or default_planar_zoo(seed)
    out = []
    for name, fam, kw in plan:
        cfg = TrainConfig(**{"learning_rate": 0.1, "batch_size": 32, "weight_decay": 0.0, **kw})
        out.append(PlanarModel(train(planar_spec(fam, name), data, cfg), fam))
    return out


# ---------------------------------------------------------------- oracle


def grid_points(domain, grid_n: int) -> np.ndarray:
    (x0, x1), (y0, y1) = domain
    xs = x0 + (np.arange(grid_n) + 0.5) * (x1 - x0) / grid_n
    ys = y0 + (np.arange(grid_n) + 0.5) * (y1 - y0) / grid_n
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _check_domain(domain):
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate domain: zero area")


def label_map(model: PlanarModel, domain=UNIT_BOX, grid_n: int = 200) -> np.ndarray:
    _check_domain(domain)
    return model.predict_points(grid_points(domain, grid_n)).reshape(grid_n, grid_n)


def boundary_disagreement_oracle(f: PlanarModel, g: PlanarModel, domain=UNIT_BOX, grid_n: int = 200) -> float:
    """Fraction of cell-centre grid points where the two models' predictions differ."""
    if grid_n < 100:
        raise ValueError("grid_n must be at least 100")
    _check_domain(domain)
    return float((label_map(f, domain, grid_n) != label_map(g, domain, grid_n)).mean())


def boundary_length(model: PlanarModel, domain=UNIT_BOX, grid_n: int = 200) -> float:
    """Approximate boundary length from label changes between adjacent cells."""
    m = label_map(model, domain, grid_n)
    (x0, x1), (y0, y1) = domain
    dx, dy = (x1 - x0) / grid_n, (y1 - y0) / grid_n
    # horizontal changes cross vertical edges of length dy, and vice versa
    return float((m[:, 1:] != m[:, :-1]).sum() * dy + (m[1:, :] != m[:-1, :]).sum() * dx) * (math.pi / 4)


# ---------------------------------------------------------------- baselines


def _as_points(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    return s.reshape(len(s), -1)


def _predictor(model, sample_shape=None):
    """Callable mapping flat points to labels for a planar or image model."""
    if isinstance(model, PlanarModel):
        return model.predict_points
    from archsim.sat import _predict_at
    shape = tuple(sample_shape or model.spec.input_resolution)
    return lambda pts: _predict_at(model, pts.reshape(-1, *shape).astype(np.float32))


def barycentric_grid(grid_n: int) -> np.ndarray:
    """Weights (a, b, c) for points i/(n-1), j/(n-1) with i + j <= n - 1."""
    pts = [(i, j) for i in range(grid_n) for j in range(grid_n - i)]
    ij = np.array(pts, dtype=np.float64) / (grid_n - 1)
    return np.column_stack([ij, 1.0 - ij.sum(1)])


def _triangle_area(p):
    a, b = p[1] - p[0], p[2] - p[0]
    return math.sqrt(max(float(a @ a) * float(b @ b) - float(a @ b) ** 2, 0.0)) / 2


def triplet_plane_similarity(f, g, samples, num_triplets: int = 10, grid_n: int = 20, seed: int = 0,
                             max_retries: int = 100, sample_shape=None) -> float:
    """Mean label agreement of two models over triangles spanned by random sample triplets.

    Works for planar models and, with ``sample_shape``, for image models
    (samples are then flattened images and the triangle lies in pixel space).
    """
    pts = _as_points(samples)
    if len(pts) < 3:
        raise ValueError("need at least 3 samples")
    pf, pg = _predictor(f, sample_shape), _predictor(g, sample_shape)
    if len(np.unique(np.r_[pf(pts), pg(pts)])) < 2:
        raise ValueError("samples must cover at least two predicted classes")
    bary = barycentric_grid(grid_n)
    scale = float(np.abs(pts).max()) or 1.0
    agree = []
    for t in range(num_triplets):
        for attempt in range(max_retries):
            idx = rngmod.stream(seed, "triplet", t, attempt).choice(len(pts), size=3, replace=False)
            tri = pts[idx]
            if _triangle_area(tri) > 1e-9 * scale * scale:
                break
        else:
            raise RuntimeError(f"no non-collinear triplet after {max_retries} retries")
        plane = bary @ tri
        agree.append(float((pf(plane) == pg(plane)).mean()))
    return float(np.mean(agree))


@dataclass(frozen=True)
class MinFlipResult:
    dissimilarity: float
    similarity: float
    evaluated: int
    skipped: int

    @property
    def skip_rate(self) -> float:
        total = self.evaluated + self.skipped
        return self.skipped / total if total else 0.0


def flip_radius(model: Model, x: np.ndarray, y: np.ndarray, max_radius: float, halvings: int = 30,
                attack_cfg: AttackConfig | None = None):
    """Minimal L-infinity radius along the model's own PGD direction that flips each point.

    Returns radii with NaN where even ``max_radius`` does not flip the prediction.
    """
    cfg = attack_cfg or AttackConfig(epsilon=max_radius, step_size=max_radius / 4, iterations=50)
    adv = attack(model, x, y, cfg).adversarial
    d = (adv - x).reshape(len(x), -1).astype(np.float64)
    norm = np.abs(d).max(1, keepdims=True)
    d = np.where(norm > 0, d / np.maximum(norm, 1e-30), 0.0).reshape(x.shape)

    def flipped(r):
        pts = np.clip(x + r.reshape((-1,) + (1,) * (x.ndim - 1)) * d, 0, 1).astype(np.float32)
        return predict(model, pts) != y

    lo = np.zeros(len(x))
    hi = np.full(len(x), float(max_radius))
    ok = flipped(hi)
    for _ in range(halvings):
        mid = 0.5 * (lo + hi)
        f = flipped(mid)
        hi = np.where(f, mid, hi)
        lo = np.where(f, lo, mid)
    return np.where(ok, hi, np.nan)


def min_flip_distance_similarity(f, g, samples, labels, max_radius: float = 0.5, halvings: int = 30) -> MinFlipResult:
    """Mean |delta_f - delta_g| of minimal flip radii; similarity is its negation."""
    mf, mg = (m.model if isinstance(m, PlanarModel) else m for m in (f, g))
    x = np.asarray(samples, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    both = (predict(mf, x) == y) & (predict(mg, x) == y)
    x, y = x[both], y[both]
    if len(x) == 0:
        return MinFlipResult(math.nan, math.nan, 0, 0)
    df = flip_radius(mf, x, y, max_radius, halvings)
    dg = df if mg is mf else flip_radius(mg, x, y, max_radius, halvings)
    valid = np.isfinite(df) & np.isfinite(dg)
    diss = float(np.mean(np.abs(df[valid] - dg[valid]))) if valid.any() else math.nan
    return MinFlipResult(diss, -diss, int(valid.sum()), int((~valid).sum()))


# ---------------------------------------------------------------- planar SAT


def planar_sat(f: PlanarModel, g: PlanarModel, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               epsilon_floor: float = 0.01) -> float:
    """SAT on planar points (attacks clip to the unit square)."""
    both = (f.predict_points(x) == y) & (g.predict_points(x) == y)
    idx = np.flatnonzero(both)
    xs = np.asarray(x, np.float32).reshape(-1, *PLANAR_SHAPE)[idx]
    ys = y[idx]
    adv_f = attack(f.model, xs, ys, cfg, example_ids=idx).adversarial
    adv_g = attack(g.model, xs, ys, cfg, example_ids=idx).adversarial
    return sat_score(g.predict_points(adv_f) != ys, f.predict_points(adv_g) != ys, epsilon_floor)


def median_gap(models: Sequence[PlanarModel], domain=UNIT_BOX, grid_n: int = 200) -> float:
    """Median over pairs of disagreement area divided by mean boundary length."""
    (x0, x1), (y0, y1) = domain
    area = (x1 - x0) * (y1 - y0)
    maps = {m.name: label_map(m, domain, grid_n) for m in models}
    lengths = {m.name: boundary_length(m, domain, grid_n) for m in models}
    gaps = []
    for a, b in combinations(models, 2):
        dis = float((maps[a.name] != maps[b.name]).mean()) * area
        length = 0.5 * (lengths[a.name] + lengths[b.name])
        if length > 0:
            gaps.append(dis / length)
    return float(np.median(gaps)) if gaps else 0.0


# ---------------------------------------------------------------- benchmark


def spearman(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan
    return float(stats.spearmanr(x, y)[0])


@dataclass
class RankReport:
    pairs: list[tuple[str, str]]
    oracle: list[float]
    methods: dict[str, list[float]]
    rho: dict[str, float]
    rho_std: dict[str, float]
    epsilon: float
    degenerate: bool
    skip_rate: float

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "oracle": self.oracle, "methods": self.methods,
                "spearman-vs-oracle": self.rho, "spearman-std": self.rho_std, "epsilon": self.epsilon,
                "degenerate": self.degenerate, "min-flip-skip-rate": self.skip_rate}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = sorted(self.methods)
        w.writerow(["a", "b", "oracle", *names])
        for k, (a, b) in enumerate(self.pairs):
            w.writerow([a, b, f"{self.oracle[k]:.6f}", *(f"{self.methods[n][k]:.6f}" for n in names)])
        return buf.getvalue()

    def to_svg(self, method: str = "sat", size: int = 320) -> str:
        xs, ys = np.asarray(self.oracle), np.asarray(self.methods[method])
        return scatter_svg(xs, ys, "oracle disagreement", method, size)

    def save(self, directory, svg: bool = False) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "boundary-lab.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (d / "boundary-lab.csv").write_text(self.to_csv())
        if svg:
            (d / "boundary-lab.svg").write_text(self.to_svg())
        return d


def scatter_svg(xs, ys, xlabel: str, ylabel: str, size: int = 320) -> str:
    pad = 40
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[ok], ys[ok]

    def scale(v):
        lo, hi = (float(v.min()), float(v.max())) if len(v) else (0.0, 1.0)
        span = hi - lo or 1.0
        return lambda t: pad + (t - lo) / span * (size - 2 * pad)

    sx, sy = scale(xs), scale(ys)
    dots = "".join(f'<circle cx="{sx(a):.2f}" cy="{size - sy(b):.2f}" r="3"/>' for a, b in zip(xs, ys))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<rect width="100%" height="100%" fill="white"/><g fill="steelblue">{dots}</g>'
            f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">{xlabel}</text>'
            f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})" '
            f'text-anchor="middle">{ylabel}</text></svg>')


def rank_benchmark(models: Sequence[PlanarModel], data: Dataset, seeds: Sequence[int] = (0, 1, 2),
                   grid_n: int = 200, num_triplets: int = 20, triplet_grid: int = 20,
                   epsilon: float | None = None, min_flip_radius: float = 0.5) -> RankReport:
    """Spearman correlation of SAT, triplet-plane and min-flip similarities with the oracle.

    SAT and min-flip are similarities where the oracle is a disagreement, so a
    faithful method correlates negatively; triplet agreement likewise.
    """
    if len(models) < 8:
        raise ValueError("rank benchmark needs at least 8 planar models")
    ev = data.subset("eval")
    x, y = ev.images, ev.labels
    pairs = list(combinations(models, 2))
    maps = {m.name: label_map(m, UNIT_BOX, grid_n) for m in models}
    oracle = [float((maps[a.name] != maps[b.name]).mean()) for a, b in pairs]
    if epsilon is None:
        epsilon = 0.5 * median_gap(models, UNIT_BOX, grid_n)
        log.info("planar SAT epsilon = %.5f (half the median inter-boundary gap)", epsilon)
    per_seed: dict[str, list[list[float]]] = {"sat": [], "triplet-plane": []}
    for s in seeds:
        acfg = AttackConfig(epsilon=epsilon, step_size=epsilon / 4, iterations=50, seed=s)
        per_seed["sat"].append([planar_sat(a, b, x, y, acfg) for a, b in pairs])
        per_seed["triplet-plane"].append([triplet_plane_similarity(a, b, x.reshape(len(x), 2), num_triplets,
                                                                   triplet_grid, seed=s) for a, b in pairs])
    flips = [min_flip_distance_similarity(a, b, x, y, min_flip_radius) for a, b in pairs]
    methods = {"oracle": oracle, "sat": per_seed["sat"][0], "triplet-plane": per_seed["triplet-plane"][0],
               "min-flip": [r.similarity for r in flips]}
    rho = {k: spearman(v, oracle) for k, v in methods.items()}
    rho_std = {k: float(np.std([spearman(v, oracle) for v in runs])) for k, runs in per_seed.items()}
    rho_std["min-flip"] = 0.0
    rho_std["oracle"] = 0.0
    degenerate = np.ptp(oracle) == 0 or any(np.ptp(v) == 0 for k, v in methods.items() if k != "oracle")
    skipped = sum(r.skipped for r in flips)
    total = skipped + sum(r.evaluated for r in flips)
    return RankReport([(a.name, b.name) for a, b in pairs], oracle, methods, rho, rho_std, float(epsilon),
                      bool(degenerate), skipped / total if total else 0.0)
