"""Logit-averaging ensembles, error reduction rate, cluster-diversity sampling,
and similarity/performance correlation studies."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from archsim import rng as rngmod
from archsim.data import Dataset
from archsim.nn.model import Model, ModelSpec, forward
from archsim.nn.train import TrainConfig, accuracy, train
from archsim.resize import to_resolution

log = logging.getLogger(__name__)

MIN_CORRELATION_PAIRS = 8


def model_logits(models: Sequence[Model], data: Dataset) -> dict[str, np.ndarray]:
    """Logits of every model on ``data``, each at its own input resolution."""
    out = {}
    for m in models:
        z = forward(m, to_resolution(data.images, m.spec.input_resolution)).astype(np.float64)
        z.setflags(write=False)
        out[m.name] = z
    return out


@dataclass(frozen=True)
class EnsembleResult:
    member_names: tuple[str, ...]
    top1_error: float
    member_errors: tuple[float, ...]
    err_reduction_rate: float
    all_wrong_ratio: float

    def to_dict(self) -> dict:
        return {"members": list(self.member_names), "top1-error": self.top1_error,
                "member-errors": list(self.member_errors), "err": self.err_reduction_rate,
                "all-wrong-ratio": self.all_wrong_ratio}


def error_reduction_rate(ensemble_error: float, member_errors: Sequence[float]) -> float:
    mean = float(np.mean(member_errors))
    if mean == 0:
        return 0.0 if ensemble_error == 0 else -math.inf
    return 1.0 - ensemble_error / mean


def ensemble_from_logits(names: Sequence[str], logits: Mapping[str, np.ndarray], labels) -> EnsembleResult:
    if len(names) < 1:
        raise ValueError("need at least one member")
    y = np.asarray(labels)
    if len(y) == 0:
        raise ValueError("empty eval set")
    preds = [logits[n].argmax(1) for n in names]
    member_err = tuple(float((p != y).mean()) for p in preds)
    mean_logits = np.mean([logits[n] for n in names], axis=0)
    ens_err = float((mean_logits.argmax(1) != y).mean())
    all_wrong = float(np.logical_and.reduce([p != y for p in preds]).mean())
    return EnsembleResult(tuple(names), ens_err, member_err, error_reduction_rate(ens_err, member_err),
                          all_wrong)


def ensemble_error(members: Sequence[Model], eval_set: Dataset) -> EnsembleResult:
    """Unweighted logit-average ensemble of at least two members."""
    if len(members) < 2:
        raise ValueError("an ensemble needs at least two members")
    if len(eval_set) == 0:
        raise ValueError("empty eval set")
    names = [f"{i}:{m.name}" for i, m in enumerate(members)]
    logits = {n: model_logits([m], eval_set)[m.name] for n, m in zip(names, members)}
    res = ensemble_from_logits(names, logits, eval_set.labels)
    return EnsembleResult(tuple(m.name for m in members), res.top1_error, res.member_errors,
                          res.err_reduction_rate, res.all_wrong_ratio)


# ---------------------------------------------------------------- diversity protocol

_ENUM_CAP = 200_000


@dataclass
class DiversityResult:
    n: int
    k: int
    mean_err: float
    random_mean_err: float
    trials: int
    feasible: bool = True
    exhaustive: bool = False
    subsets: list[tuple[str, ...]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"N": self.n, "k": self.k, "mean-err": self.mean_err, "random-mean-err": self.random_mean_err,
                "trials": self.trials, "feasible": self.feasible, "exhaustive": self.exhaustive}


def _spans(subset, cluster_of):
    return len({cluster_of[n] for n in subset})


def diversity_protocol(cluster_of: Mapping[str, int], logits: Mapping[str, np.ndarray], labels,
                       n: int, k: int, trials: int = 100, seed: int = 0) -> DiversityResult:
    """Mean ERR over N-model ensembles drawn from exactly k distinct clusters.

    When the number of qualifying subsets is at most ``trials`` every subset is
    used, so the mean is exhaustive.  The random baseline draws unconstrained
    N-subsets with the same budget.
    """
    names = sorted(cluster_of)
    if not 1 <= k <= n <= len(names):
        raise ValueError(f"need 1 <= k <= N <= zoo size (k={k}, N={n}, zoo={len(names)})")
    if k > len(set(cluster_of.values())):
        raise ValueError("k exceeds the number of clusters")
    rng = rngmod.stream(seed, "diversity", n, k)
    total = math.comb(len(names), n)
    if total <= _ENUM_CAP:
        qualifying = [s for s in combinations(names, n) if _spans(s, cluster_of) == k]
        if not qualifying:
            return DiversityResult(n, k, math.nan, math.nan, 0, feasible=False)
        if len(qualifying) <= trials:
            chosen, exhaustive = qualifying, True
        else:
            pick = rng.choice(len(qualifying), size=trials, replace=False)
            chosen, exhaustive = [qualifying[i] for i in sorted(pick)], False
    else:
        chosen, exhaustive = _constructive(cluster_of, n, k, trials, rng), False
        if not chosen:
            return DiversityResult(n, k, math.nan, math.nan, 0, feasible=False)

    def err(s):
        return 0.0 if len(s) == 1 else ensemble_from_logits(s, logits, labels).err_reduction_rate

    mean_err = float(np.mean([err(s) for s in chosen]))
    rand_rng = rngmod.stream(seed, "diversity-random", n)
    rand = [tuple(sorted(rand_rng.choice(names, size=n, replace=False))) for _ in range(len(chosen))]
    return DiversityResult(n, k, mean_err, float(np.mean([err(s) for s in rand])), len(chosen),
                           True, exhaustive, chosen)


def _constructive(cluster_of, n, k, trials, rng):
    by_cluster: dict[int, list[str]] = {}
    for name in sorted(cluster_of):
        by_cluster.setdefault(cluster_of[name], []).append(name)
    clusters = sorted(by_cluster)
    out = []
    for _ in range(trials * 20):
        if len(out) == trials:
            break
        picked = [clusters[i] for i in rng.choice(len(clusters), size=k, replace=False)]
        pool = [m for c in picked for m in by_cluster[c]]
        if len(pool) < n:
            continue
        firsts = [by_cluster[c][int(rng.integers(len(by_cluster[c])))] for c in picked]
        rest = [m for m in pool if m not in firsts]
        extra = list(rng.choice(rest, size=n - k, replace=False)) if n > k else []
        out.append(tuple(sorted(firsts + [str(e) for e in extra])))
    return out


# ---------------------------------------------------------------- correlations


def correlate(x, y) -> dict:
    """Pearson (t-approximation p-value) and Spearman (large-sample t p-value)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = {"n": int(len(x)), "degenerate": False}
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        out.update(degenerate=True, pearson=math.nan, pearson_p=math.nan, spearman=math.nan, spearman_p=math.nan)
        return out
    pr = stats.pearsonr(x, y)
    sr = stats.spearmanr(x, y)
    out.update(pearson=float(pr[0]), pearson_p=float(pr[1]), spearman=float(sr[0]), spearman_p=float(sr[1]))
    return out


def similarity_vs_ensemble(sm, logits: Mapping[str, np.ndarray], labels) -> dict:
    """Correlation between pairwise SAT and the ERR of the corresponding 2-ensembles."""
    rows = []
    for i, j, v in sm.pairs():
        a, b = sm.model_names[i], sm.model_names[j]
        rows.append((a, b, v, ensemble_from_logits((a, b), logits, labels).err_reduction_rate))
    if len(rows) < MIN_CORRELATION_PAIRS:
        raise ValueError(f"refusing to correlate {len(rows)} pairs (< {MIN_CORRELATION_PAIRS})")
    report = correlate([r[2] for r in rows], [r[3] for r in rows])
    report["pairs"] = [{"a": a, "b": b, "sat": s, "err": e} for a, b, s, e in rows]
    return report


def distill_similarity_study(student_spec: ModelSpec, teachers: Sequence[Model], data: Dataset,
                             similarity: Mapping[str, float], teacher_family: Mapping[str, str],
                             train_cfg: TrainConfig = TrainConfig(), scratch: Model | None = None) -> dict:
    """Train one student per teacher by hard distillation and correlate its accuracy
    with teacher/student similarity, overall and split by same or cross family.

    ``similarity`` maps teacher name to its SAT against the scratch-trained student.
    """
    if len(teachers) < 6:
        raise ValueError("need at least 6 teachers")
    fams = {teacher_family[t.name] for t in teachers}
    if len(fams) < 2:
        raise ValueError("teachers must span at least two families")
    ev = data.subset("eval")
    if scratch is None:
        scratch = train(student_spec, data, train_cfg)
    scratch_acc = accuracy(scratch, ev)
    rows = []
    for t in teachers:
        cfg = TrainConfig(**{**train_cfg.to_dict(), "label_mode": "teacher-hard-distill"}, teacher=t)
        student = train(student_spec, data, cfg)
        t_acc = accuracy(t, ev)
        rows.append({"teacher": t.name, "family": teacher_family[t.name],
                     "same-family": teacher_family[t.name] == student_spec.family,
                     "teacher-accuracy": t_acc, "student-accuracy": accuracy(student, ev),
                     "sat": float(similarity[t.name]), "flag-weak-teacher": t_acc < scratch_acc})

    def corr(sel):
        return correlate([r["sat"] for r in sel], [r["student-accuracy"] for r in sel])

    same = [r for r in rows if r["same-family"]]
    cross = [r for r in rows if not r["same-family"]]
    return {"scratch-accuracy": scratch_acc, "rows": rows, "overall": corr(rows), "same-family": corr(same),
            "cross-family": corr(cross),
            "teacher-accuracy-control": correlate([r["teacher-accuracy"] for r in rows],
                                                  [r["student-accuracy"] for r in rows])}
