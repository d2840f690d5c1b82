"""Similarity by attack transferability between pairs of models.

For models A and B with jointly-correct eval inputs X_AB, each model
attacks every input; the score is the natural log of the clamped mean
percentage of transferred misclassifications in both directions::

    sat(A, B) = ln max(eps_s, 100 / (2|X_AB|) * sum(1[A(x_B) != y] + 1[B(x_A) != y]))
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from archsim import rng as rngmod
from archsim.attacks import AdvBatch, AttackConfig, attack
from archsim.data import Dataset
from archsim.nn.model import Model, predict
from archsim.resize import to_resolution

log = logging.getLogger(__name__)

SAT_FORMAT = "archsim-sat/1"
LN100 = math.log(100.0)


class IncomparablePair(ValueError):
    """Two models share no correctly classified eval input."""


@dataclass(frozen=True)
class SatConfig:
    epsilon_floor: float = 0.01
    eval_fraction: float = 0.10
    attack: AttackConfig = field(default_factory=AttackConfig)
    resize_rule: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon_floor < 100:
            raise ValueError("epsilon_floor must be in (0, 100)")
        if not 0 < self.eval_fraction <= 1:
            raise ValueError("eval_fraction must be in (0, 1]")
        if self.resize_rule != "bilinear":
            raise ValueError("only the bilinear resize rule is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SatConfig":
        d = dict(d)
        d["attack"] = AttackConfig(**d.get("attack", {}))
        return cls(**d)


def sat_score(fooled_b_by_a: np.ndarray, fooled_a_by_b: np.ndarray, epsilon_floor: float = 0.01) -> float:
    """SAT from the two indicator streams over X_AB.

    ``fooled_b_by_a[i]`` is 1[B(x_A) != y] and ``fooled_a_by_b[i]`` is 1[A(x_B) != y].
    """
    a = np.asarray(fooled_b_by_a, dtype=np.int64)
    b = np.asarray(fooled_a_by_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("indicator streams must be 1-d and equally long")
    if len(a) == 0:
        raise IncomparablePair("empty eligible set")
    pct = 100.0 * (a.sum() + b.sum()) / (2 * len(a))
    return math.log(max(epsilon_floor, pct))


def one_sided_score(fooled_by_new: np.ndarray, epsilon_floor: float = 0.01) -> float:
    f = np.asarray(fooled_by_new, dtype=np.int64)
    if len(f) == 0:
        raise IncomparablePair("empty eligible set")
    return math.log(max(epsilon_floor, 100.0 * f.mean()))


def eval_subset(dataset: Dataset, cfg: SatConfig) -> Dataset:
    """The eval-fraction subsample shared by every pair of one matrix."""
    ev = dataset.subset("eval") if (dataset.split == "eval").any() else dataset
    n = max(1, int(round(cfg.eval_fraction * len(ev))))
    idx = np.sort(rngmod.stream(cfg.seed, "eval-subset").permutation(len(ev))[:n])
    return ev.take(idx)


def _predict_at(model: Model, images: np.ndarray) -> np.ndarray:
    return predict(model, to_resolution(images, model.spec.input_resolution))


def correct_mask(model: Model, data: Dataset) -> np.ndarray:
    return _predict_at(model, data.images) == data.labels


def eligible_set(model_a: Model, model_b: Model, data: Dataset) -> np.ndarray:
    """Indices (into ``data``) both models classify correctly."""
    return np.flatnonzero(correct_mask(model_a, data) & correct_mask(model_b, data))


def _attack_on(model: Model, data: Dataset, idx: np.ndarray, cfg: AttackConfig) -> AdvBatch:
    x = to_resolution(data.images[idx], model.spec.input_resolution)
    return attack(model, x, data.labels[idx], cfg, example_ids=idx)


def sat(model_a: Model, model_b: Model, data: Dataset, cfg: SatConfig = SatConfig(),
        subsample: bool = False) -> float:
    """SAT between two models on ``data`` (optionally first drawing the eval subset)."""
    if subsample:
        data = eval_subset(data, cfg)
    x_ab = eligible_set(model_a, model_b, data)
    if len(x_ab) == 0:
        raise IncomparablePair(f"{model_a.name} and {model_b.name} share no correct inputs")
    adv_a = _attack_on(model_a, data, x_ab, cfg.attack)
    adv_b = adv_a if model_b is model_a else _attack_on(model_b, data, x_ab, cfg.attack)
    y = data.labels[x_ab]
    fooled_b = _predict_at(model_b, adv_a.adversarial) != y
    fooled_a = _predict_at(model_a, adv_b.adversarial) != y
    return sat_score(fooled_b, fooled_a, cfg.epsilon_floor)


@dataclass
class SimilarityMatrix:
    model_names: list[str]
    values: np.ndarray          # ln scale
    raw_transfer: np.ndarray    # clamped percentages
    config: SatConfig
    counts: np.ndarray          # |X_AB|
    agreement: np.ndarray | None = None  # same-misclassification counts
    excluded: list[tuple[str, str]] = field(default_factory=list)
    self_success: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.model_names),) * 2:
            raise ValueError("values must be N x N")

    def index(self, name: str) -> int:
        return self.model_names.index(name)

    def __getitem__(self, pair) -> float:
        a, b = pair
        return float(self.values[self.index(a), self.index(b)])

    def pairs(self):
        """Upper-triangle (i, j, value) for comparable pairs."""
        n = len(self.model_names)
        bad = {frozenset(p) for p in self.excluded}
        for i in range(n):
            for j in range(i + 1, n):
                if frozenset((self.model_names[i], self.model_names[j])) in bad:
                    continue
                yield i, j, float(self.values[i, j])

    def subset(self, names: Sequence[str]) -> "SimilarityMatrix":
        idx = [self.index(n) for n in names]
        ix = np.ix_(idx, idx)
        keep = set(names)
        return SimilarityMatrix(list(names), self.values[ix], self.raw_transfer[ix], self.config,
                                self.counts[ix], None if self.agreement is None else self.agreement[ix],
                                [p for p in self.excluded if set(p) <= keep],
                                {k: v for k, v in self.self_success.items() if k in keep})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *self.model_names])
        for name, row in zip(self.model_names, self.values):
            w.writerow([name, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "format": SAT_FORMAT,
            "model-names": self.model_names,
            "config": self.config.to_dict(),
            "raw-transfer": np.round(self.raw_transfer, 6).tolist(),
            "counts": self.counts.astype(int).tolist(),
            "agreement": None if self.agreement is None else self.agreement.astype(int).tolist(),
            "excluded": [list(p) for p in self.excluded],
            "self-success": {k: round(v, 6) for k, v in self.self_success.items()},
        }

    def save(self, csv_path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        side = csv_path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))
        return csv_path, side

    @classmethod
    def load(cls, csv_path) -> "SimilarityMatrix":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        if meta.get("format") != SAT_FORMAT:
            raise ValueError(f"{csv_path}: expected {SAT_FORMAT}, got {meta.get('format')!r}")
        rows = list(csv.reader(csv_path.read_text().splitlines()))
        names = rows[0][1:]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        agreement = meta.get("agreement")
        return cls(names, values, np.array(meta["raw-transfer"]), SatConfig.from_dict(meta["config"]),
                   np.array(meta["counts"]), None if agreement is None else np.array(agreement),
                   [tuple(p) for p in meta.get("excluded", [])], meta.get("self-success", {}))


@dataclass
class _Probe:
    """One model's attack on its own correct inputs plus every model's predictions on it."""

    adv: AdvBatch
    positions: dict[int, int]  # eval index -> row in adv


def probe_zoo(zoo: Sequence[Model], data: Dataset, attack_cfg: AttackConfig):
    """Attack each model once on its own correct inputs; cross-predict every pair."""
    correct = np.stack([correct_mask(m, data) for m in zoo])
    probes = []
    for m, mask in zip(zoo, correct):
        idx = np.flatnonzero(mask)
        adv = _attack_on(m, data, idx, attack_cfg)
        probes.append(_Probe(adv, {int(i): r for r, i in enumerate(idx)}))
        log.info("attacked %s on %d inputs (self success %.3f)", m.name, len(idx),
                 adv.fooled_source.mean() if len(idx) else float("nan"))
    # preds[i][j] = predictions of model j on model i's adversarial examples
    preds = [[_predict_at(m, p.adv.adversarial) for m in zoo] for p in probes]
    return correct, probes, preds


def _rows(probe: _Probe, idx: np.ndarray) -> np.ndarray:
    return np.array([probe.positions[int(i)] for i in idx], dtype=np.int64)


def sat_matrix(zoo: Sequence[Model], data: Dataset, cfg: SatConfig = SatConfig(),
               subsample: bool = True, probe=None) -> SimilarityMatrix:
    """Pairwise SAT over a zoo; each model's adversarial batch is generated once.

    ``probe`` may carry a ``probe_zoo`` result for the same zoo and (already
    subsampled) data, so the one-sided matrix can share the attacks.
    """
    if len(zoo) < 2:
        raise ValueError("need at least two models")
    names = [m.name for m in zoo]
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    if subsample:
        data = eval_subset(data, cfg)
    correct, probes, preds = probe if probe is not None else probe_zoo(zoo, data, cfg.attack)
    n = len(zoo)
    values = np.zeros((n, n))
    raw = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    agree = np.zeros((n, n), dtype=np.int64)
    excluded = []
    for i in range(n):
        for j in range(i, n):
            x_ab = np.flatnonzero(correct[i] & correct[j])
            counts[i, j] = counts[j, i] = len(x_ab)
            if len(x_ab) == 0:
                excluded.append((names[i], names[j]))
                values[i, j] = values[j, i] = np.nan
                raw[i, j] = raw[j, i] = np.nan
                continue
            y = data.labels[x_ab]
            pred_j_on_i = preds[i][j][_rows(probes[i], x_ab)]
            pred_i_on_j = preds[j][i][_rows(probes[j], x_ab)]
            s = sat_score(pred_j_on_i != y, pred_i_on_j != y, cfg.epsilon_floor)
            values[i, j] = values[j, i] = s
            raw[i, j] = raw[j, i] = math.exp(s)
            agree[i, j] = agree[j, i] = _same_wrong(pred_i_on_j, pred_j_on_i, y)
    self_success = {names[i]: float(probes[i].adv.fooled_source.mean()) if len(probes[i].adv) else 0.0
                    for i in range(n)}
    return SimilarityMatrix(names, values, raw, cfg, counts, agree, excluded, self_success)


def _same_wrong(pred_a_on_b, pred_b_on_a, y) -> int:
    return int(((pred_a_on_b != y) & (pred_b_on_a != y) & (pred_a_on_b == pred_b_on_a)).sum())


def misclassification_agreement(model_a: Model, model_b: Model, adv_a: AdvBatch, adv_b: AdvBatch) -> int:
    """Inputs where the two transferred attacks land both models on the same wrong class.

    Counts x with A(x_B) == B(x_A) != y over the inputs both batches share.
    """
    shared, ia, ib = np.intersect1d(adv_a.example_ids, adv_b.example_ids, return_indices=True)
    if len(shared) == 0:
        return 0
    if not np.array_equal(adv_a.labels[ia], adv_b.labels[ib]):
        raise ValueError("adversarial batches disagree on labels for shared inputs")
    y = adv_a.labels[ia]
    pred_a_on_b = _predict_at(model_a, adv_b.adversarial[ib])
    pred_b_on_a = _predict_at(model_b, adv_a.adversarial[ia])
    return _same_wrong(pred_a_on_b, pred_b_on_a, y)


def sat_one_sided(new_model: Model, zoo: Sequence[Model], data: Dataset, cfg: SatConfig = SatConfig(),
                  subsample: bool = False) -> list[float]:
    """Approximate SAT using only the new model's adversarial examples."""
    if subsample:
        data = eval_subset(data, cfg)
    mask_new = correct_mask(new_model, data)
    adv = _attack_on(new_model, data, np.flatnonzero(mask_new), cfg.attack)
    rows = {int(i): r for r, i in enumerate(adv.example_ids)}
    out = []
    for member in zoo:
        x = np.flatnonzero(mask_new & correct_mask(member, data))
        if len(x) == 0:
            raise IncomparablePair(f"{new_model.name} and {member.name} share no correct inputs")
        r = np.array([rows[int(i)] for i in x])
        fooled = _predict_at(member, adv.adversarial[r]) != data.labels[x]
        out.append(one_sided_score(fooled, cfg.epsilon_floor))
    return out


def one_sided_matrix(zoo: Sequence[Model], data: Dataset, cfg: SatConfig = SatConfig(),
                     subsample: bool = True, probe=None) -> np.ndarray:
    """M[i, j] = one-sided SAT of model i (as the new model) against model j."""
    if subsample:
        data = eval_subset(data, cfg)
    correct, probes, preds = probe if probe is not None else probe_zoo(zoo, data, cfg.attack)
    n = len(zoo)
    out = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            x = np.flatnonzero(correct[i] & correct[j])
            if len(x):
                fooled = preds[i][j][_rows(probes[i], x)] != data.labels[x]
                out[i, j] = one_sided_score(fooled, cfg.epsilon_floor)
    return out
