"""Untargeted white-box L-infinity attacks: PGD, MI-FGSM and FGSM."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from archsim import rng as rngmod
from archsim.nn.model import Model, as_batch, loss_and_input_gradient, predict
from archsim.resize import to_resolution

log = logging.getLogger(__name__)

ADV_FORMAT = "archsim-adv/1"
METHODS = ("pgd", "mifgsm", "fgsm")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 0.1
    iterations: int = 50
    momentum_decay: float = 1.0
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.step_size <= 0 or self.iterations <= 0:
            raise ValueError("step_size and iterations must be positive")
        if self.method == "fgsm" and self.iterations != 1:
            raise ValueError("fgsm is single-step: iterations must be 1")
        if self.method == "mifgsm" and not 0 <= self.momentum_decay:
            raise ValueError("momentum_decay must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdvBatch:
    source_model: str
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    config: AttackConfig
    fooled_source: np.ndarray
    example_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, positions) -> "AdvBatch":
        p = np.asarray(positions, dtype=np.int64)
        return AdvBatch(self.source_model, self.clean[p], self.adversarial[p], self.labels[p],
                        self.config, self.fooled_source[p], self.example_ids[p])

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.clean.astype("<f4").tofile(d / "clean.f32")
        self.adversarial.astype("<f4").tofile(d / "adversarial.f32")
        with open(d / "labels.csv", "w") as fh:
            fh.write("example_id,label,fooled_source\n")
            for i, y, f in zip(self.example_ids, self.labels, self.fooled_source):
                fh.write(f"{int(i)},{int(y)},{int(f)}\n")
        manifest = {"format": ADV_FORMAT, "source-model": self.source_model,
                    "shape": list(self.clean.shape), "config": self.config.to_dict(),
                    "blobs": {"clean": "clean.f32", "adversarial": "adversarial.f32"},
                    "labels": "labels.csv"}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "AdvBatch":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format") != ADV_FORMAT:
            raise ValueError(f"{d}: expected format {ADV_FORMAT}, got {manifest.get('format')!r}")
        shape = tuple(manifest["shape"])
        clean = np.fromfile(d / "clean.f32", dtype="<f4").reshape(shape)
        adv = np.fromfile(d / "adversarial.f32", dtype="<f4").reshape(shape)
        rows = np.loadtxt(d / "labels.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        rows = rows.reshape(-1, 3)
        return cls(manifest["source-model"], clean, adv, rows[:, 1], AttackConfig(**manifest["config"]),
                   rows[:, 2].astype(bool), rows[:, 0])


def _random_start(cfg: AttackConfig, shape, ids) -> np.ndarray:
    # one stream per example id so a point's start never depends on its batch-mates
    per = shape[1:]
    eps = cfg.epsilon
    return np.stack([rngmod.stream(cfg.seed, "pgd-start", int(i)).uniform(-eps, eps, size=per)
                     for i in ids]).astype(np.float32)


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _attack_chunk(model: Model, x0: np.ndarray, y: np.ndarray, ids, cfg: AttackConfig) -> np.ndarray:
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.epsilon if cfg.method == "fgsm" else cfg.step_size)
    if cfg.method == "pgd" and cfg.random_start:
        x = _project(x0 + _random_start(cfg, x0.shape, ids), x0, eps)
    else:
        x = x0.copy()
    accum = np.zeros_like(x0)
    for _ in range(cfg.iterations):
        _, _, g = loss_and_input_gradient(model, x, y)
        if cfg.method == "mifgsm":
            l1 = np.abs(g).reshape(len(g), -1).sum(1).reshape((-1,) + (1,) * (g.ndim - 1))
            accum = np.float32(cfg.momentum_decay) * accum + g / np.maximum(l1, np.float32(1e-12))
            g = accum
        x = _project(x + alpha * np.sign(g).astype(np.float32), x0, eps)
    return x


def attack(model: Model, batch: np.ndarray, labels, cfg: AttackConfig = AttackConfig(),
           example_ids=None, chunk: int = 256) -> AdvBatch:
    """Generate adversarial examples for ``model`` within an L-infinity ball of radius epsilon."""
    x0 = as_batch(model.spec, batch)
    if x0.size and (x0.min() < 0 or x0.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    ids = np.arange(len(y)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    if cfg.epsilon == 0:
        warnings.warn("epsilon == 0: returning the clean batch unchanged", RuntimeWarning, stacklevel=2)
        return AdvBatch(model.name, x0.copy(), x0.copy(), y, cfg, np.zeros(len(y), bool), ids)
    adv = np.empty_like(x0)
    for s in range(0, len(y), chunk):
        sl = slice(s, s + chunk)
        adv[sl] = _attack_chunk(model, x0[sl], y[sl], ids[sl], cfg)
    fooled = predict(model, adv) != y if len(y) else np.zeros(0, bool)
    return AdvBatch(model.name, x0.copy(), adv, y, cfg, fooled, ids)


def attack_success_rate(model: Model, adv: AdvBatch) -> float:
    """Fraction of adversarial examples ``model`` misclassifies."""
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    x = to_resolution(adv.adversarial, model.spec.input_resolution)
    return float((predict(model, x) != adv.labels).mean())
