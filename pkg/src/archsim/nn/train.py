"""SGD training with momentum, weight decay, and hard-label distillation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from archsim import rng as rngmod
from archsim.nn.layers import BN_MOMENTUM
from archsim.nn.model import (
    Model,
    ModelSpec,
    as_batch,
    chain_check,
    init_weights,
    layer_params,
    predict,
    run_backward,
    run_forward,
    softmax_xent,
)
from archsim.resize import to_resolution

if TYPE_CHECKING:
    from archsim.data import Dataset

log = logging.getLogger(__name__)

SCHEDULES = ("step-decay", "cosine")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 10
    schedule: str = "cosine"
    batch_size: int = 64
    label_mode: str = "hard-labels"
    teacher: Model | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.label_mode not in ("hard-labels", "teacher-hard-distill"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if self.label_mode == "teacher-hard-distill" and self.teacher is None:
            raise ValueError("teacher-hard-distill needs a teacher model")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "teacher"}
        if self.teacher is not None:
            d["teacher"] = self.teacher.name
        return d


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / total_steps))
    frac = step / total_steps
    return cfg.learning_rate * (0.1 ** ((frac >= 0.5) + (frac >= 0.75)))


def teacher_labels(teacher: Model, images: np.ndarray) -> np.ndarray:
    """Argmax predictions of the teacher, resizing inputs to its resolution."""
    return predict(teacher, to_resolution(images, teacher.spec.input_resolution))


def _decayed(name: str) -> bool:
    # weight matrices only; biases and norm affine params are not decayed
    return name.rsplit(".", 1)[-1].startswith("W")


def train(spec: ModelSpec, dataset: "Dataset", cfg: TrainConfig, on_epoch=None) -> Model:
    """SGD with momentum.  ``on_epoch(epoch, snapshot_model)`` is called after every epoch."""
    chain_check(spec)
    train_set = dataset.subset("train")
    x_all = as_batch(spec, to_resolution(train_set.images, spec.input_resolution))
    if cfg.label_mode == "teacher-hard-distill":
        y_all = teacher_labels(cfg.teacher, train_set.images)
    else:
        y_all = train_set.labels
    if y_all.max(initial=0) >= spec.num_classes:
        raise ValueError("dataset labels exceed model num_classes")

    weights = {k: v.copy() for k, v in init_weights(spec, cfg.seed).items()}
    params = layer_params(spec, weights)  # views into `weights`
    velocity = {k: np.zeros_like(v) for k, v in weights.items()}
    n = len(x_all)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rngmod.stream(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            logits, caches = run_forward(spec, params, x, train=True)
            loss, dlogits = softmax_xent(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{spec.name}: loss {loss} at epoch {epoch}, step {b}")
            epoch_loss += loss
            _, grads = run_backward(spec, params, caches, dlogits / len(idx))
            lr = np.float32(lr_at(cfg, step, total))
            for i, (layer, g) in enumerate(zip(spec.built, grads)):
                prefix = f"{i:02d}.{layer.kind}."
                for pname, grad in g.items():
                    name = prefix + pname
                    w = weights[name]
                    if cfg.weight_decay and _decayed(name):
                        grad = grad + np.float32(cfg.weight_decay) * w
                    v = velocity[name]
                    v *= np.float32(cfg.momentum)
                    v += grad
                    w -= lr * v
                if layer.kind == "batch-norm":
                    mu, var = caches[i][3], caches[i][4]
                    m = np.float32(BN_MOMENTUM)
                    weights[prefix + "running_mean"] *= 1 - m
                    weights[prefix + "running_mean"] += m * mu
                    weights[prefix + "running_var"] *= 1 - m
                    weights[prefix + "running_var"] += m * var
            step += 1
        history.append(epoch_loss / n)
        log.debug("%s epoch %d loss %.4f", spec.name, epoch, history[-1])
        if not all(np.isfinite(w).all() for w in weights.values()):
            raise TrainingDiverged(f"{spec.name}: non-finite weights after epoch {epoch}")
        if on_epoch is not None:
            on_epoch(epoch, Model(spec, {k: v.copy() for k, v in weights.items()}, {"epoch": epoch}))

    meta = {"seed": cfg.seed, "config": cfg.to_dict(), "epochs": cfg.epochs, "loss-history": history}
    model = Model(spec, weights, meta)
    model.training_meta["train-accuracy"] = float((predict(model, x_all) == train_set.labels).mean())
    eval_set = dataset.subset("eval")
    target = eval_set if len(eval_set) else train_set
    model.training_meta["final-clean-accuracy"] = accuracy(model, target)
    return model


def accuracy(model: Model, dataset: "Dataset") -> float:
    images = to_resolution(dataset.images, model.spec.input_resolution)
    return float((predict(model, images) == dataset.labels).mean())
