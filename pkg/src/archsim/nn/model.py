"""Model specs, weights, inference and exact input gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from archsim import rng as rngmod
from archsim.features import ArchFeatureRecord
from archsim.nn.layers import Layer, ShapeError, make_layer


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def build(self) -> Layer:
        return make_layer(self.kind, self.params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_resolution: tuple[int, int, int]
    num_classes: int
    arch_features: ArchFeatureRecord | None = None
    family: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(l["kind"], dict(l.get("params", {})))
            for l in self.layers))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        # caches, not part of identity
        object.__setattr__(self, "_built", None)

    @property
    def built(self) -> list[Layer]:
        if self._built is None:
            object.__setattr__(self, "_built", [l.build() for l in self.layers])
        return self._built

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer input shapes (without batch); raises ShapeError on mismatch."""
        return chain_check(self)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "input-resolution": list(self.input_resolution),
            "num-classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
            "arch-features": self.arch_features.to_dict() if self.arch_features else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        feats = d.get("arch-features")
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec(l["kind"], dict(l.get("params", {}))) for l in d["layers"]),
            input_resolution=tuple(d["input-resolution"]),
            num_classes=int(d["num-classes"]),
            arch_features=ArchFeatureRecord.from_dict(feats) if feats else None,
            family=d.get("family", ""),
        )


def chain_check(spec: ModelSpec) -> list[tuple[int, ...]]:
    shape = tuple(spec.input_resolution)
    shapes = []
    stack = []
    for i, layer in enumerate(spec.built):
        shapes.append(shape)
        try:
            if layer.kind == "residual-begin":
                stack.append((i, shape))
            elif layer.kind == "residual-end":
                if not stack:
                    raise ShapeError("residual-end without residual-begin")
                j, skip = stack.pop()
                if skip != shape:
                    raise ShapeError(f"residual branch from layer {j} changes shape {skip} -> {shape}")
            else:
                shape = layer.out_shape(shape)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
    if stack:
        raise ShapeError(f"unbalanced residual-begin at layer {stack[-1][0]}")
    if shape != (spec.num_classes,):
        raise ShapeError(f"final output shape {shape} != ({spec.num_classes},)")
    return shapes


def weight_name(i: int, kind: str, pname: str) -> str:
    return f"{i:02d}.{kind}.{pname}"


def expected_weight_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    out = {}
    for i, (layer, shape) in enumerate(zip(spec.built, chain_check(spec))):
        for pname, s in {**layer.param_shapes(shape), **layer.buffer_shapes(shape)}.items():
            out[weight_name(i, layer.kind, pname)] = tuple(s)
    return out


def init_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Kaiming-uniform init; each layer draws from its own named stream."""
    weights = {}
    for i, (layer, shape) in enumerate(zip(spec.built, chain_check(spec))):
        params = layer.init(rngmod.stream(seed, "init", i, layer.kind), shape)
        for pname, arr in params.items():
            weights[weight_name(i, layer.kind, pname)] = arr
    return weights


def layer_params(spec: ModelSpec, weights: Mapping[str, np.ndarray]) -> list[dict[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(spec.built):
        prefix = f"{i:02d}.{layer.kind}."
        out.append({k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)})
    return out


class Model:
    """A spec plus trained weights.  Weights are read-only once constructed."""

    def __init__(self, spec: ModelSpec, weights: Mapping[str, np.ndarray], training_meta: dict | None = None):
        expected = expected_weight_shapes(spec)
        if set(expected) != set(weights):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ValueError(f"{spec.name}: weight names mismatch (missing {missing}, extra {extra})")
        frozen = {}
        for k, v in weights.items():
            arr = np.array(v, dtype=np.float32, copy=True)
            if arr.shape != expected[k]:
                raise ValueError(f"{spec.name}: weight {k} has shape {arr.shape}, expected {expected[k]}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{spec.name}: weight {k} has non-finite values")
            arr.flags.writeable = False
            frozen[k] = arr
        self.spec = spec
        self.weights = MappingProxyType(frozen)
        self.training_meta = dict(training_meta or {})
        self._params = layer_params(spec, frozen)

    @property
    def name(self) -> str:
        return self.spec.name

    def __repr__(self):
        return f"Model({self.spec.name!r}, {len(self.weights)} tensors)"


def as_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch)
    res = tuple(spec.input_resolution)
    if x.shape == res:
        x = x[None]
    if x.shape[1:] != res:
        raise ShapeError(f"{spec.name}: layer 0 expects input {res}, got {x.shape[1:]}")
    if not np.isfinite(x).all():
        raise ValueError("input batch has non-finite values")
    if x.dtype != np.float64:
        x = x.astype(np.float32, copy=False)
    return x


def run_forward(spec: ModelSpec, params: Sequence[dict], x: np.ndarray, train: bool = False,
                keep_cache: bool = True):
    caches = []
    stack = []
    for i, (layer, p) in enumerate(zip(spec.built, params)):
        if layer.kind == "residual-begin":
            stack.append(x)
            cache = None
        elif layer.kind == "residual-end":
            x = x + stack.pop()
            cache = None
        else:
            if x.dtype == np.float64:
                p = {k: v.astype(np.float64) for k, v in p.items()}
            x, cache = layer.forward(p, x, train)
            if not np.isfinite(x).all():
                raise NonFiniteError(f"{spec.name}: non-finite activation at layer {i} ({layer.kind})")
        caches.append(cache if keep_cache else None)
    return x, caches


def run_backward(spec: ModelSpec, params: Sequence[dict], caches: list, dy: np.ndarray,
                 want_param_grads: bool = True):
    grads: list[dict] = [{} for _ in params]
    skip_grads = []
    for i in range(len(caches) - 1, -1, -1):
        layer = spec.built[i]
        if layer.kind == "residual-end":
            skip_grads.append(dy)
        elif layer.kind == "residual-begin":
            dy = dy + skip_grads.pop()
        else:
            p = params[i]
            if dy.dtype == np.float64:
                p = {k: v.astype(np.float64) for k, v in p.items()}
            dy, g = layer.backward(p, caches[i], dy)
            if want_param_grads:
                grads[i] = g
    return dy, grads


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Summed cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(-1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-(z[idx, labels] - np.log(e.sum(-1))).sum())
    d = probs.copy()
    d[idx, labels] -= 1
    return loss, d


def _check_labels(spec: ModelSpec, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return labels


def forward(model: Model, batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Inference-mode logits ``(N, num_classes)``."""
    x = as_batch(model.spec, batch)
    outs = [run_forward(model.spec, model._params, x[s:s + chunk], keep_cache=False)[0]
            for s in range(0, max(len(x), 1), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.num_classes), x.dtype)


def predict(model: Model, batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    return forward(model, batch, chunk).argmax(-1)


def input_gradient(model: Model, batch: np.ndarray, labels) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch.

    The loss is summed (not averaged) so each example's gradient is
    independent of batch size.
    """
    x = as_batch(model.spec, batch)
    labels = _check_labels(model.spec, labels, len(x))
    logits, caches = run_forward(model.spec, model._params, x)
    _, d = softmax_xent(logits, labels)
    dx, _ = run_backward(model.spec, model._params, caches, d, want_param_grads=False)
    return dx


def loss_and_input_gradient(model: Model, batch: np.ndarray, labels):
    x = as_batch(model.spec, batch)
    labels = _check_labels(model.spec, labels, len(x))
    logits, caches = run_forward(model.spec, model._params, x)
    loss, d = softmax_xent(logits, labels)
    dx, _ = run_backward(model.spec, model._params, caches, d, want_param_grads=False)
    return loss, logits, dx
