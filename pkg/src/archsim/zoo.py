"""Zoo manifests and deterministic, cached zoo construction."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from archsim.data import Dataset, dataset_from_recipe, load_dataset, synth_recipe
from archsim.features import ArchFeatureRecord
from archsim.nn.io import load_model, save_model
from archsim.nn.model import Model, ModelSpec
from archsim.nn.train import TrainConfig, accuracy, train

log = logging.getLogger(__name__)

ZOO_FORMAT = "archsim-zoo/1"
FAMILIES = ("mlp", "cnn-bn-relu", "cnn-patchify-gelu", "se-cnn", "mini-attention")
VARIATIONS = ("seed", "hparam", "regime")


def _L(kind, **params):
    return {"kind": kind, "params": params}


def family_layers(family: str, num_classes: int = 10, width: int = 32) -> list[dict]:
    """Layer lists of the five desk families (32x32x3 input)."""
    half = width // 2
    if family == "mlp":
        return [_L("flatten"), _L("dense", units=128), _L("relu"), _L("dense", units=64), _L("relu"),
                _L("dense", units=num_classes)]
    if family == "cnn-bn-relu":
        return [_L("conv2d", channels=half, kernel=3, stride=2, padding=1), _L("batch-norm"), _L("relu"),
                _L("residual-begin"),
                _L("conv2d", channels=half, kernel=3, padding=1), _L("batch-norm"), _L("relu"),
                _L("conv2d", channels=half, kernel=3, padding=1), _L("batch-norm"),
                _L("residual-end"), _L("relu"),
                _L("conv2d", channels=width, kernel=3, stride=2, padding=1), _L("batch-norm"), _L("relu"),
                _L("global-avg-pool"), _L("dense", units=num_classes)]
    if family == "cnn-patchify-gelu":
        block = [_L("residual-begin"), _L("conv2d", channels=width, kernel=3, padding=1, groups=width),
                 _L("layer-norm"), _L("dense", units=2 * width), _L("gelu"), _L("dense", units=width),
                 _L("residual-end")]
        return ([_L("patchify", channels=width, kernel=4), _L("layer-norm")] + block * 2
                + [_L("global-avg-pool"), _L("layer-norm"), _L("dense", units=num_classes)])
    if family == "se-cnn":
        return [_L("conv2d", channels=half, kernel=3, padding=1), _L("batch-norm"), _L("silu"),
                _L("max-pool", kernel=2),
                _L("residual-begin"), _L("conv2d", channels=half, kernel=3, padding=1), _L("batch-norm"),
                _L("silu"), _L("squeeze-excite"), _L("residual-end"),
                _L("conv2d", channels=width, kernel=3, stride=2, padding=1), _L("batch-norm"), _L("silu"),
                _L("squeeze-excite"), _L("global-avg-pool"), _L("dense", units=num_classes)]
    if family == "mini-attention":
        # a depthwise conv ahead of each attention block supplies position information
        block = [_L("residual-begin"), _L("conv2d", channels=width, kernel=3, padding=1, groups=width),
                 _L("residual-end"),
                 _L("residual-begin"), _L("layer-norm"), _L("self-attention-1h", **{"hidden-dim": width}),
                 _L("residual-end"),
                 _L("residual-begin"), _L("layer-norm"), _L("dense", units=2 * width), _L("gelu"),
                 _L("dense", units=width), _L("residual-end")]
        return ([_L("patchify", channels=width, kernel=4)] + block * 2
                + [_L("layer-norm"), _L("global-avg-pool"), _L("dense", units=num_classes)])
    raise KeyError(f"unknown family {family!r}")


_RECORDS = {
    "mlp": ("MLP", "flatten", "Norm-free", "No", "ReLU", "No", "No", "No", "No", "No", "Flatten", "~"),
    "cnn-bn-relu": ("CNN", "3s2", "BN", "Yes", "ReLU", "No", "No", "No", "No", "No", "GAP", "~"),
    "cnn-patchify-gelu": ("CNN", "4s4", "LN", "No", "GeLU", "No", "No", "No", "Yes", "No", "GAP", "~"),
    "se-cnn": ("CNN", "3s1", "BN", "Yes", "SiLU", "Yes", "No", "Yes (SE)", "No", "No", "GAP", "Middle"),
    "mini-attention": ("Transformer", "4s4", "LN", "No", "GeLU", "No", "Yes", "No", "Yes", "No", "GAP", "~"),
}


def family_record(family: str, resolution: int = 32) -> ArchFeatureRecord:
    base, stem, norm, hier, act, pool, sa, cw, dw, gc, fp, loc = _RECORDS[family]
    return ArchFeatureRecord(base, stem, str(resolution), norm, hier, act, pool, sa, cw, dw, gc, fp, loc)


@dataclass
class ZooEntry:
    spec: ModelSpec
    train: dict                  # TrainConfig fields; "teacher" names an earlier entry
    family: str
    variation: str = "seed"

    def __post_init__(self):
        if self.variation not in VARIATIONS:
            raise ValueError(f"variation must be one of {VARIATIONS}")
        if self.spec.arch_features is None:
            raise ValueError(f"{self.spec.name}: zoo specs must carry an architecture record")
        TrainConfig(**{k: v for k, v in self.train.items() if k != "teacher"},
                    **({"teacher": _Placeholder()} if self.train.get("teacher") else {}))

    @property
    def name(self) -> str:
        return self.spec.name

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "train": dict(self.train), "family": self.family,
                "variation": self.variation}

    @classmethod
    def from_dict(cls, d: dict) -> "ZooEntry":
        return cls(ModelSpec.from_dict(d["spec"]), dict(d["train"]), d["family"], d.get("variation", "seed"))


class _Placeholder:
    name = "placeholder"


@dataclass
class ZooManifest:
    entries: list[ZooEntry]
    dataset: dict                # archsim-synth/1 recipe or {"path": ...}
    accuracy_floor: float = 0.85
    accuracy_band: float = 0.10

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("zoo entry names must be unique")
        seen = set()
        for e in self.entries:
            t = e.train.get("teacher")
            if t and t not in seen:
                raise ValueError(f"{e.name}: teacher {t!r} must be an earlier entry")
            seen.add(e.name)

    def families(self) -> dict[str, str]:
        return {e.name: e.family for e in self.entries}

    def records(self) -> dict[str, ArchFeatureRecord]:
        return {e.name: e.spec.arch_features for e in self.entries}

    def to_dict(self) -> dict:
        return {"format": ZOO_FORMAT, "dataset": self.dataset, "accuracy-floor": self.accuracy_floor,
                "accuracy-band": self.accuracy_band, "entries": [e.to_dict() for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        p = Path(path)
        p.write_text(self.to_json())
        return p

    @classmethod
    def from_dict(cls, d: dict) -> "ZooManifest":
        if d.get("format") != ZOO_FORMAT:
            raise ValueError(f"expected {ZOO_FORMAT}, got {d.get('format')!r}")
        return cls([ZooEntry.from_dict(e) for e in d["entries"]], d["dataset"],
                   d.get("accuracy-floor", 0.85), d.get("accuracy-band", 0.10))

    @classmethod
    def load(cls, path) -> "ZooManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def load_dataset(self, base_dir=None) -> Dataset:
        if "path" in self.dataset:
            p = Path(self.dataset["path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            return load_dataset(p)
        return dataset_from_recipe(self.dataset)


# the patchify stem plateaus for a few epochs before it starts to fit
_FAMILY_TRAIN = {"mlp": {"epochs": 20, "learning_rate": 0.03}, "cnn-patchify-gelu": {"epochs": 15}}


def make_entry(family: str, name: str, variation: str = "seed", num_classes: int = 10,
               resolution: int = 32, **train_kw) -> ZooEntry:
    train_defaults = _FAMILY_TRAIN.get(family, {"epochs": 10})
    cfg = {**TrainConfig().to_dict(), **train_defaults, **train_kw}
    spec = ModelSpec(name, family_layers(family, num_classes), (resolution, resolution, 3), num_classes,
                     family_record(family, resolution), family)
    return ZooEntry(spec, cfg, family, variation)


def default_manifest(per_class: int = 1000, seed: int = 0) -> ZooManifest:
    """Thirteen models over five families with seed, hparam and regime variants."""
    hp = {"learning_rate": 0.02, "weight_decay": 1e-4, "schedule": "step-decay", "seed": 100}
    entries = [
        make_entry("cnn-bn-relu", "cnn-s0", seed=0),
        make_entry("cnn-bn-relu", "cnn-s1", seed=1),
        make_entry("cnn-bn-relu", "cnn-hp", "hparam", **hp),
        make_entry("se-cnn", "se-s0", seed=0),
        make_entry("se-cnn", "se-s1", seed=1),
        make_entry("se-cnn", "se-hp", "hparam", **{**hp, "learning_rate": 0.05, "batch_size": 32}),
        make_entry("cnn-patchify-gelu", "patch-s0", seed=0),
        make_entry("cnn-patchify-gelu", "patch-s1", seed=1),
        make_entry("mini-attention", "attn-s0", seed=0),
        make_entry("mini-attention", "attn-s1", seed=1),
        make_entry("mlp", "mlp-s0", seed=0),
        make_entry("mlp", "mlp-s1", seed=1),
        make_entry("cnn-bn-relu", "cnn-kd", "regime", seed=200, label_mode="teacher-hard-distill",
                   teacher="attn-s0"),
    ]
    return ZooManifest(entries, synth_recipe(seed, 10, per_class, 32))


# ---------------------------------------------------------------- building


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def entry_key(entry: ZooEntry, dataset: dict, teacher_key: str | None = None) -> str:
    payload = {"entry": entry.to_dict(), "dataset": dataset, "teacher": teacher_key}
    return hashlib.sha256(_canon(payload).encode()).hexdigest()[:16]


def _train_entry(entry: ZooEntry, data: Dataset, teacher: Model | None) -> Model:
    kw = {k: v for k, v in entry.train.items() if k != "teacher"}
    cfg = TrainConfig(**kw, teacher=teacher)
    model = train(entry.spec, data, cfg)
    model.training_meta["family"] = entry.family
    model.training_meta["variation"] = entry.variation
    return model


def _train_and_save(args):
    entry_d, data, teacher_path, out = args
    teacher = load_model(teacher_path) if teacher_path else None
    model = _train_entry(ZooEntry.from_dict(entry_d), data, teacher)
    save_model(model, out)
    return out


@dataclass
class ZooBuild:
    models: list[Model]
    excluded: dict[str, str] = field(default_factory=dict)
    accuracies: dict[str, float] = field(default_factory=dict)
    cache_keys: dict[str, str] = field(default_factory=dict)

    def by_name(self) -> dict[str, Model]:
        return {m.name: m for m in self.models}

    def report(self) -> dict:
        return {"members": [m.name for m in self.models], "excluded": self.excluded,
                "clean-accuracy": {k: round(v, 6) for k, v in self.accuracies.items()},
                "cache-keys": self.cache_keys}


def build_zoo(manifest: ZooManifest, cache_dir=None, data: Dataset | None = None,
              workers: int = 1) -> ZooBuild:
    """Train (or load from ``cache_dir``) every entry, then apply the accuracy floor and band.

    Cached models are keyed by a hash of the entry, the dataset reference and
    the teacher's own key, so any change retrains exactly the affected models.
    """
    if data is None:
        data = manifest.load_dataset()
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    keys: dict[str, str] = {}
    for e in manifest.entries:
        keys[e.name] = entry_key(e, manifest.dataset, keys.get(e.train.get("teacher") or ""))

    def path_of(e):
        return cache / f"{e.name}-{keys[e.name]}"

    models: dict[str, Model] = {}
    if cache is not None:
        for e in manifest.entries:
            if path_of(e).with_suffix(".json").exists():
                models[e.name] = load_model(path_of(e))
                log.info("loaded %s from cache", e.name)
    pending = [e for e in manifest.entries if e.name not in models]
    if workers > 1 and cache is not None and len(pending) > 1:
        while pending:
            ready = [e for e in pending if not e.train.get("teacher") or e.train["teacher"] in models]
            jobs = [(e.to_dict(), data,
                     path_of(_entry(manifest, e.train["teacher"])) if e.train.get("teacher") else None,
                     path_of(e)) for e in ready]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for e, out in zip(ready, pool.map(_train_and_save, jobs)):
                    models[e.name] = load_model(out)
            pending = [e for e in pending if e not in ready]
    else:
        for e in pending:
            teacher = models.get(e.train.get("teacher") or "")
            log.info("training %s", e.name)
            m = _train_entry(e, data, teacher)
            if cache is not None:
                save_model(m, path_of(e))
                m = load_model(path_of(e))   # float32 round trip, identical to later cache hits
            models[e.name] = m

    ev = data.subset("eval")
    acc = {e.name: accuracy(models[e.name], ev) for e in manifest.entries}
    excluded = {}
    for name, a in acc.items():
        if a < manifest.accuracy_floor:
            excluded[name] = f"clean accuracy {a:.4f} below floor {manifest.accuracy_floor}"
    kept = sorted((n for n in acc if n not in excluded), key=lambda n: -acc[n])
    if kept:
        top = acc[kept[0]]
        for n in kept:
            if top - acc[n] > manifest.accuracy_band:
                excluded[n] = f"clean accuracy {acc[n]:.4f} outside {manifest.accuracy_band} band below {top:.4f}"
    for n, why in excluded.items():
        log.warning("excluding %s: %s", n, why)
    members = [models[e.name] for e in manifest.entries if e.name not in excluded]
    return ZooBuild(members, excluded, acc, keys)


def _entry(manifest: ZooManifest, name: str) -> ZooEntry:
    for e in manifest.entries:
        if e.name == name:
            return e
    raise KeyError(name)


def pair_kind(build_or_manifest, a: str, b: str) -> str:
    """Relation of two zoo members: 'seed', 'hparam', 'regime' (same family) or 'cross'."""
    entries = {e.name: e for e in build_or_manifest.entries}
    ea, eb = entries[a], entries[b]
    if ea.family != eb.family:
        return "cross"
    kinds = {ea.variation, eb.variation}
    if "regime" in kinds:
        return "regime"
    if "hparam" in kinds:
        return "hparam"
    return "seed"


def subset_manifest(manifest: ZooManifest, names: Sequence[str]) -> ZooManifest:
    keep = set(names)
    return ZooManifest([copy.deepcopy(e) for e in manifest.entries if e.name in keep], manifest.dataset,
                       manifest.accuracy_floor, manifest.accuracy_band)
