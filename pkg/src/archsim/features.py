"""The 13-component architecture model card and pairwise Hamming differences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMA_VERSION = 1

COMPONENTS = (
    "base-architecture",
    "stem-layer",
    "input-resolution",
    "normalization",
    "hierarchical",
    "activation",
    "pooling-at-stem",
    "2d-self-attention",
    "channel-wise-attention",
    "depthwise-conv",
    "group-conv",
    "final-pooling",
    "cw-attention-location",
)

# Known values per component.  Extend with register_value(); unknown values
# are rejected so typos do not silently create new categories.
VOCABULARY: dict[str, set[str]] = {
    "base-architecture": {"CNN", "Transformer", "MLP-Mixer", "Hybrid", "NAS-Net", "MLP"},
    "stem-layer": {"7s2", "3s2", "3s1", "4s4", "16s16", "7s4", "3s2/3/3", "none", "flatten"},
    "input-resolution": {"224", "256", "240", "299", "32", "16", "2"},
    "normalization": {"BN", "GN", "LN", "LN+GN", "LN+BN", "Norm-free", "EvoNorm"},
    "hierarchical": {"Yes", "No"},
    "activation": {"ReLU", "HardSwish", "SiLU", "GeLU", "ReLU+GeLU", "ReLU+SiLU", "Leaky ReLU", "-"},
    "pooling-at-stem": {"Yes", "No"},
    "2d-self-attention": {"Yes", "No"},
    "channel-wise-attention": {"Yes", "No", "Yes (SE)"},
    "depthwise-conv": {"Yes", "No"},
    "group-conv": {"Yes", "No"},
    "final-pooling": {"GAP", "CLS", "Flatten"},
    "cw-attention-location": {"End", "Middle", "~"},
}


def register_value(component: str, value: str) -> None:
    if component not in VOCABULARY:
        raise KeyError(f"unknown component {component!r}")
    VOCABULARY[component].add(value)


def _attr(component: str) -> str:
    name = component.replace("-", "_")
    return "_" + name if name[0].isdigit() else name


@dataclass(frozen=True)
class ArchFeatureRecord:
    base_architecture: str
    stem_layer: str
    input_resolution: str
    normalization: str
    hierarchical: str
    activation: str
    pooling_at_stem: str
    _2d_self_attention: str
    channel_wise_attention: str
    depthwise_conv: str
    group_conv: str
    final_pooling: str
    cw_attention_location: str
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for comp in COMPONENTS:
            value = getattr(self, _attr(comp))
            if value not in VOCABULARY[comp]:
                raise ValueError(f"{comp}: {value!r} not in vocabulary {sorted(VOCABULARY[comp])}")

    def values(self) -> tuple[str, ...]:
        return tuple(getattr(self, _attr(c)) for c in COMPONENTS)

    def tokens(self) -> list[str]:
        return [f"{c}={v}" for c, v in zip(COMPONENTS, self.values())]

    def to_dict(self) -> dict[str, str]:
        out = dict(zip(COMPONENTS, self.values()))
        out["schema-version"] = self.schema_version
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ArchFeatureRecord":
        missing = [c for c in COMPONENTS if c not in d]
        if missing:
            raise ValueError(f"model card missing components {missing}")
        kwargs = {_attr(c): str(d[c]) for c in COMPONENTS}
        return cls(**kwargs, schema_version=int(d.get("schema-version", SCHEMA_VERSION)))



def hamming_diff(a: ArchFeatureRecord, b: ArchFeatureRecord) -> np.ndarray:
    """13 binary indicators, one per component that differs."""
    if a.schema_version != b.schema_version:
        raise ValueError(f"schema mismatch: {a.schema_version} vs {b.schema_version}")
    return np.array([x != y for x, y in zip(a.values(), b.values())], dtype=np.int8)

