"""Model files: a JSON document plus a raw little-endian f32 weight blob."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from archsim.nn.model import Model, ModelSpec

MODEL_FORMAT = "archsim-model/1"


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: Model, path) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the JSON path."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    manifest = {}
    chunks = []
    offset = 0
    for name in sorted(model.weights):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        manifest[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    doc = {
        "format": MODEL_FORMAT,
        "spec": model.spec.to_dict(),
        "weights": {"blob": base.name + ".bin", "dtype": "<f4", "manifest": manifest},
        "training-meta": model.training_meta,
    }
    _atomic_write(base.with_suffix(".bin"), b"".join(chunks))
    _atomic_write(base.with_suffix(".json"), json.dumps(doc, indent=1, sort_keys=True).encode())
    return base.with_suffix(".json")


def load_model(path) -> Model:
    p = Path(path)
    if p.suffix != ".json":
        p = p.with_suffix(".json")
    doc = json.loads(p.read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{p}: expected format {MODEL_FORMAT}, got {doc.get('format')!r}")
    blob = np.fromfile(p.with_name(doc["weights"]["blob"]), dtype="<f4")
    weights = {}
    for name, entry in doc["weights"]["manifest"].items():
        start = entry["offset"] // 4
        size = int(np.prod(entry["shape"]))
        weights[name] = blob[start:start + size].reshape(entry["shape"])
    return Model(ModelSpec.from_dict(doc["spec"]), weights, doc.get("training-meta", {}))
