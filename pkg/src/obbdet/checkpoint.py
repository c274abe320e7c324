"""JSON checkpoints: named parameter arrays plus a free-form metadata block.

Serialization is byte-stable: keys are sorted and floats go through ``repr``,
so saving the same state twice yields identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor

FORMAT_NAME = "obbdet-checkpoint"
FORMAT_VERSION = 1


def _encode_floats(values: np.ndarray) -> list[float]:
    return [float(v) for v in values.ravel()]


def stable_json(obj) -> str:
    """Deterministic JSON text for a tree of dicts/lists/str/int/float."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "data": _encode_floats(p.data)}
            for name, p in params.items()
        },
    }
    Path(path).write_text(stable_json(doc) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"checkpoint {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r} in {path}")
    params: dict[str, Tensor] = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=True)
    return params, doc.get("meta", {})
