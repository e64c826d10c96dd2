"""Named model tensors with norm/dense tags and a bit-exact checkpoint format.

Every tensor is tagged either ``dense`` or ``norm``; the tag partition is
what the FedBN-family aggregation rules operate on. Normalization running
statistics (names ending in ``_rmean``/``_rvar``) are norm-tagged state that
the optimizer never updates directly.

Checkpoints are a single JSON document with a versioned header; float64
values are serialized via shortest round-trip decimals, so save -> load is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "fedehr-params"
CHECKPOINT_VERSION = 1

TAGS = ("dense", "norm")


def is_running_stat(name: str) -> bool:
    return name.endswith("_rmean") or name.endswith("_rvar")


class ParamSet:
    """Ordered mapping name -> float64 ndarray, each tagged dense or norm."""

    def __init__(self, tensors: dict[str, np.ndarray], tags: dict[str, str]):
        if set(tensors) != set(tags):
            raise ValueError("tag partition must cover exactly the tensor names")
        bad = {n: t for n, t in tags.items() if t not in TAGS}
        if bad:
            raise ValueError(f"unknown tags: {bad}")
        self.tensors = {name: np.asarray(t, dtype=np.float64) for name, t in tensors.items()}
        self.tags = dict(tags)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not is_running_stat(n)]

    def copy(self) -> "ParamSet":
        return ParamSet({n: t.copy() for n, t in self.tensors.items()}, self.tags)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({n: np.zeros_like(t) for n, t in self.tensors.items()}, self.tags)

    def flat(self) -> np.ndarray:
        """Concatenation of all tensors, row-major, in name order."""
        return np.concatenate([self.tensors[n].ravel() for n in self.tensors])

    def from_flat(self, values: np.ndarray) -> "ParamSet":
        out = {}
        cursor = 0
        for name, t in self.tensors.items():
            out[name] = values[cursor:cursor + t.size].reshape(t.shape).copy()
            cursor += t.size
        if cursor != values.size:
            raise ValueError(f"flat vector has {values.size} values, expected {cursor}")
        return ParamSet(out, self.tags)

    def same_structure(self, other: "ParamSet") -> bool:
        return (self.tags == other.tags and
                list(self.tensors) == list(other.tensors) and
                all(self.tensors[n].shape == other.tensors[n].shape for n in self.tensors))

    def allfinite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def checksum(self) -> str:
        import hashlib
        h = hashlib.blake2s(digest_size=16)
        for name in self.tensors:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()


def save_params(params: ParamSet, path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": {
            name: {
                "shape": list(t.shape),
                "tag": params.tags[name],
                "data": t.ravel().tolist(),
            }
            for name, t in params.tensors.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path: str | Path) -> ParamSet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {}
    tags = {}
    for name, entry in doc["tensors"].items():
        tensors[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tags[name] = entry["tag"]
    return ParamSet(tensors, tags)
