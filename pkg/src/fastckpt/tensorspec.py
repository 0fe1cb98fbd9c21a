"""Seeded tensor fills for synthetic checkpoints.

A spec file is JSON::

    {"seed": 0,
     "tensors": [{"name": "w", "dtype": "f32", "shape": [4, 4], "fill": "random"}]}

``fill`` is one of ``random`` (default), ``zeros``, ``ones`` or ``arange``.
The same spec and seed always produce the same bytes, so a loaded
checkpoint can be verified without keeping the original around.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from fastckpt.ckpt_format import DType, FormatError, TensorRecord

_NP_DTYPES = {
    DType.f16: np.float16,
    DType.f32: np.float32,
    DType.f64: np.float64,
    DType.i8: np.int8,
    DType.i32: np.int32,
    DType.i64: np.int64,
}
FILLS = ("random", "zeros", "ones", "arange")


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    fill: str = "random"

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * self.dtype.itemsize


@dataclass(frozen=True)
class CheckpointSpec:
    tensors: tuple[TensorSpec, ...]
    seed: int = 0

    @property
    def payload_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors)


def load_spec(path: str | Path, seed: int | None = None) -> CheckpointSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        tensors = tuple(
            TensorSpec(t["name"], DType.parse(t["dtype"]), tuple(int(d) for d in t["shape"]), t.get("fill", "random"))
            for t in doc["tensors"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad tensor spec {path}: {exc}") from None
    for t in tensors:
        if t.fill not in FILLS:
            raise FormatError(f"{t.name}: unknown fill {t.fill!r}")
    return CheckpointSpec(tensors, int(doc.get("seed", 0)) if seed is None else seed)


def synthetic_spec(total_bytes: int, seed: int = 0, tensor_count: int = 8) -> CheckpointSpec:
    """Float32 tensors whose payloads add up to ``total_bytes`` rounded down to 4."""
    elems = total_bytes // 4
    per, extra = divmod(elems, tensor_count)
    tensors = tuple(
        TensorSpec(f"layer{i}.weight", DType.f32, (per + (1 if i < extra else 0),)) for i in range(tensor_count)
    )
    return CheckpointSpec(tensors, seed)


def materialize(spec: CheckpointSpec, index: int) -> TensorRecord:
    t = spec.tensors[index]
    n = math.prod(t.shape)
    if t.fill == "random":
        payload = np.random.default_rng([spec.seed, index]).bytes(t.nbytes)
    elif t.fill == "zeros":
        payload = bytes(t.nbytes)
    elif t.fill == "ones":
        payload = np.ones(n, dtype=_NP_DTYPES[t.dtype]).tobytes()
    else:
        payload = np.arange(n, dtype=_NP_DTYPES[t.dtype]).tobytes()
    return TensorRecord(t.name, t.dtype, t.shape, payload)


def iter_records(spec: CheckpointSpec) -> Iterator[TensorRecord]:
    for i in range(len(spec.tensors)):
        yield materialize(spec, i)
