"""Checkpoint I/O and parameter bookkeeping.

Checkpoints are safetensors files holding F32 or F64 tensors.  In memory a
checkpoint is a :class:`ParameterSet`: an immutable, name-sorted mapping from
parameter name to numpy array.
"""
from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

SUPPORTED_DTYPES = {"F32": np.dtype(np.float32), "F64": np.dtype(np.float64)}


class CheckpointError(ValueError):
    """Base class for invalid or unreadable checkpoints."""


class MalformedCheckpointError(CheckpointError):
    pass


class UnsupportedDtypeError(CheckpointError):
    pass


class NonFiniteError(CheckpointError):
    def __init__(self, name: str, index: int):
        self.name = name
        self.index = index
        super().__init__(f"tensor {name!r} has a non-finite element at flat index {index}")


class IncompatibleError(CheckpointError):
    """Raised when checkpoints to be combined do not share an architecture."""


def _frozen(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.flags.writeable = False
    return view


def _validate_tensor(name: str, a: np.ndarray) -> None:
    if a.dtype not in SUPPORTED_DTYPES.values():
        raise UnsupportedDtypeError(f"tensor {name!r} has unsupported dtype {a.dtype}; expected float32 or float64")
    if a.ndim == 0:
        raise CheckpointError(f"tensor {name!r} is a scalar; at least one dimension is required")
    if 0 in a.shape:
        raise CheckpointError(f"tensor {name!r} has a zero-sized dimension {list(a.shape)}")


def first_nonfinite(a: np.ndarray) -> int | None:
    bad = np.flatnonzero(~np.isfinite(a.ravel()))
    return int(bad[0]) if bad.size else None


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """One model checkpoint as named dense tensors.

    Tensors are stored read-only and iterate in lexicographic name order.
    ``source`` records where the set was loaded from and is not part of
    equality.
    """

    tensors: Mapping[str, np.ndarray]
    metadata: Mapping[str, str] = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.tensors):
            a = np.asarray(self.tensors[name])
            _validate_tensor(name, a)
            ordered[name] = _frozen(a)
        object.__setattr__(self, "tensors", ordered)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in dict(self.metadata).items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def dtypes(self) -> dict[str, np.dtype]:
        return {k: v.dtype for k, v in self.tensors.items()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        if self.names != other.names or self.metadata != other.metadata:
            return False
        return all(bit_equal(self[k], other[k]) for k in self.tensors)

    __hash__ = None  # type: ignore[assignment]


def bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """True when shapes, dtypes and raw bytes all agree."""
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class TaskVectorSet:
    """Per-parameter task vectors in float64, stored in the tensor's own shape.

    Passthrough parameters carry zero arrays.
    """

    vectors: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "vectors", {k: self.vectors[k] for k in sorted(self.vectors)})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.vectors)

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def names(self) -> list[str]:
        return list(self.vectors)

    def to_parameter_set(self, dtypes: Mapping[str, np.dtype] | None = None) -> ParameterSet:
        dtypes = dtypes or {}
        return ParameterSet({k: v.astype(dtypes.get(k, np.float64)) for k, v in self.vectors.items()})


def load_checkpoint(path) -> ParameterSet:
    """Read and validate a safetensors checkpoint.

    Raises FileNotFoundError, MalformedCheckpointError,
    UnsupportedDtypeError or NonFiniteError.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = {}
    try:
        with safe_open(str(path), framework="np") as f:
            metadata = f.metadata() or {}
            for name in f.keys():
                info = f.get_slice(name)
                dtype = info.get_dtype()
                if dtype not in SUPPORTED_DTYPES:
                    raise UnsupportedDtypeError(
                        f"tensor {name!r} in {path} has unsupported dtype {dtype}; supported: F32, F64"
                    )
                shape = list(info.get_shape())
                if not shape or 0 in shape:
                    raise MalformedCheckpointError(f"tensor {name!r} in {path} has invalid shape {shape}")
                a = f.get_tensor(name)
                if a.dtype.byteorder == ">":
                    a = a.astype(a.dtype.newbyteorder("<"))
                bad = first_nonfinite(a)
                if bad is not None:
                    raise NonFiniteError(name, bad)
                tensors[name] = a
    except SafetensorError as exc:
        raise MalformedCheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    except (OSError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise MalformedCheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return ParameterSet(tensors, metadata, source=str(path))


def save_checkpoint(params: ParameterSet, path) -> None:
    """Write ``params`` to ``path`` atomically (temp file + rename)."""
    for name, a in params.tensors.items():
        bad = first_nonfinite(a)
        if bad is not None:
            raise NonFiniteError(name, bad)
    path = Path(path)
    data = {k: np.ascontiguousarray(v) for k, v in params.tensors.items()}
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    os.close(fd)
    try:
        save_file(data, tmp, metadata=dict(params.metadata) or None)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class Mismatch:
    name: str
    expected_shape: tuple[int, ...] | None
    found_shape: tuple[int, ...] | None
    missing_in: int | None = None
    model_index: int | None = None
    expected_dtype: str | None = None
    found_dtype: str | None = None

    def describe(self) -> str:
        if self.missing_in is not None:
            return f"{self.name}: missing in model {self.missing_in}"
        return (
            f"{self.name}: model {self.model_index} has shape {list(self.found_shape or ())} "
            f"{self.found_dtype}, expected {list(self.expected_shape or ())} {self.expected_dtype}"
        )


@dataclass(frozen=True)
class CompatibilityReport:
    compatible: bool
    mismatches: list[Mismatch]

    def raise_if_incompatible(self) -> None:
        if not self.compatible:
            detail = "; ".join(m.describe() for m in self.mismatches[:5])
            more = f" (+{len(self.mismatches) - 5} more)" if len(self.mismatches) > 5 else ""
            raise IncompatibleError(f"checkpoints are not compatible: {detail}{more}")


def check_compatibility(sets: Sequence[ParameterSet]) -> CompatibilityReport:
    """Compare every set against the first one by name, shape and dtype."""
    if len(sets) < 2:
        raise ValueError("compatibility check needs at least two parameter sets")
    ref = sets[0]
    mismatches = []
    for j, other in enumerate(sets[1:], start=1):
        for name in ref:
            if name not in other:
                mismatches.append(Mismatch(name, ref[name].shape, None, missing_in=j))
                continue
            a, b = ref[name], other[name]
            if a.shape != b.shape or a.dtype != b.dtype:
                mismatches.append(
                    Mismatch(name, a.shape, b.shape, model_index=j,
                             expected_dtype=str(a.dtype), found_dtype=str(b.dtype))
                )
        for name in other:
            if name not in ref:
                mismatches.append(Mismatch(name, None, other[name].shape, missing_in=0, model_index=j))
    return CompatibilityReport(compatible=not mismatches, mismatches=mismatches)


def matrix_shape(shape: Sequence[int]) -> tuple[int, int] | None:
    """Matrix view used for SVD: leading dims collapse into rows.

    Returns None for tensors that are not mergeable as matrices.
    """
    if len(shape) < 2:
        return None
    rows, cols = math.prod(shape[:-1]), shape[-1]
    if min(rows, cols) < 2:
        return None
    return rows, cols


def partition_parameters(params: ParameterSet) -> tuple[list[str], list[str]]:
    mergeable, passthrough = [], []
    for name, a in params.tensors.items():
        (mergeable if matrix_shape(a.shape) else passthrough).append(name)
    return mergeable, passthrough


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
