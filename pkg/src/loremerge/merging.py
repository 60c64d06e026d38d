"""Merge strategies: LoRE combination and the Average / DARE / TIES baselines.

Every strategy works per parameter in float64 and casts the merged tensor
back to the dtype of the first input model.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import ParameterSet, TaskVectorSet, check_compatibility
from .recipe import MergeRecipe
from .solver import SolverTrace, decompose_parameter_sets


def _check_task_vectors(sets: Sequence[TaskVectorSet]) -> list[str]:
    if not sets:
        raise ValueError("need at least one task vector set")
    names = sets[0].names
    for j, s in enumerate(sets[1:], start=1):
        if s.names != names:
            raise ValueError(f"task vector set {j} has different parameter names")
        for k in names:
            if s[k].shape != sets[0][k].shape:
                raise ValueError(f"task vector {k!r} of set {j} has shape {s[k].shape}, expected {sets[0][k].shape}")
    return names


def _require_compatible(sets: Sequence[ParameterSet]) -> None:
    if len(sets) > 1:
        check_compatibility(sets).raise_if_incompatible()


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.array(arrays[0], dtype=np.float64)
    for a in arrays[1:]:
        acc += a
    acc /= len(arrays)
    return acc


def combine_direct_sum(task_vector_sets: Sequence[TaskVectorSet]) -> TaskVectorSet:
    names = _check_task_vectors(task_vector_sets)
    out = {}
    for k in names:
        acc = np.array(task_vector_sets[0][k], dtype=np.float64)
        for s in task_vector_sets[1:]:
            acc += s[k]
        out[k] = acc
    return TaskVectorSet(out)


def sign_elected_mean(stacked: np.ndarray) -> np.ndarray:
    """TIES disjoint mean over axis 0.

    The elected sign is ``sign(sum_i x_i)``; each coordinate averages the
    entries that carry that sign.  Coordinates whose sum is exactly zero
    elect no sign and come out as zero.
    """
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (elected != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def combine_ties_select(task_vector_sets: Sequence[TaskVectorSet]) -> TaskVectorSet:
    names = _check_task_vectors(task_vector_sets)
    return TaskVectorSet({
        k: sign_elected_mean(np.stack([np.asarray(s[k], dtype=np.float64) for s in task_vector_sets]))
        for k in names
    })


def assemble(base: ParameterSet, tau: TaskVectorSet, lam: float,
             dtypes: Mapping[str, np.dtype] | None = None) -> ParameterSet:
    """``base + lam * tau`` per parameter, cast to ``dtypes`` when given."""
    if base.names != tau.names:
        raise ValueError("base and task vectors cover different parameter names")
    dtypes = dtypes or {}
    out = {}
    for k in base:
        b = base[k]
        if tau[k].shape != b.shape:
            raise ValueError(f"task vector {k!r} has shape {tau[k].shape}, base has {b.shape}")
        merged = b.astype(np.float64) + lam * tau[k] if lam != 0 else b.astype(np.float64)
        out[k] = merged.astype(dtypes.get(k, b.dtype))
    return ParameterSet(out)


def average_merge(sets: Sequence[ParameterSet]) -> ParameterSet:
    """Element-wise mean of all models."""
    sets = list(sets)
    if len(sets) < 2:
        raise ValueError("average merging needs at least two models")
    _require_compatible(sets)
    return ParameterSet({k: _mean([s[k] for s in sets]).astype(sets[0][k].dtype) for k in sets[0]})


def _dare_rng(seed: int, model_index: int, name: str) -> np.random.Generator:
    name_key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, model_index, name_key]))


def dare_mask(shape, p: float, seed: int, model_index: int, name: str) -> np.ndarray:
    """Keep-mask for DARE; each entry survives with probability ``1 - p``."""
    return _dare_rng(seed, model_index, name).random(shape) >= p


def dare_merge(base: ParameterSet, sets: Sequence[ParameterSet], p: float = 0.5,
               lam: float = 1.0, seed: int = 0) -> ParameterSet:
    """Drop-and-rescale merging.

    Each task vector ``theta_i - base`` has its entries zeroed with
    probability ``p``; survivors are scaled by ``1 / (1 - p)``.  The rescaled
    task vectors are averaged across models and added to ``base`` with
    weight ``lam``.  The random stream is keyed by (seed, model index,
    parameter name).
    """
    if base is None:
        raise ValueError("DARE requires a base model")
    if not 0 <= p < 1:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one model to merge")
    _require_compatible([base, *sets])
    out = {}
    for k in base:
        b = base[k].astype(np.float64)
        dropped = []
        for i, s in enumerate(sets):
            delta = s[k].astype(np.float64) - b
            keep = dare_mask(delta.shape, p, seed, i, k)
            dropped.append(np.where(keep, delta / (1.0 - p), 0.0))
        out[k] = (b + lam * _mean(dropped)).astype(base[k].dtype)
    return ParameterSet(out)


def top_fraction_count(size: int, fraction: float) -> int:
    return max(1, min(size, math.ceil(fraction * size - 1e-9)))


def trim_top_magnitude(delta: np.ndarray, fraction: float) -> np.ndarray:
    """Zero all but the ``ceil(fraction * size)`` largest-magnitude entries.

    Equal magnitudes are ranked by flat index, lower first.
    """
    flat = delta.ravel()
    k = top_fraction_count(flat.size, fraction)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:k]] = flat[order[:k]]
    return out.reshape(delta.shape)


def ties_merge(base: ParameterSet, sets: Sequence[ParameterSet], top_fraction: float = 0.2,
               lam: float = 1.0) -> ParameterSet:
    """TIES-Merging: per-tensor magnitude trim, sign election, disjoint mean."""
    if base is None:
        raise ValueError("TIES requires a base model")
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top fraction must lie in (0, 1], got {top_fraction}")
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one model to merge")
    _require_compatible([base, *sets])
    out = {}
    for k in base:
        b = base[k].astype(np.float64)
        trimmed = np.stack([trim_top_magnitude(s[k].astype(np.float64) - b, top_fraction) for s in sets])
        out[k] = (b + lam * sign_elected_mean(trimmed)).astype(base[k].dtype)
    return ParameterSet(out)


@dataclass
class LoreMergeResult:
    merged: ParameterSet
    traces: dict[str, SolverTrace]
    base: ParameterSet
    task_vectors: list[TaskVectorSet]
    tau: TaskVectorSet


def lore_merge_detailed(sets: Sequence[ParameterSet], recipe: MergeRecipe,
                        workers: int | None = None) -> LoreMergeResult:
    if not recipe.is_lore:
        raise ValueError(f"lore_merge expects a lore_* recipe, got {recipe.method!r}")
    sets = list(sets)
    base, task_vectors, traces = decompose_parameter_sets(sets, recipe.solver, workers=workers)
    if recipe.method == "lore_direct":
        tau = combine_direct_sum(task_vectors)
    else:
        tau = combine_ties_select(task_vectors)
    merged = assemble(base, tau, recipe.lam, dtypes=sets[0].dtypes())
    return LoreMergeResult(merged, traces, base, task_vectors, tau)


def lore_merge(sets: Sequence[ParameterSet], recipe: MergeRecipe, workers: int | None = None):
    """Decompose, combine task vectors, and return ``(merged, traces)``."""
    res = lore_merge_detailed(sets, recipe, workers)
    return res.merged, res.traces


def run_recipe(recipe: MergeRecipe, sets: Sequence[ParameterSet], base: ParameterSet | None = None,
               workers: int | None = None):
    """Dispatch on ``recipe.method``; returns ``(merged, traces)``.

    ``traces`` is empty for the baselines.
    """
    if recipe.is_lore:
        return lore_merge(sets, recipe, workers)
    if recipe.method == "average":
        return average_merge(sets), {}
    if base is None:
        raise ValueError(f"method {recipe.method!r} requires a base model")
    if recipe.method == "dare":
        return dare_merge(base, sets, recipe.dare_drop_prob, recipe.lam, recipe.seed), {}
    return ties_merge(base, sets, recipe.ties_top_fraction, recipe.lam), {}
