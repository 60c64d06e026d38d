"""Synthetic model families with planted low-rank task vectors.

Each family has a known base and known per-model perturbations, so every
merge method can be scored against ground truth.  DARE and TIES need a base
model by construction; they are handed the true base, and their results are
flagged ``oracle_base`` so comparisons with LoRE (which sees no base) stay
honest.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import ParameterSet, TaskVectorSet
from .merging import lore_merge_detailed, run_recipe
from .recipe import BASE_METHODS, MergeRecipe, RecipeError, read_toml

TRUTH_BASE_MARKER = "<truth-base>"
BENCH_KEYS = ("matrix_shapes", "n_models", "planted_rank", "perturbation_scale",
              "noise_scale", "seed", "antisymmetric", "dtype")


@dataclass(frozen=True)
class BenchSpec:
    matrix_shapes: tuple[tuple[int, int], ...] = ((32, 32),)
    n_models: int = 2
    planted_rank: int = 1
    perturbation_scale: float = 1.0
    noise_scale: float = 0.0
    seed: int = 0
    # pairs (2k, 2k+1) get exactly opposite deviations from the base
    antisymmetric: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        shapes = tuple((int(r), int(c)) for r, c in self.matrix_shapes)
        object.__setattr__(self, "matrix_shapes", shapes)
        if not shapes or any(r < 1 or c < 1 for r, c in shapes):
            raise ValueError(f"matrix_shapes must be non-empty positive pairs, got {shapes}")
        if self.n_models < 2:
            raise ValueError(f"n_models must be at least 2, got {self.n_models}")
        if self.planted_rank < 1:
            raise ValueError(f"planted_rank must be at least 1, got {self.planted_rank}")
        too_big = [s for s in shapes if self.planted_rank > min(s)]
        if too_big:
            raise ValueError(f"planted_rank {self.planted_rank} exceeds the smaller side of {too_big}")
        if self.perturbation_scale < 0 or self.noise_scale < 0:
            raise ValueError("perturbation_scale and noise_scale must be non-negative")
        if self.antisymmetric and self.n_models % 2:
            raise ValueError("antisymmetric families need an even number of models")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_mapping(cls, data: dict) -> "BenchSpec":
        unknown = sorted(set(data) - set(BENCH_KEYS))
        if unknown:
            raise RecipeError(f"unknown bench spec keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise RecipeError(f"invalid bench spec: {exc}") from exc

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["matrix_shapes"] = [list(s) for s in self.matrix_shapes]
        return d

    @property
    def names(self) -> list[str]:
        width = len(str(len(self.matrix_shapes) - 1))
        return [f"layers.{j:0{width}d}.weight" for j in range(len(self.matrix_shapes))]


@dataclass
class Family:
    truth_base: ParameterSet
    models: list[ParameterSet]
    truth_task_vectors: list[TaskVectorSet]

    def __iter__(self):
        return iter((self.truth_base, self.models, self.truth_task_vectors))


def generate_family(spec: BenchSpec) -> Family:
    """Draw a family ``theta_i = B + s * P_i / ||P_i||_F + noise * G_i``.

    ``B`` has unit Frobenius norm per matrix, ``P_i = U_i V_i^T`` has
    ``planted_rank`` Gaussian factors and ``G_i`` is Gaussian.  The truth
    task vectors are the planted terms ``s * P_i / ||P_i||_F``.
    """
    rng = np.random.default_rng(spec.seed)
    dtype = np.dtype(spec.dtype)
    base, models, planted = {}, [{} for _ in range(spec.n_models)], [{} for _ in range(spec.n_models)]
    for name, (rows, cols) in zip(spec.names, spec.matrix_shapes):
        b = rng.standard_normal((rows, cols))
        b /= np.linalg.norm(b)
        base[name] = b
        noise = [None] * spec.n_models
        for i in range(spec.n_models):
            if spec.antisymmetric and i % 2:
                p = -planted[i - 1][name]
                noise[i] = -noise[i - 1]
            else:
                p = rng.standard_normal((rows, spec.planted_rank)) @ rng.standard_normal((spec.planted_rank, cols))
                p *= spec.perturbation_scale / np.linalg.norm(p)
                noise[i] = spec.noise_scale * rng.standard_normal((rows, cols))
            planted[i][name] = p
            models[i][name] = b + p + noise[i]
    truth_base = ParameterSet({k: v.astype(dtype) for k, v in base.items()}, {"role": "truth_base"})
    model_sets = [ParameterSet({k: v.astype(dtype) for k, v in m.items()}) for m in models]
    return Family(truth_base, model_sets, [TaskVectorSet(p) for p in planted])


@dataclass
class MethodResult:
    label: str
    method: str
    oracle_base: bool
    base_recovery_error: float | None = None
    task_vector_errors: list[float] = field(default_factory=list)
    residuals: dict[str, list[float]] = field(default_factory=dict)
    max_residual: float | None = None
    merged_distance: float | None = None
    duration_s: float | None = None
    solver_iterations: dict[str, int] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BenchReport:
    spec: BenchSpec
    results: list[MethodResult]

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_mapping(), "results": [asdict(r) for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def summary_table(self) -> str:
        head = f"{'recipe':<24} {'base err':>10} {'tv err':>10} {'residual':>10} {'merged':>10} {'time s':>8}"
        lines = [head, "-" * len(head)]
        for r in self.results:
            if not r.ok:
                lines.append(f"{r.label:<24} FAILED: {r.error}")
                continue
            tv = max(r.task_vector_errors) if r.task_vector_errors else 0.0
            tag = " *" if r.oracle_base else ""
            lines.append(f"{r.label + tag:<24} {r.base_recovery_error:>10.3e} {tv:>10.3e} "
                         f"{r.max_residual:>10.3e} {r.merged_distance:>10.3e} {r.duration_s:>8.3f}")
        if any(r.oracle_base for r in self.results):
            lines.append("* given the true base model")
        return "\n".join(lines)


def _total_distance(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum((a[k] - b[k]) ** 2)) for k in a))


def _as64(ps) -> dict[str, np.ndarray]:
    return {k: np.asarray(ps[k], dtype=np.float64) for k in ps}


def _score(label: str, recipe: MergeRecipe, family: Family) -> MethodResult:
    oracle = recipe.method in BASE_METHODS
    result = MethodResult(label=label, method=recipe.method, oracle_base=oracle)
    models = [_as64(m) for m in family.models]
    start = time.perf_counter()
    if recipe.is_lore:
        res = lore_merge_detailed(family.models, recipe)
        merged = res.merged
        base_est = _as64(res.base)
        task_vectors = [_as64(tv) for tv in res.task_vectors]
        result.solver_iterations = {k: t.iterations_run for k, t in res.traces.items()}
    else:
        merged, _ = run_recipe(recipe, family.models, base=family.truth_base)
        # implied decomposition: the base the method used (or its output) plus differences
        base_est = _as64(family.truth_base if oracle else merged)
        task_vectors = [{k: m[k] - base_est[k] for k in m} for m in models]
    result.duration_s = time.perf_counter() - start

    truth = _as64(family.truth_base)
    result.base_recovery_error = _total_distance(base_est, truth)
    result.task_vector_errors = [
        _total_distance(tv, _as64(p)) for tv, p in zip(task_vectors, family.truth_task_vectors)
    ]
    result.residuals = {
        k: [float(np.linalg.norm(base_est[k] + tv[k] - m[k])) for tv, m in zip(task_vectors, models)]
        for k in truth
    }
    result.max_residual = max(max(v) for v in result.residuals.values())
    result.merged_distance = _total_distance(_as64(merged), truth)
    return result


def run_bench(spec: BenchSpec, recipes: Sequence[MergeRecipe | tuple[str, MergeRecipe]],
              concurrent: bool = False) -> BenchReport:
    """Run every recipe on the family generated from ``spec``.

    ``recipes`` items are recipes or ``(label, recipe)`` pairs.  DARE and
    TIES recipes always run against the true base; pass
    ``base_path=TRUTH_BASE_MARKER`` to construct them.  A failing
    recipe is recorded with its error and does not stop the others.
    """
    family = generate_family(spec)
    labelled = []
    for i, item in enumerate(recipes):
        label, recipe = item if isinstance(item, tuple) else (f"{i}:{item.method}", item)
        labelled.append((label, recipe))

    def run(item):
        label, recipe = item
        try:
            return _score(label, recipe, family)
        except Exception as exc:  # per-recipe isolation
            return MethodResult(label=label, method=recipe.method,
                                oracle_base=recipe.method in BASE_METHODS,
                                error=f"{type(exc).__name__}: {exc}")

    if concurrent:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(run, labelled))
    else:
        results = [run(item) for item in labelled]
    return BenchReport(spec, results)


def load_bench_spec(path) -> BenchSpec:
    return BenchSpec.from_mapping(read_toml(path))


def load_bench_recipes(path) -> list[tuple[str, MergeRecipe]]:
    """Read ``[[recipe]]`` tables; an optional ``name`` key labels each one."""
    data = read_toml(path)
    tables = data.get("recipe")
    if not isinstance(tables, list) or not tables:
        raise RecipeError(f"{path}: expected one or more [[recipe]] tables")
    out = []
    for i, table in enumerate(tables):
        table = dict(table)
        label = str(table.pop("name", f"{i}:{table.get('method', 'lore_direct')}"))
        if table.get("method") in BASE_METHODS:
            table.setdefault("base_path", TRUTH_BASE_MARKER)
        out.append((label, MergeRecipe.from_mapping(table)))
    return out
