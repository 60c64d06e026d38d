"""Joint recovery of an approximate base and low-rank task vectors.

For targets ``theta_1..theta_n`` (one parameter matrix from each model) the
solver minimizes

    f(theta_0, delta_1..delta_n) = sum_i ||theta_0 + delta_i - theta_i||_F^2
                                   + 2 mu ||delta_i||_*

by cyclic coordinate descent starting from ``delta_i = 0``:

    theta_0 <- mean_i(theta_i - delta_i)
    delta_i <- svt(theta_i - theta_0, mu)        for each i

Both updates are exact block minimizers, so ``f`` never increases.  The
optional rank cap keeps only the ``ceil(rank_fraction * min(m, n))`` largest
thresholded singular values, which is the exact minimizer over the
rank-limited set, so descent is preserved there too.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .checkpoint import ParameterSet, TaskVectorSet, check_compatibility, matrix_shape

logger = logging.getLogger(__name__)

THREADS_ENV = "LOREMERGE_THREADS"


class SolverError(ArithmeticError):
    """Numerical failure inside the decomposition (non-finite values, SVD)."""


@dataclass(frozen=True)
class SolverConfig:
    mu: float = 0.01
    max_iters: int = 100
    rel_tol: float = 1e-8
    rank_fraction: float = 0.2
    apply_rank_cap: bool = True

    def __post_init__(self):
        if not (self.mu >= 0 and np.isfinite(self.mu)):
            raise ValueError(f"mu must be a finite non-negative number, got {self.mu}")
        if isinstance(self.max_iters, bool) or int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not (0 < self.rank_fraction <= 1):
            raise ValueError(f"rank_fraction must lie in (0, 1], got {self.rank_fraction}")
        if not (self.rel_tol >= 0):
            raise ValueError(f"rel_tol must be non-negative, got {self.rel_tol}")

    def max_rank(self, shape: tuple[int, int]) -> int | None:
        return linalg.rank_cap(shape, self.rank_fraction) if self.apply_rank_cap else None


@dataclass
class SolverTrace:
    objective_per_iteration: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    # largest Frobenius change of theta_0 or any delta_i during the last round
    final_change: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecompositionResult:
    base: np.ndarray
    task_vectors: list[np.ndarray]
    trace: SolverTrace


def _check_shapes(*groups: Sequence[np.ndarray]) -> tuple[int, ...]:
    shapes = {np.shape(m) for g in groups for m in g}
    if len(shapes) != 1:
        raise ValueError(f"all matrices must share one shape, got {sorted(shapes)}")
    return shapes.pop()


def _residual_term(base, delta, target) -> float:
    r = base + delta - target
    return float(np.sum(r * r))


def implemented_objective(base, task_vectors, targets, mu: float) -> float:
    """``sum_i ||base + delta_i - theta_i||_F^2 + 2 mu ||delta_i||_*``."""
    if len(task_vectors) != len(targets) or not targets:
        raise ValueError("need the same positive number of task vectors and targets")
    _check_shapes([base], task_vectors, targets)
    total = 0.0
    for d, t in zip(task_vectors, targets):
        total += _residual_term(base, d, t) + 2.0 * mu * linalg.nuclear_norm(d)
    return total


def update_base(targets, task_vectors) -> np.ndarray:
    """Exact minimizer in ``theta_0``: the mean of ``theta_i - delta_i``."""
    if len(task_vectors) != len(targets) or not targets:
        raise ValueError("need the same positive number of task vectors and targets")
    _check_shapes(task_vectors, targets)
    acc = np.asarray(targets[0], dtype=np.float64) - task_vectors[0]
    for t, d in zip(targets[1:], task_vectors[1:]):
        acc += t
        acc -= d
    acc /= len(targets)
    return acc


def _task_vector_step(target, base, config: SolverConfig, name=None):
    diff = np.asarray(target, dtype=np.float64) - base
    delta, kept = linalg.shrink(diff, config.mu, config.max_rank(diff.shape), name=name)
    return delta, float(np.sum(kept))


def update_task_vector(target, base, config: SolverConfig) -> np.ndarray:
    """``svt(theta_i - theta_0, mu)``, then the optional hard rank cap."""
    _check_shapes([target, base])
    return _task_vector_step(target, base, config)[0]


Callback = Callable[[str, int, np.ndarray, list], None]


def decompose(targets, config: SolverConfig | None = None, *, name: str | None = None,
              callback: Callback | None = None) -> DecompositionResult:
    """Coordinate descent on one parameter matrix.

    ``callback(stage, iteration, base, task_vectors)`` is invoked after every
    coordinate update (``stage`` is ``"base"`` or ``"task_vector:<i>"``);
    it must not modify its arguments.

    Convergence is declared when the relative objective decrease over one
    round drops below ``rel_tol``, or when a round leaves every variable
    bit-identical.  The first round is measured against the objective at
    ``(theta_0, 0)`` right after the initial base update.
    """
    config = config or SolverConfig()
    if not targets:
        raise ValueError("decompose needs at least one target matrix")
    targets = [linalg.as_matrix(t, name) for t in targets]
    _check_shapes(targets)
    n = len(targets)
    mu = config.mu

    deltas = [np.zeros_like(targets[0]) for _ in range(n)]
    nuclear = [0.0] * n
    base = None
    trace = SolverTrace()
    previous = None

    for it in range(1, config.max_iters + 1):
        new_base = update_base(targets, deltas)
        if base is None:
            previous = sum(_residual_term(new_base, d, t) for d, t in zip(deltas, targets))
        unchanged = base is not None and np.array_equal(new_base, base)
        change = 0.0 if base is None else float(np.linalg.norm(new_base - base))
        base = new_base
        if callback is not None:
            callback("base", it, base, deltas)

        if not unchanged:
            for i, t in enumerate(targets):
                try:
                    d, nuclear[i] = _task_vector_step(t, base, config, name)
                except linalg.SvdError as exc:
                    raise SolverError(f"{exc} (iteration {it}, model {i})") from exc
                change = max(change, float(np.linalg.norm(d - deltas[i])))
                deltas[i] = d
                if callback is not None:
                    callback(f"task_vector:{i}", it, base, deltas)

        f = sum(_residual_term(base, d, t) + 2.0 * mu * nu for d, t, nu in zip(deltas, targets, nuclear))
        if not np.isfinite(f):
            label = f"parameter {name!r}" if name else "matrix"
            raise SolverError(f"non-finite objective for {label} at iteration {it}")
        trace.objective_per_iteration.append(f)
        trace.iterations_run = it
        trace.final_change = change
        if unchanged or (previous - f) / max(previous, 1e-30) < config.rel_tol:
            trace.converged = True
            break
        previous = f

    return DecompositionResult(base=base, task_vectors=deltas, trace=trace)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def decompose_parameter_sets(sets: Sequence[ParameterSet], config: SolverConfig | None = None,
                             workers: int | None = None):
    """Run :func:`decompose` on every mergeable parameter of the models.

    Passthrough parameters get the element-wise mean as base and zero task
    vectors.  Returns ``(base, task_vector_sets, traces)`` where ``base`` holds
    float64 arrays and ``traces`` maps mergeable names to their SolverTrace.
    Results are assembled by name, so ``workers > 1`` does not change them.
    """
    config = config or SolverConfig()
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one parameter set")
    if len(sets) > 1:
        check_compatibility(sets).raise_if_incompatible()
    workers = workers or _default_workers()
    names = sets[0].names

    def solve(name):
        shape = sets[0][name].shape
        mshape = matrix_shape(shape)
        targets = [np.asarray(s[name], dtype=np.float64) for s in sets]
        if mshape is None:
            base = update_base(targets, [np.zeros(shape)] * len(targets))
            return base, [np.zeros(shape) for _ in sets], None
        try:
            res = decompose([t.reshape(mshape) for t in targets], config, name=name)
        except (SolverError, linalg.SvdError) as exc:
            raise SolverError(f"parameter {name!r}: {exc}") from exc
        logger.debug("decomposed %s in %d rounds", name, res.trace.iterations_run)
        return res.base.reshape(shape), [d.reshape(shape) for d in res.task_vectors], res.trace

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(names, pool.map(solve, names)))
    else:
        results = {name: solve(name) for name in names}

    base = ParameterSet({k: r[0] for k, r in results.items()})
    task_vector_sets = [TaskVectorSet({k: r[1][i] for k, r in results.items()}) for i in range(len(sets))]
    traces = {k: r[2] for k, r in results.items() if r[2] is not None}
    return base, task_vector_sets, traces
