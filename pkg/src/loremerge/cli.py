"""Command-line entry point: ``loremerge {merge,decompose,analyze,bench}``.

Exit codes: 0 success, 1 user or validation error, 2 numerical/internal
failure.  Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import load_bench_recipes, load_bench_spec, run_bench
from .checkpoint import (
    CheckpointError,
    ParameterSet,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)
from .linalg import SvdError
from .merging import run_recipe
from .recipe import BASE_METHODS, LORE_METHODS, MergeRecipe, RecipeError, read_toml
from .solver import SolverConfig, SolverError, decompose_parameter_sets
from .spectrum import DEFAULT_TOP_COUNT, analyze_task_vectors, emit_report, sidecar_path

logger = logging.getLogger("loremerge")

# flag dest -> recipe key
SOLVER_FLAGS = {"mu": "mu", "max_iters": "max_iters", "rel_tol": "rel_tol",
                "rank_fraction": "rank_fraction", "apply_rank_cap": "apply_rank_cap"}
RECIPE_FLAGS = {"method": "method", "lam": "lambda", "dare_drop_prob": "dare_drop_prob",
                "ties_top_fraction": "ties_top_fraction", "seed": "seed", "base": "base_path",
                "output": "output_path", **SOLVER_FLAGS}


class UsageError(ValueError):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        payload = {"time": round(record.created, 3), "level": record.levelname.lower(),
                   "logger": record.name, "message": record.getMessage()}
        return json.dumps(payload)


def _setup_logging(verbosity: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if verbosity > 0:
        handler.setFormatter(JsonLineFormatter())
        level = logging.INFO if verbosity == 1 else logging.DEBUG
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        level = logging.WARNING
    root = logging.getLogger("loremerge")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--mu", type=float, help="nuclear-norm penalty weight (default 0.01)")
    g.add_argument("--max-iters", type=int, help="coordinate-descent round limit (default 100)")
    g.add_argument("--rel-tol", type=float, help="relative objective decrease to stop at (default 1e-8)")
    g.add_argument("--rank-fraction", type=float, help="hard rank cap as a fraction of min(m, n) (default 0.2)")
    cap = g.add_mutually_exclusive_group()
    cap.add_argument("--rank-cap", dest="apply_rank_cap", action="store_true", default=None)
    cap.add_argument("--no-rank-cap", dest="apply_rank_cap", action="store_false")
    p.add_argument("--threads", type=int, help="parallel parameter solves (env LOREMERGE_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loremerge", description="Low-rank estimation model merging toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge checkpoints into one")
    m.add_argument("models", nargs="*", help="input checkpoints (override model_paths in the recipe)")
    m.add_argument("--recipe", help="TOML merge recipe")
    m.add_argument("--method", choices=["lore_direct", "lore_ties", "average", "dare", "ties"])
    m.add_argument("--lambda", dest="lam", type=float, help="task-vector scaling (default 1.0)")
    m.add_argument("--dare-drop-prob", type=float, help="DARE drop probability (default 0.5)")
    m.add_argument("--ties-top-fraction", type=float, help="TIES kept fraction (default 0.2)")
    m.add_argument("--seed", type=int)
    m.add_argument("--base", help="base checkpoint (dare and ties only)")
    m.add_argument("-o", "--output", help="merged checkpoint path")
    m.add_argument("--manifest", help="run manifest path (default: <output stem>.manifest.json)")
    _add_solver_flags(m)

    d = sub.add_parser("decompose", help="recover an approximate base and low-rank task vectors")
    d.add_argument("models", nargs="+")
    d.add_argument("--out-dir", required=True)
    _add_solver_flags(d)

    a = sub.add_parser("analyze", help="singular-value spectrum of a task vector")
    a.add_argument("model_a")
    a.add_argument("model_b")
    a.add_argument("--top-count", type=int, default=DEFAULT_TOP_COUNT)
    a.add_argument("--rank-fraction", type=float, default=0.2)
    a.add_argument("--out", required=True, help="CSV path; a JSON summary is written beside it")
    a.add_argument("--threads", type=int)

    b = sub.add_parser("bench", help="synthetic recovery benchmark")
    b.add_argument("spec", help="TOML bench spec")
    b.add_argument("recipes", help="TOML file with [[recipe]] tables")
    b.add_argument("--out", required=True, help="BenchReport JSON path")
    b.add_argument("--concurrent", action="store_true", help="run recipes in parallel")

    for p in (m, d, a, b):
        p.add_argument("-v", "--verbose", action="count", default=0, help="JSON-line logs (-vv for debug)")
    return parser


def recipe_from_args(args) -> MergeRecipe:
    """Recipe file values overridden by any explicitly given flags."""
    data = read_toml(args.recipe) if args.recipe else {}
    given = {key: getattr(args, dest) for dest, key in RECIPE_FLAGS.items() if getattr(args, dest) is not None}
    data.update(given)
    if args.models:
        data["model_paths"] = list(args.models)
    method = data.get("method", "lore_direct")
    if "dare_drop_prob" in given and method != "dare":
        raise UsageError(f"--dare-drop-prob conflicts with method {method!r}")
    if "ties_top_fraction" in given and method != "ties":
        raise UsageError(f"--ties-top-fraction conflicts with method {method!r}")
    solver_given = sorted(k for k in SOLVER_FLAGS.values() if k in given)
    if solver_given and method not in LORE_METHODS:
        raise UsageError(f"solver flags ({', '.join(solver_given)}) conflict with method {method!r}")
    if "base_path" in given and method not in BASE_METHODS:
        raise UsageError(f"--base conflicts with method {method!r}")
    recipe = MergeRecipe.from_mapping(data)
    if not recipe.model_paths:
        raise UsageError("no input models given")
    if not recipe.output_path:
        raise UsageError("no output path given (--output or output_path)")
    if recipe.method == "average" and len(recipe.model_paths) < 2:
        raise UsageError("average merging needs at least two models")
    return recipe


def solver_config_from_args(args) -> SolverConfig:
    kwargs = {k: getattr(args, k) for k in SOLVER_FLAGS if getattr(args, k) is not None}
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _trace_summary(traces) -> dict:
    return {
        name: {
            "iterations": t.iterations_run,
            "converged": t.converged,
            "final_change": t.final_change,
            "objective": t.objective_per_iteration,
        }
        for name, t in traces.items()
    }


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_distinct(outputs, inputs) -> None:
    resolved = {Path(p).resolve() for p in inputs}
    for out in outputs:
        if Path(out).resolve() in resolved:
            raise UsageError(f"output {out} would overwrite an input file")


class _Outputs:
    """Files written by this run, removed again if a later step fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def cmd_merge(args, outputs: _Outputs) -> int:
    recipe = recipe_from_args(args)
    out_path = Path(recipe.output_path)
    manifest_path = Path(args.manifest) if args.manifest else out_path.with_suffix(".manifest.json")
    _check_distinct([out_path, manifest_path], [*recipe.model_paths, *([recipe.base_path] if recipe.base_path else [])])

    start = time.perf_counter()
    models = [load_checkpoint(p) for p in recipe.model_paths]
    base = load_checkpoint(recipe.base_path) if recipe.base_path else None
    logger.info("loaded %d models (%d parameters each)", len(models), len(models[0]))
    merged, traces = run_recipe(recipe, models, base=base, workers=args.threads)
    merged = ParameterSet(merged.tensors, {"merge_method": recipe.method})
    save_checkpoint(merged, out_path)
    outputs.add(out_path)
    duration = time.perf_counter() - start
    logger.info("wrote %s in %.3f s", out_path, duration)

    manifest = {
        "tool": f"loremerge {__version__}",
        "command": "merge",
        "recipe": recipe.to_mapping(),
        "inputs": [{"path": str(p), "sha256": file_digest(p)} for p in recipe.model_paths],
        "base": {"path": recipe.base_path, "sha256": file_digest(recipe.base_path)} if recipe.base_path else None,
        "output": {"path": str(out_path), "sha256": file_digest(out_path)},
        "parameters": _trace_summary(traces),
        "duration_s": duration,
    }
    _write_json(manifest_path, manifest)
    outputs.add(manifest_path)
    return 0


def cmd_decompose(args, outputs: _Outputs) -> int:
    config = solver_config_from_args(args)
    out_dir = Path(args.out_dir)
    start = time.perf_counter()
    models = [load_checkpoint(p) for p in args.models]
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(models) - 1)))
    tv_paths = [out_dir / f"task_vector_{i:0{width}d}.safetensors" for i in range(len(models))]
    _check_distinct([out_dir / "base.safetensors", *tv_paths], args.models)

    base, task_vectors, traces = decompose_parameter_sets(models, config, workers=args.threads)
    dtypes = models[0].dtypes()
    save_checkpoint(ParameterSet({k: v.astype(dtypes[k]) for k, v in base.tensors.items()}),
                    out_dir / "base.safetensors")
    outputs.add(out_dir / "base.safetensors")
    for tv, path in zip(task_vectors, tv_paths):
        save_checkpoint(tv.to_parameter_set(dtypes), path)
        outputs.add(path)

    residuals = {
        name: [float(np.linalg.norm(base[name] + tv[name] - np.asarray(m[name], dtype=np.float64)))
               for tv, m in zip(task_vectors, models)]
        for name in base
    }
    duration = time.perf_counter() - start
    summary = _trace_summary(traces)
    for name, rec in residuals.items():
        summary.setdefault(name, {"passthrough": True})["residuals"] = rec
    trace = {
        "tool": f"loremerge {__version__}",
        "command": "decompose",
        "solver": {k: getattr(config, k) for k in SOLVER_FLAGS},
        "inputs": [{"path": str(p), "sha256": file_digest(p)} for p in args.models],
        "base": str(out_dir / "base.safetensors"),
        "task_vectors": [str(p) for p in tv_paths],
        "parameters": summary,
        "duration_s": duration,
    }
    _write_json(out_dir / "trace.json", trace)
    outputs.add(out_dir / "trace.json")
    logger.info("decomposed %d models in %.3f s", len(models), duration)
    return 0


def cmd_analyze(args, outputs: _Outputs) -> int:
    if args.top_count < 1:
        raise UsageError("--top-count must be at least 1")
    if not 0 < args.rank_fraction <= 1:
        raise UsageError("--rank-fraction must lie in (0, 1]")
    a, b = load_checkpoint(args.model_a), load_checkpoint(args.model_b)
    report = analyze_task_vectors(a, b, args.top_count, args.rank_fraction, workers=args.threads or 1)
    try:
        emit_report(report, args.out)
    except OSError:
        outputs.add(args.out)
        outputs.add(sidecar_path(args.out))
        raise
    worst = max((r.decay_ratio for r in report.records), default=0.0)
    logger.info("analyzed %d parameters; largest decay ratio %.3e", len(report.records), worst)
    return 0


def cmd_bench(args, outputs: _Outputs) -> int:
    spec = load_bench_spec(args.spec)
    recipes = load_bench_recipes(args.recipes)
    report = run_bench(spec, recipes, concurrent=args.concurrent)
    report.write(args.out)
    print(report.summary_table())
    for r in report.results:
        if not r.ok:
            logger.warning("recipe %s failed: %s", r.label, r.error)
    return 0 if any(r.ok for r in report.results) else 2


COMMANDS = {"merge": cmd_merge, "decompose": cmd_decompose, "analyze": cmd_analyze, "bench": cmd_bench}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split()), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    outputs = _Outputs()
    try:
        return COMMANDS[args.command](args, outputs)
    except (SolverError, SvdError, ArithmeticError, np.linalg.LinAlgError) as exc:
        outputs.cleanup()
        return _fail(type(exc).__name__, str(exc), 2)
    except (UsageError, RecipeError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        outputs.cleanup()
        return _fail(type(exc).__name__, str(exc), 1)
    except Exception as exc:  # noqa: BLE001
        outputs.cleanup()
        logger.debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
