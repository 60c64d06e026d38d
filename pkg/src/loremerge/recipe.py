"""Declarative merge recipes and their TOML form."""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .solver import SolverConfig

METHODS = ("lore_direct", "lore_ties", "average", "dare", "ties")
LORE_METHODS = ("lore_direct", "lore_ties")
BASE_METHODS = ("dare", "ties")

SOLVER_KEYS = ("mu", "max_iters", "rel_tol", "rank_fraction", "apply_rank_cap")
RECIPE_KEYS = (
    "method", "lambda", *SOLVER_KEYS, "dare_drop_prob", "ties_top_fraction",
    "seed", "base_path", "model_paths", "output_path",
)


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeRecipe:
    method: str = "lore_direct"
    lam: float = 1.0
    dare_drop_prob: float = 0.5
    ties_top_fraction: float = 0.2
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    base_path: str | None = None
    model_paths: tuple[str, ...] = ()
    output_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "model_paths", tuple(str(p) for p in self.model_paths))
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RecipeError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not math.isfinite(self.lam):
            raise RecipeError(f"lambda must be finite, got {self.lam}")
        if not 0 <= self.dare_drop_prob < 1:
            raise RecipeError(f"dare_drop_prob must lie in [0, 1), got {self.dare_drop_prob}")
        if not 0 < self.ties_top_fraction <= 1:
            raise RecipeError(f"ties_top_fraction must lie in (0, 1], got {self.ties_top_fraction}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise RecipeError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.method in BASE_METHODS and not self.base_path:
            raise RecipeError(f"method {self.method!r} requires base_path")
        if self.method not in BASE_METHODS and self.base_path:
            raise RecipeError(f"base_path is not allowed for method {self.method!r}")

    @property
    def is_lore(self) -> bool:
        return self.method in LORE_METHODS

    @classmethod
    def from_mapping(cls, data: dict) -> "MergeRecipe":
        unknown = sorted(set(data) - set(RECIPE_KEYS))
        if unknown:
            raise RecipeError(f"unknown recipe keys: {', '.join(unknown)}")
        solver_kwargs = {k: data[k] for k in SOLVER_KEYS if k in data}
        try:
            solver = SolverConfig(**solver_kwargs)
        except (TypeError, ValueError) as exc:
            raise RecipeError(str(exc)) from exc
        kwargs = {k: data[k] for k in ("method", "dare_drop_prob", "ties_top_fraction", "seed",
                                       "base_path", "output_path") if k in data}
        if "lambda" in data:
            kwargs["lam"] = data["lambda"]
        if "model_paths" in data:
            paths = data["model_paths"]
            if isinstance(paths, str) or not isinstance(paths, (list, tuple)):
                raise RecipeError("model_paths must be a list of paths")
            kwargs["model_paths"] = tuple(paths)
        try:
            return cls(solver=solver, **kwargs)
        except TypeError as exc:
            raise RecipeError(str(exc)) from exc

    def to_mapping(self) -> dict:
        out = {
            "method": self.method,
            "lambda": self.lam,
            **dataclasses.asdict(self.solver),
            "dare_drop_prob": self.dare_drop_prob,
            "ties_top_fraction": self.ties_top_fraction,
            "seed": self.seed,
            "base_path": self.base_path,
            "model_paths": list(self.model_paths),
            "output_path": self.output_path,
        }
        return out

    def replace(self, **changes) -> "MergeRecipe":
        data = self.to_mapping()
        data.update(changes)
        return MergeRecipe.from_mapping({k: v for k, v in data.items() if v is not None})


def parse_toml(text: str, source: str = "<string>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise RecipeError(f"invalid TOML in {source}: {exc}") from exc


def read_toml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        # propagated as-is so callers can report the missing path
        raise
    except OSError as exc:
        raise RecipeError(f"cannot read {path}: {exc}") from exc
    return parse_toml(text, str(path))


def load_recipe(path) -> MergeRecipe:
    return MergeRecipe.from_mapping(read_toml(path))
