"""Model merging by joint low-rank estimation of task vectors.

Recovers an approximate base model and low-rank task vectors from a set of
fine-tuned checkpoints (no base model required), then merges them.  Average,
DARE and TIES baselines, a task-vector spectrum analyzer and a synthetic
benchmark are included.
"""
from .checkpoint import (
    CompatibilityReport,
    ParameterSet,
    TaskVectorSet,
    check_compatibility,
    load_checkpoint,
    partition_parameters,
    save_checkpoint,
)
from .linalg import frobenius_norm, nuclear_norm, svd, svt, truncate_rank
from .merging import (
    assemble,
    average_merge,
    combine_direct_sum,
    combine_ties_select,
    dare_merge,
    lore_merge,
    ties_merge,
)
from .recipe import MergeRecipe
from .solver import SolverConfig, SolverTrace, decompose, decompose_parameter_sets
from .spectrum import SpectrumReport, analyze_task_vectors, emit_report

__version__ = "0.1.0"
