"""Block-Cholesky factorization and selected inversion of SPD
block-tridiagonal-arrowhead (BTA) matrices, sequential and distributed."""

from .bta_core import (
    BTAFactor,
    BTAMatrix,
    SelectedInverse,
    extract_pattern,
    generate_spd_bta,
    pattern_max_rel_error,
    read_bta,
    to_dense,
    validate,
    write_bta,
)
from .kernels import KernelLedger
from .parallel import DEFAULT_RATIO, plan_partitions, pselinv, run_pipeline
from .sequential import pobtaf, pobtasi, selinv

__all__ = [
    "BTAFactor",
    "BTAMatrix",
    "SelectedInverse",
    "KernelLedger",
    "DEFAULT_RATIO",
    "extract_pattern",
    "generate_spd_bta",
    "pattern_max_rel_error",
    "plan_partitions",
    "pobtaf",
    "pobtasi",
    "pselinv",
    "read_bta",
    "run_pipeline",
    "selinv",
    "to_dense",
    "validate",
    "write_bta",
]
