"""Deterministic 2-D kernels, MAC counting, and reverse-mode autodiff."""

from . import counters
from .autodiff import GradientError, Tape, Var, tape_of, val
from .kernels import (HAVE_NUMBA, REGISTRY, active_backend, get_kernel,
                      use_backend, warmup_jit)
from .ops import (FiniteError, ShapeError, add, add_rowvec, causal_softmax_rows,
                  col_normalize, col_slice, concat_cols, concat_rows,
                  dec_attend_one, finite_checks_enabled, gelu, l2norm_rows,
                  layernorm_rows, ln_l2_rows, log_softmax_rows, matmul, mul,
                  reshape, row_gather, scale, set_finite_checks, softmax_rows,
                  sub, sum_all, transpose)
from .counters import MacCounter, add_macs, counting, region

__all__ = [
    "counters", "GradientError", "Tape", "Var", "tape_of", "val",
    "HAVE_NUMBA", "REGISTRY", "active_backend", "get_kernel", "use_backend",
    "warmup_jit", "FiniteError", "ShapeError", "add", "add_rowvec",
    "causal_softmax_rows", "col_normalize", "col_slice", "concat_cols",
    "concat_rows", "dec_attend_one", "finite_checks_enabled", "gelu",
    "l2norm_rows", "layernorm_rows", "ln_l2_rows", "log_softmax_rows",
    "matmul", "mul", "reshape", "row_gather", "scale", "set_finite_checks",
    "softmax_rows", "sub", "sum_all", "transpose", "MacCounter", "add_macs",
    "counting", "region",
]
