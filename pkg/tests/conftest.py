"""Shared fixtures. Finite-value checking is switched on for every test
before the package is imported anywhere."""

import os

os.environ.setdefault("CIVICBENCH_CHECK_FINITE", "1")

import numpy as np
import pytest

from civicbench import numkit as nk
from civicbench.config import PipelineConfig


@pytest.fixture(scope="session", autouse=True)
def _jit_warm():
    # compile numba kernels once so per-test timing stays sane
    if nk.HAVE_NUMBA:
        nk.warmup_jit(np.float64)
        nk.warmup_jit(np.float32)


@pytest.fixture(scope="session")
def toy_cfg() -> PipelineConfig:
    return PipelineConfig().validate()


@pytest.fixture(scope="session")
def tiny_cfg() -> PipelineConfig:
    """Smallest config that still exercises every pipeline dimension."""
    return PipelineConfig(
        full_vis_len=8, vis_dim=4, vis_layers=2, vis_heads=2, merge_factor=2,
        lm_dim=8, lm_layers=2, lm_heads=2, prompt_len=3, prefix_len=1,
        vocab=11, max_new_tokens=2, compact_vis_len=4, kv_slots=2, seed=3,
    ).validate()


@pytest.fixture(params=["numpy", "numba"] if nk.HAVE_NUMBA else ["numpy"])
def backend(request):
    """Run a test under each available kernel backend."""
    with nk.use_backend(request.param):
        yield request.param


def json_skeleton(value):
    """Collapse a JSON document to its type structure.

    Dicts keep their keys, lists keep only their first element's skeleton, and
    leaves become type names, so two documents with equal shape but different
    numbers produce byte-identical skeletons.
    """
    if isinstance(value, dict):
        return {k: json_skeleton(v) for k, v in value.items()}
    if isinstance(value, list):
        return [json_skeleton(value[0])] if value else []
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if value is None:
        return "null"
    return "str"
