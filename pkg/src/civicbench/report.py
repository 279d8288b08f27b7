"""Shared per-run measurement records used by every pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field


@dataclass
class RunStats:
    """One pipeline execution: stage wall times (seconds) and footprints.

    total_s covers the whole run and therefore exceeds the sum of the named
    stages by whatever untimed glue (embedding lookups, sequence assembly)
    the run performed.
    """
    model: str = ""
    total_s: float = 0.0
    vision_enc_s: float = 0.0
    proj_s: float = 0.0
    prefill_s: float = 0.0
    decode_s: float = 0.0
    overhead_s: float = 0.0
    prefill_tokens: int = 0
    kv_cache_bytes: int = 0

    @property
    def llm_total_s(self) -> float:
        return self.prefill_s + self.decode_s


class StageClock:
    """Monotonic stage stopwatch; one start/stop pair per instrumentation point."""

    def __init__(self):
        self._t0 = 0

    def start(self) -> None:
        self._t0 = time.perf_counter_ns()

    def stop(self) -> float:
        return (time.perf_counter_ns() - self._t0) * 1e-9


@dataclass
class ShapeTrace:
    """Optional audit hook recording (stage, rows, cols) for pipeline buffers."""
    entries: list[tuple[str, int, int]] = field(default_factory=list)

    def note(self, stage: str, arr) -> None:
        self.entries.append((stage, int(arr.shape[0]), int(arr.shape[1])))
