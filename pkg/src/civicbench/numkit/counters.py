"""Multiply-accumulate counting with ambient labeled regions.

Counting is analytic (derived from operand shapes at the op layer), so counts
are identical across backends and precisions. A region label may be entered
repeatedly in sequence (per-layer loops accumulate into one label) but may not
be re-entered while already open; that keeps every label bound to one
unambiguous code region per forward pass.
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext

UNLABELED = "unlabeled"


class MacCounter:
    def __init__(self):
        self.counts: dict[str, int] = {}
        self._open: list[str] = []

    @contextmanager
    def region(self, label: str):
        if label in self._open:
            raise ValueError(f"region {label!r} is already open")
        self._open.append(label)
        try:
            yield self
        finally:
            self._open.pop()

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("MAC increments must be nonnegative")
        label = self._open[-1] if self._open else UNLABELED
        self.counts[label] = self.counts.get(label, 0) + int(n)

    def get(self, label: str) -> int:
        return self.counts.get(label, 0)

    def total(self) -> int:
        return sum(self.counts.values())


_active: MacCounter | None = None


def active() -> MacCounter | None:
    return _active


@contextmanager
def counting(counter: MacCounter | None = None):
    """Install a counter as the ambient target for add_macs/region."""
    global _active
    counter = counter if counter is not None else MacCounter()
    prev = _active
    _active = counter
    try:
        yield counter
    finally:
        _active = prev


def add_macs(n: int) -> None:
    if _active is not None:
        _active.add(n)


def region(label: str):
    """Ambient region context; a no-op when no counter is installed."""
    if _active is not None:
        return _active.region(label)
    return nullcontext()
