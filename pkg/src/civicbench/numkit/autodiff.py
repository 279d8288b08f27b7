"""Minimal reverse-mode tape: a Wengert list of vector-Jacobian closures.

The tape stores, per node, the parent node ids and a closure mapping the
output cotangent to each parent's contribution. Values live on the Var, not
the tape. Plain ndarrays are constants: they are never recorded and never
receive gradients.
"""

from __future__ import annotations

import numpy as np


class GradientError(ValueError):
    pass


class Tape:
    def __init__(self):
        # nodes[i] = list of (parent_id, vjp) pairs; leaves have an empty list
        self.nodes: list[list[tuple[int, object]]] = []

    def leaf(self, value: np.ndarray) -> "Var":
        return Var(np.asarray(value), self, self._new_node([]))

    def _new_node(self, parents: list[tuple[int, object]]) -> int:
        self.nodes.append(parents)
        return len(self.nodes) - 1

    def record(self, value: np.ndarray,
               parents: list[tuple[int, object]]) -> "Var":
        return Var(value, self, self._new_node(parents))

    def backward(self, loss: "Var") -> dict[int, np.ndarray]:
        """Accumulate d loss / d node for every node reachable from loss.

        Visits each node exactly once, in reverse creation order (creation
        order is topological because operands must exist before results).
        """
        if loss.tape is not self:
            raise GradientError("loss belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise GradientError(
                f"backward needs a 1x1 scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {
            loss.nid: np.ones((1, 1), dtype=loss.value.dtype)}
        for nid in range(loss.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            for pid, vjp in self.nodes[nid]:
                contrib = vjp(g)
                acc = grads.get(pid)
                grads[pid] = contrib if acc is None else acc + contrib
        return grads

    def grad(self, grads: dict[int, np.ndarray], var: "Var") -> np.ndarray | None:
        """Gradient for a Var from a backward() result; None if unreachable."""
        return grads.get(var.nid)


class Var:
    """A tracked Tensor2D value: ndarray plus a node id on a tape."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value: np.ndarray, tape: Tape, nid: int):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, nid={self.nid})"


def val(x) -> np.ndarray:
    """Raw ndarray behind a Var or a plain array."""
    return x.value if isinstance(x, Var) else x


def tape_of(*xs) -> Tape | None:
    """The single tape shared by any Var arguments; None if all constants."""
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise GradientError("operands belong to different tapes")
    return tape
