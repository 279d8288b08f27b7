"""Public tensor ops: shape checks, MAC counting, backend dispatch, autodiff.

Every op accepts plain 2-D ndarrays or tape-tracked Vars and returns the same
kind. Constant (ndarray) inputs short-circuit to the raw kernels, so pipeline
code is written once and serves both inference and training. The tracked path
always computes values with the reference ("numpy") kernels so that training
trajectories do not depend on the active backend.
"""

from __future__ import annotations

import os

import numpy as np

from . import counters
from .autodiff import GradientError, Tape, Var, tape_of, val
from .kernels import get_kernel, gelu_grad_np


class ShapeError(ValueError):
    pass


class FiniteError(FloatingPointError):
    pass


_check_finite = os.environ.get("CIVICBENCH_CHECK_FINITE", "0") == "1"


def set_finite_checks(enabled: bool) -> None:
    """Toggle post-op finiteness assertions (on in tests, off in benchmarks)."""
    global _check_finite
    _check_finite = bool(enabled)


def finite_checks_enabled() -> bool:
    return _check_finite


def _as2d(x, name: str) -> np.ndarray:
    a = val(x)
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D array, got "
                         f"{getattr(a, 'shape', type(a))}")
    return a


def _finish(out: np.ndarray, opname: str):
    if _check_finite and not np.isfinite(out).all():
        raise FiniteError(f"{opname} produced non-finite values")
    return out


def _kernel_for(name: str, tracked: bool):
    return get_kernel(name, "numpy" if tracked else None)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    av = _as2d(a, "matmul")
    bv = _as2d(b, "matmul")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} x {bv.shape}")
    counters.add_macs(av.shape[0] * av.shape[1] * bv.shape[1])
    out = _finish(np.dot(av, bv), "matmul")
    tape = tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a.nid, lambda g, bv=bv: np.dot(g, bv.T)))
    if isinstance(b, Var):
        parents.append((b.nid, lambda g, av=av: np.dot(av.T, g)))
    return tape.record(out, parents)


def transpose(x):
    xv = _as2d(x, "transpose")
    out = xv.T
    if isinstance(x, Var):
        return x.tape.record(out, [(x.nid, lambda g: g.T)])
    return out


def reshape(x, rows: int, cols: int):
    xv = _as2d(x, "reshape")
    if rows * cols != xv.size:
        raise ShapeError(f"reshape: {xv.shape} cannot become ({rows}, {cols})")
    out = xv.reshape(rows, cols)
    if isinstance(x, Var):
        shape = xv.shape
        return x.tape.record(out, [(x.nid, lambda g: g.reshape(shape))])
    return out


def add(a, b):
    av = _as2d(a, "add")
    bv = _as2d(b, "add")
    if av.shape != bv.shape:
        raise ShapeError(f"add: shapes differ, {av.shape} vs {bv.shape}")
    out = _finish(av + bv, "add")
    tape = tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a.nid, lambda g: g))
    if isinstance(b, Var):
        parents.append((b.nid, lambda g: g))
    return tape.record(out, parents)


def sub(a, b):
    av = _as2d(a, "sub")
    bv = _as2d(b, "sub")
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shapes differ, {av.shape} vs {bv.shape}")
    out = _finish(av - bv, "sub")
    tape = tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a.nid, lambda g: g))
    if isinstance(b, Var):
        parents.append((b.nid, lambda g: -g))
    return tape.record(out, parents)


def mul(a, b):
    av = _as2d(a, "mul")
    bv = _as2d(b, "mul")
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shapes differ, {av.shape} vs {bv.shape}")
    out = _finish(av * bv, "mul")
    tape = tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a.nid, lambda g, bv=bv: g * bv))
    if isinstance(b, Var):
        parents.append((b.nid, lambda g, av=av: g * av))
    return tape.record(out, parents)


def scale(x, c: float):
    xv = _as2d(x, "scale")
    out = _finish(xv * xv.dtype.type(c), "scale")
    if isinstance(x, Var):
        return x.tape.record(out, [(x.nid, lambda g, c=c: g * c)])
    return out


def add_rowvec(x, v):
    """Broadcast-add a (1, cols) row vector to every row."""
    xv = _as2d(x, "add_rowvec")
    vv = _as2d(v, "add_rowvec")
    if vv.shape != (1, xv.shape[1]):
        raise ShapeError(f"add_rowvec: expected (1, {xv.shape[1]}), got {vv.shape}")
    out = _finish(xv + vv, "add_rowvec")
    tape = tape_of(x, v)
    if tape is None:
        return out
    parents = []
    if isinstance(x, Var):
        parents.append((x.nid, lambda g: g))
    if isinstance(v, Var):
        parents.append((v.nid, lambda g: g.sum(axis=0, keepdims=True)))
    return tape.record(out, parents)


def col_slice(x, start: int, stop: int):
    xv = _as2d(x, "col_slice")
    if not (0 <= start < stop <= xv.shape[1]):
        raise ShapeError(f"col_slice: [{start}:{stop}] out of range for {xv.shape}")
    out = xv[:, start:stop]
    if isinstance(x, Var):
        shape = xv.shape

        def vjp(g, shape=shape, start=start, stop=stop):
            z = np.zeros(shape, dtype=g.dtype)
            z[:, start:stop] = g
            return z

        return x.tape.record(out, [(x.nid, vjp)])
    return out


def concat_cols(parts):
    vals = [_as2d(p, "concat_cols") for p in parts]
    rows = vals[0].shape[0]
    if any(v.shape[0] != rows for v in vals):
        raise ShapeError("concat_cols: row counts differ")
    out = _finish(np.concatenate(vals, axis=1), "concat_cols")
    tape = tape_of(*parts)
    if tape is None:
        return out
    parents = []
    offset = 0
    for p, v in zip(parts, vals):
        w = v.shape[1]
        if isinstance(p, Var):
            parents.append((p.nid,
                            lambda g, a=offset, b=offset + w: g[:, a:b]))
        offset += w
    return tape.record(out, parents)


def concat_rows(parts):
    vals = [_as2d(p, "concat_rows") for p in parts]
    cols = vals[0].shape[1]
    if any(v.shape[1] != cols for v in vals):
        raise ShapeError("concat_rows: column counts differ")
    out = _finish(np.concatenate(vals, axis=0), "concat_rows")
    tape = tape_of(*parts)
    if tape is None:
        return out
    parents = []
    offset = 0
    for p, v in zip(parts, vals):
        h = v.shape[0]
        if isinstance(p, Var):
            parents.append((p.nid,
                            lambda g, a=offset, b=offset + h: g[a:b, :]))
        offset += h
    return tape.record(out, parents)


def row_gather(x, idx):
    """Select rows by index; gradients scatter-add back."""
    xv = _as2d(x, "row_gather")
    idx = np.asarray(idx, dtype=np.intp)
    out = xv[idx]
    if isinstance(x, Var):
        shape = xv.shape

        def vjp(g, shape=shape, idx=idx):
            z = np.zeros(shape, dtype=g.dtype)
            np.add.at(z, idx, g)
            return z

        return x.tape.record(out, [(x.nid, vjp)])
    return out


def sum_all(x):
    xv = _as2d(x, "sum_all")
    out = np.array([[xv.sum()]], dtype=xv.dtype)
    if isinstance(x, Var):
        shape = xv.shape
        return x.tape.record(
            out, [(x.nid,
                   lambda g, shape=shape: np.full(shape, g[0, 0], dtype=g.dtype))])
    return out


# ---------------------------------------------------------------------------
# normalizations and activations
# ---------------------------------------------------------------------------


def softmax_rows(x, scl: float = 1.0):
    xv = _as2d(x, "softmax_rows")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("softmax_rows", tracked)(xv, scl), "softmax_rows")
    if not tracked:
        return out

    def vjp(g, y=out, scl=scl):
        return (y * (g - (g * y).sum(axis=1, keepdims=True))) * scl

    return x.tape.record(out, [(x.nid, vjp)])


def causal_softmax_rows(x, scl: float = 1.0):
    xv = _as2d(x, "causal_softmax_rows")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("causal_softmax_rows", tracked)(xv, scl),
                  "causal_softmax_rows")
    if not tracked:
        return out

    # masked entries have y == 0, so the softmax vjp already zeroes them
    def vjp(g, y=out, scl=scl):
        return (y * (g - (g * y).sum(axis=1, keepdims=True))) * scl

    return x.tape.record(out, [(x.nid, vjp)])


def log_softmax_rows(x):
    xv = _as2d(x, "log_softmax_rows")
    m = xv.max(axis=1, keepdims=True)
    z = xv - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _finish(z - lse, "log_softmax_rows")
    if not isinstance(x, Var):
        return out

    def vjp(g, y=out):
        return g - np.exp(y) * g.sum(axis=1, keepdims=True)

    return x.tape.record(out, [(x.nid, vjp)])


def layernorm_rows(x, eps: float = 1e-5):
    xv = _as2d(x, "layernorm_rows")
    if xv.shape[1] < 2:
        raise ShapeError(f"layernorm_rows: needs >= 2 columns, got {xv.shape}")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("layernorm_rows", tracked)(xv, eps),
                  "layernorm_rows")
    if not tracked:
        return out

    mu = xv.mean(axis=1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)

    def vjp(g, y=out, inv=inv):
        return inv * (g - g.mean(axis=1, keepdims=True)
                      - y * (g * y).mean(axis=1, keepdims=True))

    return x.tape.record(out, [(x.nid, vjp)])


def l2norm_rows(x):
    xv = _as2d(x, "l2norm_rows")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("l2norm_rows", tracked)(xv), "l2norm_rows")
    if not tracked:
        return out

    n = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
    live = n >= 1e-12

    def vjp(g, y=out, n=n, live=live):
        safe = np.where(live, n, 1.0)
        proj = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe
        return np.where(live, proj, g)  # guarded rows pass through unchanged

    return x.tape.record(out, [(x.nid, vjp)])


def ln_l2_rows(x, eps: float = 1e-5):
    """Layernorm then l2-normalize each row (fused kernel on the raw path)."""
    if isinstance(x, Var):
        return l2norm_rows(layernorm_rows(x, eps))
    xv = _as2d(x, "ln_l2_rows")
    if xv.shape[1] < 2:
        raise ShapeError(f"ln_l2_rows: needs >= 2 columns, got {xv.shape}")
    return _finish(get_kernel("ln_l2_rows")(xv, eps), "ln_l2_rows")


def gelu(x):
    xv = _as2d(x, "gelu")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("gelu", tracked)(xv), "gelu")
    if not tracked:
        return out
    return x.tape.record(out, [(x.nid, lambda g, xv=xv: g * gelu_grad_np(xv))])


def col_normalize(x):
    """Divide each column by its sum; (near-)zero columns become all zero."""
    xv = _as2d(x, "col_normalize")
    tracked = isinstance(x, Var)
    out = _finish(_kernel_for("col_normalize", tracked)(xv), "col_normalize")
    if not tracked:
        return out

    s = xv.sum(axis=0, keepdims=True)
    live = s >= 1e-12

    # y = x / s columnwise, so dL/dx[k,j] = (g[k,j] - sum_i g[i,j] y[i,j]) / s_j
    def vjp(g, y=out, s=s, live=live):
        safe = np.where(live, s, 1.0)
        proj = (g - (g * y).sum(axis=0, keepdims=True)) / safe
        return np.where(live, proj, 0.0)

    return x.tape.record(out, [(x.nid, vjp)])


def dec_attend_one(q, k, v, heads: int, scl: float):
    """Fused single-query multi-head attention over a cache (inference only)."""
    qv = _as2d(q, "dec_attend_one")
    if isinstance(q, Var) or isinstance(k, Var) or isinstance(v, Var):
        raise GradientError("dec_attend_one does not support tracked inputs")
    # scores (len x head_dim per head) plus value mix: 2 * len * dim MACs
    counters.add_macs(2 * k.shape[0] * k.shape[1])
    return _finish(get_kernel("dec_attend_one")(qv, k, v, heads, scl),
                   "dec_attend_one")
