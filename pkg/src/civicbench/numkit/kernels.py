"""Array kernels with two interchangeable backends ("numpy" and "numba").

Matrix products always go through numpy's BLAS in both backends; the backends
differ in the rowwise and elementwise passes around the products. The numba
backend fuses those passes into single sweeps, and for large arrays routes
exp/tanh through numpy's SIMD implementations (scalar libm calls inside jitted
loops are slower than numpy's vectorized transcendentals on this op mix).

Select with the CIVICBENCH_BACKEND environment variable (numpy | numba | auto).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install-time dependency
    HAVE_NUMBA = False

    def njit(*a, **k):  # type: ignore
        def deco(fn):
            return fn
        return deco


# below this element count, scalar-transcendental jitted loops beat the
# overhead of extra numpy calls; above it, numpy's SIMD exp/tanh win
_SMALL = 4096

# above this element count, float32 softmax is faster through numpy end to
# end: the jitted scalar max/sum passes lose to SIMD reductions on narrow
# lanes (measured 20-35% on this host, which lacks SVML)
_WIDE_F32 = 65536

_VALID_BACKENDS = ("numpy", "numba")

REGISTRY: dict[str, dict[str, object]] = {}


def _register(name: str, backend: str):
    def deco(fn):
        REGISTRY.setdefault(name, {})[backend] = fn
        return fn
    return deco


def _initial_backend() -> str:
    choice = os.environ.get("CIVICBENCH_BACKEND", "auto").strip().lower()
    if choice in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if choice not in _VALID_BACKENDS:
        raise ValueError(
            f"CIVICBENCH_BACKEND must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numba" and not HAVE_NUMBA:
        raise ValueError("CIVICBENCH_BACKEND=numba but numba is not importable")
    return choice


_active = _initial_backend()


def active_backend() -> str:
    return _active


def get_kernel(name: str, backend: str | None = None):
    impls = REGISTRY[name]
    key = backend if backend is not None else _active
    if key not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {key!r}")
    return impls.get(key, impls["numpy"])


@contextmanager
def use_backend(name: str):
    """Temporarily swap the active backend (single-threaded use only)."""
    global _active
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    prev = _active
    _active = name
    try:
        yield
    finally:
        _active = prev


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


@_register("softmax_rows", "numpy")
def softmax_rows_np(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    z = x * x.dtype.type(scale) if scale != 1.0 else x
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((n, n), -1e30, dtype=dtype), k=1)
        if len(_MASK_CACHE) > 16:
            _MASK_CACHE.clear()
        _MASK_CACHE[key] = mask
    return mask


@_register("causal_softmax_rows", "numpy")
def causal_softmax_rows_np(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    n, m = x.shape
    if n != m:
        raise ValueError(f"causal softmax expects square scores, got {x.shape}")
    z = x * x.dtype.type(scale) + _causal_mask(n, x.dtype)
    mx = z.max(axis=1, keepdims=True)
    e = np.exp(z - mx)  # masked entries underflow to exactly 0.0
    e /= e.sum(axis=1, keepdims=True)
    return e


@_register("layernorm_rows", "numpy")
def layernorm_rows_np(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps))


@_register("l2norm_rows", "numpy")
def l2norm_rows_np(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    # rows with norm below the guard are returned unchanged
    return np.where(n < 1e-12, x, x / np.maximum(n, x.dtype.type(1e-300)))


@_register("ln_l2_rows", "numpy")
def ln_l2_rows_np(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return l2norm_rows_np(layernorm_rows_np(x, eps))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@_register("gelu", "numpy")
def gelu_np(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_grad_np(x: np.ndarray) -> np.ndarray:
    """d gelu / dx for the tanh approximation (used by the tape only)."""
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


@_register("dec_attend_one", "numpy")
def dec_attend_one_np(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      heads: int, scale: float) -> np.ndarray:
    """Single-query attention over a filled cache: q (1,D), k/v (len,D)."""
    d = q.shape[1] // heads
    out = np.empty_like(q)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = (k[:, sl] @ q[0, sl]) * q.dtype.type(scale)
        s -= s.max()
        e = np.exp(s)
        e /= e.sum()
        out[0, sl] = e @ v[:, sl]
    return out


@_register("col_normalize", "numpy")
def col_normalize_np(x: np.ndarray) -> np.ndarray:
    s = x.sum(axis=0, keepdims=True)
    # columns with (near-)zero mass stay zero and contribute nothing downstream
    return np.where(s < 1e-12, 0.0, x / np.maximum(s, x.dtype.type(1e-300)))


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_small_nb(x, scale):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0] * scale
            for j in range(1, d):
                t = x[i, j] * scale
                if t > m:
                    m = t
            tot = 0.0
            for j in range(d):
                t = np.exp(x[i, j] * scale - m)
                out[i, j] = t
                tot += t
            for j in range(d):
                out[i, j] /= tot
        return out

    @njit(cache=True)
    def _softmax_pre_nb(x, scale, out):
        n, d = x.shape
        for i in range(n):
            m = x[i, 0] * scale
            for j in range(1, d):
                t = x[i, j] * scale
                if t > m:
                    m = t
            for j in range(d):
                out[i, j] = x[i, j] * scale - m

    @njit(cache=True)
    def _rows_div_sum_nb(x):
        n, d = x.shape
        for i in range(n):
            tot = 0.0
            for j in range(d):
                tot += x[i, j]
            inv = 1.0 / tot
            for j in range(d):
                x[i, j] *= inv

    @_register("softmax_rows", "numba")
    def softmax_rows_nb(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
        if x.size <= _SMALL:
            return _softmax_small_nb(x, x.dtype.type(scale))
        if x.size >= _WIDE_F32 and x.dtype == np.float32:
            return softmax_rows_np(x, scale)
        out = np.empty_like(x)
        _softmax_pre_nb(x, x.dtype.type(scale), out)
        np.exp(out, out=out)
        _rows_div_sum_nb(out)
        return out

    @njit(cache=True)
    def _causal_pre_nb(x, scale, out):
        n = x.shape[0]
        for i in range(n):
            lim = i + 1
            m = x[i, 0] * scale
            for j in range(1, lim):
                t = x[i, j] * scale
                if t > m:
                    m = t
            for j in range(lim):
                out[i, j] = x[i, j] * scale - m
            for j in range(lim, n):
                out[i, j] = -900.0  # exp underflows to exactly 0.0

    @_register("causal_softmax_rows", "numba")
    def causal_softmax_rows_nb(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
        n, m = x.shape
        if n != m:
            raise ValueError(f"causal softmax expects square scores, got {x.shape}")
        out = np.empty_like(x)
        _causal_pre_nb(x, x.dtype.type(scale), out)
        np.exp(out, out=out)
        _rows_div_sum_nb(out)
        return out

    @njit(cache=True)
    def _layernorm_rows_nb(x, eps):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            var /= d
            inv = 1.0 / np.sqrt(var + eps)
            for j in range(d):
                out[i, j] = (x[i, j] - mu) * inv
        return out

    @_register("layernorm_rows", "numba")
    def layernorm_rows_nb(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        return _layernorm_rows_nb(x, float(eps))

    @njit(cache=True)
    def _l2norm_rows_nb(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            ss = 0.0
            for j in range(d):
                ss += x[i, j] * x[i, j]
            nrm = np.sqrt(ss)
            if nrm < 1e-12:
                for j in range(d):
                    out[i, j] = x[i, j]
            else:
                inv = 1.0 / nrm
                for j in range(d):
                    out[i, j] = x[i, j] * inv
        return out

    @_register("l2norm_rows", "numba")
    def l2norm_rows_nb(x: np.ndarray) -> np.ndarray:
        return _l2norm_rows_nb(x)

    @njit(cache=True)
    def _ln_l2_rows_nb(x, eps):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            var /= d
            inv = 1.0 / np.sqrt(var + eps)
            ss = 0.0
            for j in range(d):
                t = (x[i, j] - mu) * inv
                out[i, j] = t
                ss += t * t
            nrm = np.sqrt(ss)
            if nrm >= 1e-12:
                s = 1.0 / nrm
                for j in range(d):
                    out[i, j] *= s
        return out

    @_register("ln_l2_rows", "numba")
    def ln_l2_rows_nb(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        return _ln_l2_rows_nb(x, float(eps))

    @njit(cache=True)
    def _gelu_small_nb(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = np.tanh(_GELU_C * (v + _GELU_A * v * v * v))
                out[i, j] = 0.5 * v * (1.0 + t)
        return out

    @njit(cache=True)
    def _gelu_inner_nb(x, out):
        n, d = x.shape
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = _GELU_C * (v + _GELU_A * v * v * v)

    @njit(cache=True)
    def _gelu_combine_nb(x, t):
        n, d = x.shape
        for i in range(n):
            for j in range(d):
                t[i, j] = 0.5 * x[i, j] * (1.0 + t[i, j])

    @_register("gelu", "numba")
    def gelu_nb(x: np.ndarray) -> np.ndarray:
        if x.size <= _SMALL:
            return _gelu_small_nb(x)
        buf = np.empty_like(x)
        _gelu_inner_nb(x, buf)
        np.tanh(buf, out=buf)
        _gelu_combine_nb(x, buf)
        return buf

    @njit(cache=True)
    def _dec_attend_one_nb(q, k, v, heads, scale):
        length, dim = k.shape
        dh = dim // heads
        out = np.zeros((1, dim), dtype=q.dtype)
        s = np.empty(length, dtype=q.dtype)
        for h in range(heads):
            base = h * dh
            m = -1e300
            for j in range(length):
                acc = 0.0
                for t in range(dh):
                    acc += q[0, base + t] * k[j, base + t]
                acc *= scale
                s[j] = acc
                if acc > m:
                    m = acc
            tot = 0.0
            for j in range(length):
                e = np.exp(s[j] - m)
                s[j] = e
                tot += e
            inv = 1.0 / tot
            for j in range(length):
                w = s[j] * inv
                for t in range(dh):
                    out[0, base + t] += w * v[j, base + t]
        return out

    @_register("dec_attend_one", "numba")
    def dec_attend_one_nb(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                          heads: int, scale: float) -> np.ndarray:
        return _dec_attend_one_nb(q, k, v, heads, float(scale))

    @njit(cache=True)
    def _col_normalize_nb(x):
        n, d = x.shape
        out = np.empty_like(x)
        for j in range(d):
            s = 0.0
            for i in range(n):
                s += x[i, j]
            if s < 1e-12:
                for i in range(n):
                    out[i, j] = 0.0
            else:
                inv = 1.0 / s
                for i in range(n):
                    out[i, j] = x[i, j] * inv
        return out

    @_register("col_normalize", "numba")
    def col_normalize_nb(x: np.ndarray) -> np.ndarray:
        return _col_normalize_nb(x)


def warmup_jit(dtype=np.float64) -> None:
    """Compile every numba kernel on tiny inputs so timed runs never compile."""
    if not HAVE_NUMBA:
        return
    x = np.asarray([[0.5, -0.25], [1.0, 2.0]], dtype=dtype)
    for name in ("softmax_rows", "causal_softmax_rows"):
        get_kernel(name, "numba")(x, 1.0)
    get_kernel("layernorm_rows", "numba")(x, 1e-5)
    get_kernel("l2norm_rows", "numba")(x)
    get_kernel("ln_l2_rows", "numba")(x, 1e-5)
    get_kernel("gelu", "numba")(x)
    get_kernel("col_normalize", "numba")(np.abs(x))
    q = x[:1].copy()
    get_kernel("dec_attend_one", "numba")(q, x, x, 1, 1.0)
    big = np.zeros((80, 80), dtype=dtype)
    get_kernel("softmax_rows", "numba")(big, 1.0)
    get_kernel("causal_softmax_rows", "numba")(big, 1.0)
    get_kernel("gelu", "numba")(big)
