"""Row kernels behind softmax, layer norm and GELU.

The compiled extension (``_ckernels``) is used for float32 data when it is
importable; float64 always takes the numpy path. Set
``SMOOTHCERT_PURE_PYTHON=1`` before import to force the numpy path
everywhere, or call :func:`use_backend` at runtime.
"""

import os

import numpy as np

from smoothcert import _pykernels

try:
    from smoothcert import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active = None


def available_backends():
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous choice."""
    global _active
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "compiled" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
    previous = _active
    _active = name
    return previous


def backend():
    return _active


use_backend("python" if _ckernels is None or os.environ.get("SMOOTHCERT_PURE_PYTHON") == "1"
            else "compiled")


def _impl(dtype):
    if _active == "compiled" and dtype == np.float32:
        return _ckernels
    return _pykernels


def _rows(a):
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def softmax(x, scale=1.0):
    """Softmax of ``scale * x`` over the last axis."""
    x2 = _rows(x)
    out = np.empty_like(x2)
    _impl(x2.dtype).softmax_rows(x2, out, x2.dtype.type(scale))
    return out.reshape(x.shape)


def softmax_backward(y, gy):
    y2, g2 = _rows(y), _rows(gy)
    out = np.empty_like(y2)
    _impl(y2.dtype).softmax_rows_backward(y2, g2, out)
    return out.reshape(y.shape)


def layer_norm(x, gain, bias, eps):
    """Returns ``(y, mean, rstd)``; mean/rstd are per row of the flattened input."""
    x2 = _rows(x)
    n = x2.shape[0]
    out = np.empty_like(x2)
    mean = np.empty(n, dtype=x2.dtype)
    rstd = np.empty(n, dtype=x2.dtype)
    gain = np.ascontiguousarray(gain, dtype=x2.dtype)
    bias = np.ascontiguousarray(bias, dtype=x2.dtype)
    _impl(x2.dtype).layer_norm_rows(x2, gain, bias, x2.dtype.type(eps), out, mean, rstd)
    return out.reshape(x.shape), mean, rstd


def layer_norm_backward(gy, x, gain, mean, rstd):
    """Returns ``(gx, ggain, gbias)``."""
    x2, g2 = _rows(x), _rows(gy)
    gx = np.empty_like(x2)
    d = x2.shape[1]
    ggain = np.zeros(d, dtype=x2.dtype)
    gbias = np.zeros(d, dtype=x2.dtype)
    gain = np.ascontiguousarray(gain, dtype=x2.dtype)
    _impl(x2.dtype).layer_norm_rows_backward(g2, x2, gain, mean, rstd, gx, ggain, gbias)
    return gx.reshape(x.shape), ggain, gbias


def gelu(x):
    """Tanh-approximation GELU."""
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _impl(flat.dtype).gelu(flat, out)
    return out.reshape(x.shape)


def gelu_backward(x, gy):
    flat = np.ascontiguousarray(x).reshape(-1)
    g = np.ascontiguousarray(gy, dtype=flat.dtype).reshape(-1)
    out = np.empty_like(flat)
    _impl(flat.dtype).gelu_backward(flat, g, out)
    return out.reshape(x.shape)
