"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a row-major numpy buffer. Operations on tensors that require
gradients record their parents and a local backward rule; :func:`backward`
walks that record in reverse topological order exactly once.

Gradient accumulation across separate ``backward`` calls is rejected: a leaf
that already holds a gradient must be cleared with :func:`zero_grad` first.
"""

import contextlib
import threading

import numpy as np

from smoothcert import kernels

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = threading.local()
_default_dtype = np.float32


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _default_dtype


def set_precision(name):
    """Set the dtype used for newly created floating tensors ("f32" or "f64")."""
    global _default_dtype
    _default_dtype = PRECISIONS[name]


@contextlib.contextmanager
def precision(name):
    global _default_dtype
    saved = _default_dtype
    _default_dtype = PRECISIONS[name]
    try:
        yield
    finally:
        _default_dtype = saved


def grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    saved = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor(np.asarray(data))
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        s = a.data.dtype.type(b) if a.data.dtype.kind == "f" else b
        return _result(a.data * s, (a,), lambda g: (g * s,), "scale")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def gelu(x):
    """GELU with the tanh approximation (constants sqrt(2/pi) and 0.044715)."""
    y = kernels.gelu(x.data)
    return _result(y, (x,), lambda g: (kernels.gelu_backward(x.data, g),), "gelu")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh}


# --- shape ---------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _result(np.broadcast_to(x.data, shape), (x,),
                   lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# --- reductions ------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be 2-D and shared."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        lead = a.shape[:-1]
        y = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(y, (a, b), bw, "matmul")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} and weight {weight.shape} are not aligned")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data
    y = y.reshape(*lead, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bw, "linear")


# --- normalization / losses -----------------------------------------------

def softmax(x, scale=1.0):
    """Softmax of ``scale * x`` over the last axis (max-subtracted)."""
    x = as_tensor(x)
    y = kernels.softmax(x.data, scale)

    def bw(g):
        gx = kernels.softmax_backward(y, g)
        return (gx * gx.dtype.type(scale) if scale != 1.0 else gx,)

    return _result(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-6):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} needs gain/bias of shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    y, mu, rstd = kernels.layer_norm(x.data, gain.data, bias.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(g, x.data, gain.data, mu, rstd)
        return gx, gg, gb

    return _result(y, (x, gain, bias), bw, "layer_norm")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (batch, classes), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _result(loss, (logits,), bw, "cross_entropy")


# --- backward ----------------------------------------------------------------

def topological_order(root):
    """Nodes reachable from ``root`` with every node after its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf that requires a gradient."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise GraphError(f"backward needs a scalar loss, got {shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise GraphError("loss is detached: it was not produced from tensors requiring grad")
    order = topological_order(loss)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise GraphError("leaf already holds a gradient; call zero_grad() before backward()")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


def zero_grad(params):
    for p in params:
        p.grad = None


def finite_difference_check(f, params, h=1e-4, max_coords=None, rng=None, abs_floor=1e-8, stencil=2):
    """Max relative error between backward() gradients and central differences.

    ``stencil=2`` is the usual ``(f(p+h) - f(p-h)) / 2h``; ``stencil=4`` uses the
    fourth-order five-point formula, whose truncation error is O(h^4) instead
    of O(h^2). That matters for high-curvature coordinates (small-norm tokens
    feeding a layer norm) where the two-point error dominates at h=1e-4.

    ``f`` is a zero-argument callable returning a scalar Tensor. When both the
    analytic and numeric derivative are below ``abs_floor`` the absolute error
    is used for that coordinate. ``max_coords`` samples at most that many
    coordinates per tensor.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_difference_check needs float64 parameters")
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]

                def at(step):
                    flat[i] = orig + step
                    return f().item()
                if stencil == 2:
                    num = (at(h) - at(-h)) / (2 * h)
                else:
                    num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
                flat[i] = orig
                a = ga.reshape(-1)[i]
                scale = max(abs(a), abs(num))
                err = abs(a - num) if scale < abs_floor else abs(a - num) / scale
                worst = max(worst, err)
    return worst
