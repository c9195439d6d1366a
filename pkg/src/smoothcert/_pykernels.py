"""Pure numpy versions of the row kernels (same signatures as ``_ckernels``)."""

import numpy as np

GELU_K = 0.7978845608028654
GELU_C = 0.044715


def softmax_rows(x, out, scale=1.0):
    np.subtract(x, x.max(axis=1, keepdims=True), out=out)
    if scale != 1.0:
        out *= scale
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy, out):
    dot = np.einsum("ij,ij->i", y, gy)[:, None]
    np.subtract(gy, dot, out=out)
    out *= y


def layer_norm_rows(x, gain, bias, eps, out, mean, rstd):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = np.einsum("ij,ij->i", xc, xc) / x.shape[1]
    r = 1.0 / np.sqrt(var + eps)
    np.multiply(xc, r[:, None], out=out)
    out *= gain
    out += bias
    mean[...] = mu
    rstd[...] = r


def layer_norm_rows_backward(gy, x, gain, mean, rstd, gx, ggain, gbias):
    xh = (x - mean[:, None]) * rstd[:, None]
    ggain += np.einsum("ij,ij->j", gy, xh)
    gbias += gy.sum(axis=0)
    g = gy * gain
    s1 = g.mean(axis=1, keepdims=True)
    s2 = np.einsum("ij,ij->i", g, xh)[:, None] / x.shape[1]
    np.subtract(g, s1, out=gx)
    gx -= xh * s2
    gx *= rstd[:, None]


def gelu(x, out):
    # x * sigmoid(2u) == 0.5 x (1 + tanh u); z**3 via multiplication (float32 pow is slow)
    u = x * x
    u *= GELU_C
    u += 1.0
    u *= x
    u *= -2.0 * GELU_K
    np.exp(u, out=u)
    u += 1.0
    np.divide(x, u, out=out)


def gelu_backward(x, gy, out):
    x2 = x * x
    u = x2 * GELU_C
    u += 1.0
    u *= x
    u *= -2.0 * GELU_K
    s = np.exp(u)
    s += 1.0
    np.reciprocal(s, out=s)
    du = x2 * (3.0 * GELU_C)
    du += 1.0
    du *= 2.0 * GELU_K
    # s + x s (1 - s) du
    t = 1.0 - s
    t *= s
    t *= x
    t *= du
    t += s
    np.multiply(gy, t, out=out)
