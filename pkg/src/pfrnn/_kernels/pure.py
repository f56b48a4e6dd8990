"""Pure numpy implementations of the hot element-wise kernels.

Same signatures as the compiled backend (`_fast`); the package works
identically on either, the compiled one just cuts per-call overhead and
temporary allocations in the inner training loop.
"""

import numpy as np

BACKEND = "pure"


def sigmoid(x):
    out = np.negative(x)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def sigmoid_grad(y, g):
    # y is the forward output
    return g * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_grad(y, g):
    return g * (1.0 - y * y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    # gradient at exactly 0 is defined as 0
    return np.where(x > 0.0, g, 0.0)


def scatter_add_rows(dst, idx, src):
    """dst[idx[m], :] += src[m, :] with repeated-index accumulation."""
    np.add.at(dst, idx, src)
