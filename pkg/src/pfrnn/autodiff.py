"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt dynamically on every forward pass (sequence lengths
vary and resampling changes connectivity step to step), so nodes are
plain Python objects holding a closure that scatters the output gradient
into the parents. Sampling helpers return graph leaves: random draws and
ancestor indices are treated as constants, so backward propagates only
the pathwise (reparameterized) gradient term.

Conventions fixed for reproducibility: relu'(0) = 0, sqrt'(0) = 0,
clamp' = 0 outside the open interval.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Numeric-domain violation (e.g. log of a non-positive value)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(values):
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


class Tensor:
    """n-d float64 array, optionally recording its place in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.data = _asarray(values)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant leaf sharing this tensor's values."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    def accumulate_grad(self, g):
        if self.grad is None:
            # copy: g may be a shared buffer from the child node
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.full(self.data.shape, g)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the cells and losses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data, parents, backward_fn):
    """Result tensor; joins the graph only when gradients are wanted."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def constant(values):
    return Tensor(values, requires_grad=False)


def parameter(values):
    return Tensor(values, requires_grad=True)


def backward(loss):
    """Reverse accumulation from a scalar loss over the reachable graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss, params):
    """Run backward and return one gradient array per parameter.

    Parameters off every path from the loss get a zero gradient.
    Existing .grad buffers are cleared first.
    """
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def sub(a, b):
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b):
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def neg(a):
    def bwd(g):
        a.accumulate_grad(-g)

    return _node(-a.data, (a,), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        a.accumulate_grad(g * s)

    return _node(a.data * s, (a,), bwd)


def add_scalar(a, s):
    s = float(s)

    def bwd(g):
        a.accumulate_grad(g)

    return _node(a.data + s, (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(data, (a, b), bwd)


def linear(x, weight, bias):
    """x @ weight.T + bias in one node (weight stored out x in)."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} vs weight {weight.data.shape}")
    data = x.data @ weight.data.T
    data += bias.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _node(data, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    data = K.sigmoid(a.data)

    def bwd(g):
        a.accumulate_grad(K.sigmoid_grad(data, g))

    return _node(data, (a,), bwd)


def tanh(a):
    data = K.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(K.tanh_grad(data, g))

    return _node(data, (a,), bwd)


def relu(a):
    data = K.relu(a.data)

    def bwd(g):
        a.accumulate_grad(K.relu_grad(a.data, g))

    return _node(data, (a,), bwd)


def exp(a):
    data = np.exp(a.data)

    def bwd(g):
        a.accumulate_grad(g * data)

    return _node(data, (a,), bwd)


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    data = np.log(a.data)

    def bwd(g):
        a.accumulate_grad(g / a.data)

    return _node(data, (a,), bwd)


def sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    data = np.sqrt(a.data)

    def bwd(g):
        # sqrt'(0) := 0 keeps Euclidean-norm gradients finite at zero
        denom = np.where(data > 0.0, 2.0 * data, 1.0)
        a.accumulate_grad(np.where(data > 0.0, g / denom, 0.0))

    return _node(data, (a,), bwd)


def square(a):
    data = a.data * a.data

    def bwd(g):
        a.accumulate_grad(2.0 * a.data * g)

    return _node(data, (a,), bwd)


def clamp(a, lo, hi):
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        mask = (a.data > lo) & (a.data < hi)
        a.accumulate_grad(np.where(mask, g, 0.0))

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts, axis=0):
    if not parts:
        raise ShapeError("concat of empty list")
    datas = [p.data for p in parts]
    ref = list(datas[0].shape)
    for d in datas[1:]:
        s = list(d.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: non-axis dims differ ({d.shape} vs {datas[0].shape})")
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                p.accumulate_grad(g[tuple(sl)])

    return _node(data, tuple(parts), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(a.data[sl])

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sl] += g

    return _node(data, (a,), bwd)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _node(data, (a,), bwd)


def repeat_rows(a, k):
    """Repeat each row of a 2-d tensor k times (row i -> rows i*k..i*k+k-1)."""
    n, f = a.data.shape
    data = np.repeat(a.data, k, axis=0)

    def bwd(g):
        a.accumulate_grad(g.reshape(n, k, f).sum(axis=1))

    return _node(data, (a,), bwd)


def gather_rows(a, indices):
    """Output row j = input row indices[j]; backward scatters into ancestors."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-d tensor")
    n = a.data.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError(f"gather_rows index out of range [0, {n})")
    data = a.data[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        K.scatter_add_rows(a.grad, idx, np.ascontiguousarray(g))

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        data = np.asarray(data)

    def bwd(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        elif keepdims:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        else:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _node(data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis, keepdims=False):
    """log sum exp with max-subtraction; exact for |x| <= ~700."""
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf row stays -inf below
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.log(total) + m
    softmax = shifted / total
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        a.accumulate_grad(ge * softmax)

    return _node(np.ascontiguousarray(data), (a,), bwd)


# ---------------------------------------------------------------------------
# convolution (single image, valid padding)


def conv2d(x, kernels, stride=1):
    """Cross-correlate x[C,H,W] with kernels[F,C,kh,kw] -> [F,H',W']."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects x[C,H,W] and kernels[F,C,kh,kw]")
    c, h, w = x.data.shape
    f, kc, kh, kw = kernels.data.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernels {kc}")
    if kh > h or kw > w:
        raise ShapeError("conv2d kernel larger than input")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2 = x.data.strides
    patches = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(ho, wo, c, kh, kw),
        strides=(s1 * stride, s2 * stride, s0, s1, s2),
        writeable=False,
    )
    data = np.ascontiguousarray(
        np.tensordot(kernels.data, patches, axes=([1, 2, 3], [2, 3, 4]))
    )

    def bwd(g):
        if kernels.requires_grad:
            kernels.accumulate_grad(np.tensordot(g, patches, axes=([1, 2], [0, 1])))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    # contribution of kernel tap (i, j) to every input cell it touched
                    contrib = np.tensordot(g, kernels.data[:, :, i, j], axes=([0], [0]))
                    dx[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += (
                        contrib.transpose(2, 0, 1)
                    )
            x.accumulate_grad(dx)

    return _node(data, (x, kernels), bwd)


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Deterministic random source; same seed + same draw order = same values.

    Gaussians come from the Box-Muller transform of uniforms. `counter`
    tracks scalar draws (diagnostics / manifests only).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, lo, hi, shape=()):
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        self.counter += n
        out = self._gen.uniform(lo, hi, size=shape)
        return np.asarray(out, dtype=np.float64)

    def gaussian(self, shape=()):
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = self._gen.uniform(0.0, 1.0, size=m)
        u2 = self._gen.uniform(0.0, 1.0, size=m)
        self.counter += 2 * m
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1] avoids log(0)
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape)

    def integers(self, lo, hi, shape=()):
        n = int(np.prod(shape)) if shape else 1
        self.counter += n
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n):
        self.counter += n
        return self._gen.permutation(n)

    def multinomial_rows(self, probs):
        """One categorical draw per output slot: probs[b] -> K indices per row b."""
        probs = np.asarray(probs, dtype=np.float64)
        b, k = probs.shape
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = 1.0
        u = self.uniform(0.0, 1.0, (b, k))
        idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
        return np.minimum(idx, k - 1).astype(np.int64)


class TraceRecorder:
    """Wraps an RngStream, recording every draw for later replay."""

    def __init__(self, rng):
        self._rng = rng
        self.trace = []

    def _rec(self, value):
        self.trace.append(value)
        return value

    def uniform(self, lo, hi, shape=()):
        return self._rec(self._rng.uniform(lo, hi, shape))

    def gaussian(self, shape=()):
        return self._rec(self._rng.gaussian(shape))

    def multinomial_rows(self, probs):
        return self._rec(self._rng.multinomial_rows(probs))


class TraceReplay:
    """Replays a recorded draw sequence; sampled values become constants.

    During finite-difference checks this freezes both the Gaussian noise
    and the resampling ancestor indices, so perturbed evaluations see the
    exact same random realization.
    """

    def __init__(self, trace):
        self._trace = list(trace)
        self._pos = 0

    def _next(self, shape):
        value = self._trace[self._pos]
        self._pos += 1
        if shape is not None and tuple(value.shape) != tuple(shape):
            raise ValueError(f"trace replay shape mismatch: {value.shape} vs {shape}")
        return value

    def uniform(self, lo, hi, shape=()):
        return self._next(shape)

    def gaussian(self, shape=()):
        return self._next(shape)

    def multinomial_rows(self, probs):
        return self._next(np.asarray(probs).shape)


def sample_uniform(rng, lo, hi, shape):
    """Uniform draw as a constant graph leaf (no gradient)."""
    return constant(rng.uniform(lo, hi, shape))


def sample_gaussian(rng, shape):
    """Standard-normal draw as a constant graph leaf (no gradient)."""
    return constant(rng.gaussian(shape))
