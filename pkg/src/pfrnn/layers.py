"""Trainable layers and optimization utilities on top of the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Uniform init on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


class LinearLayer:
    """Affine map x -> x @ W.T + b with weight stored (out, in)."""

    def __init__(self, rng, in_features, out_features, bias_init=0.0):
        self.in_features = in_features
        self.out_features = out_features
        w = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.full(out_features, float(bias_init)))

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]

    def n_params(self):
        return self.weight.size + self.bias.size


class ConvLayer:
    """2-d convolution over a single [C, H, W] image, valid padding."""

    def __init__(self, rng, in_channels, out_channels, ksize, stride=1):
        self.stride = stride
        fan_in = in_channels * ksize * ksize
        fan_out = out_channels * ksize * ksize
        k = glorot_uniform(rng, (out_channels, in_channels, ksize, ksize), fan_in, fan_out)
        self.kernels = ad.parameter(k)
        self.bias = ad.parameter(np.zeros(out_channels))

    def __call__(self, x):
        out = ad.conv2d(x, self.kernels, stride=self.stride)
        return ad.add(out, ad.reshape(self.bias, (self.bias.size, 1, 1)))

    def params(self):
        return [self.kernels, self.bias]

    def n_params(self):
        return self.kernels.size + self.bias.size


class BatchNorm:
    """Batch normalization over axis 0 of a 2-d input.

    Training mode normalizes with batch statistics and tracks running
    estimates (exponential average, unbiased variance in the running
    buffer, biased in the normalizer). Eval mode uses the running
    buffers as constants.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.training = True

    def params(self):
        return [self.gamma, self.beta]

    def n_params(self):
        return 2 * self.dim

    def state(self):
        return {"running_mean": self.running_mean.copy(),
                "running_var": self.running_var.copy()}

    def load_state(self, state):
        self.running_mean = np.array(state["running_mean"], dtype=np.float64)
        self.running_var = np.array(state["running_var"], dtype=np.float64)

    def __call__(self, x):
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ad.ShapeError(f"batch norm expects (N, {self.dim}), got {x.data.shape}")
        if self.training:
            return self._train_node(x)
        return self._eval_node(x)

    def _train_node(self, x):
        xd = x.data
        n = xd.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs at least 2 rows")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = np.mean(xc * xc, axis=0)
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * ivar
        data = self.gamma.data * xhat + self.beta.data

        unbiased = var * (n / (n - 1)) if n > 1 else var
        self.running_mean += self.momentum * (mu - self.running_mean)
        self.running_var += self.momentum * (unbiased - self.running_var)

        gamma, beta = self.gamma, self.beta

        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                dx = (ivar / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
                x.accumulate_grad(dx)

        return ad._node(data, (x, gamma, beta), bwd)

    def _eval_node(self, x):
        ivar = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x.data - self.running_mean) * ivar
        data = self.gamma.data * xhat + self.beta.data
        gamma, beta = self.gamma, self.beta

        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate_grad(g * gamma.data * ivar)

        return ad._node(data, (x, gamma, beta), bwd)


class RmsProp:
    """RMSProp with a running mean of squared gradients.

    Update: s <- rho*s + (1-rho)*g^2 ; p <- p - lr * g / (sqrt(s) + eps).
    """

    def __init__(self, params, lr, rho=0.99, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list length does not match parameter list")
        for i, g in enumerate(grads):
            if np.any(np.isnan(g)):
                raise FloatingPointError(f"NaN gradient for parameter {i}")
        for p, g, s in zip(self.params, grads, self.sq):
            s *= self.rho
            s += (1.0 - self.rho) * g * g
            p.data -= self.lr * g / (np.sqrt(s) + self.eps)

    def state(self):
        return {"sq": [s.copy() for s in self.sq]}

    def load_state(self, state):
        loaded = state["sq"]
        if len(loaded) != len(self.sq):
            raise ValueError("optimizer state length mismatch")
        self.sq = [np.array(s, dtype=np.float64) for s in loaded]


def clip_grad_norm(grads, max_norm):
    """Scale the gradient list in place so its global L2 norm <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm
