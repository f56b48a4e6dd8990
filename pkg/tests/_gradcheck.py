"""Central finite-difference gradient oracle shared by the test modules."""

import numpy as np

from pfrnn import autodiff as ad


def numeric_grad(loss_fn, params, eps=1e-5):
    """Central differences of loss_fn() w.r.t. each parameter tensor.

    loss_fn must rebuild the graph from the current parameter values on
    every call and return a scalar Tensor. Randomness inside loss_fn has
    to be frozen (replayed) or absent, otherwise the differences measure
    noise instead of the gradient.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def check_gradients(loss_fn, params, eps=1e-5, rtol=1e-4, atol=1e-6):
    """Compare reverse-mode gradients against central differences.

    Returns (max_rel_err, analytic, numeric); raises AssertionError on
    disagreement. Relative error uses max(|analytic|, |numeric|, atol)
    as the denominator, so coordinates below atol in magnitude are in
    effect judged absolutely (central differences of a float64 loss
    carry ~1e-11 of cancellation noise regardless of the true value).
    """
    analytic = ad.gradients(loss_fn(), params)
    numeric = numeric_grad(loss_fn, params, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
        rel = np.abs(a - n) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    if worst > rtol:
        raise AssertionError(f"gradient mismatch: max relative error {worst:.3e} > {rtol:.1e}")
    return worst, analytic, numeric
