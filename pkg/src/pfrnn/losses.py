"""Prediction loss, sampled evidence lower bound, and the combined objective.

The prediction loss scores the weighted-mean belief. The ELBO term
scores every particle chain and aggregates with a uniform 1/K log-mean;
particle weights deliberately do not enter it, they are trained through
the prediction term. Regression log-likelihood uses exp(-||y - yhat||)
with the Euclidean (not squared) norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class StepOutputs:
    """Per-step prediction bundle.

    mean_pred: (B, D) from the weighted mean particle. particle_preds:
    (B*K, D), particle k of row b at index b*K+k, produced by the same
    output layer. log_weights: (B, K) normalized.
    """

    mean_pred: ad.Tensor
    particle_preds: ad.Tensor
    log_weights: ad.Tensor

    def __post_init__(self):
        b, k = self.log_weights.data.shape
        if self.mean_pred.data.shape[0] != b:
            raise ad.ShapeError("mean_pred batch dim differs from log_weights")
        if self.particle_preds.data.shape[0] != b * k:
            raise ad.ShapeError("particle_preds rows != batch * particles")

    @property
    def n_batch(self):
        return self.log_weights.data.shape[0]

    @property
    def n_particles(self):
        return self.log_weights.data.shape[1]


@dataclass
class LossConfig:
    """task: regression | classification. output_steps None = every step
    (regression) / final step (classification). pred_weight 0 trains on
    the ELBO alone; beta 0 drops the ELBO."""

    task: str = "regression"
    beta: float = 1.0
    pred_weight: float = 1.0
    output_steps: tuple | None = None

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.pred_weight < 0:
            raise ValueError("pred_weight must be >= 0")


def _scored_steps(config, n_steps):
    if config.task == "classification":
        return [n_steps - 1]
    if config.output_steps is None:
        return list(range(n_steps))
    steps = sorted(set(int(s) for s in config.output_steps))
    if not steps:
        raise ValueError("output_steps is empty")
    if steps[0] < 0 or steps[-1] >= n_steps:
        raise ValueError(f"output_steps outside [0, {n_steps})")
    return steps


def _one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    logp = ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True))
    pick = ad.tsum(ad.mul(logp, ad.constant(_one_hot(labels, logits.data.shape[1]))),
                   axis=1)
    return ad.neg(ad.tmean(pick))


def pred_loss(outputs, targets, config):
    """Prediction loss on the mean-particle output.

    Regression: squared error summed over dims and scored steps, mean
    over batch. Classification: cross-entropy at the final step.
    """
    if not outputs:
        raise ValueError("no step outputs")
    steps = _scored_steps(config, len(outputs))
    if config.task == "classification":
        return _cross_entropy(outputs[-1].mean_pred, targets)
    b = outputs[0].n_batch
    total = None
    for t in steps:
        diff = ad.sub(outputs[t].mean_pred, ad.constant(targets[t]))
        term = ad.tsum(ad.square(diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / b)


def _particle_logp(output, target, config):
    """Per-particle log-likelihood, shape (B, K)."""
    b, k = output.n_batch, output.n_particles
    if config.task == "classification":
        logits = output.particle_preds
        logp = ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True))
        labels = np.repeat(np.asarray(target, dtype=np.int64), k)
        pick = ad.tsum(ad.mul(logp, ad.constant(_one_hot(labels, logits.data.shape[1]))),
                       axis=1)
        return ad.reshape(pick, (b, k))
    y_rep = np.repeat(np.asarray(target, dtype=np.float64), k, axis=0)
    diff = ad.sub(output.particle_preds, ad.constant(y_rep))
    dist = ad.sqrt(ad.tsum(ad.square(diff), axis=1))
    return ad.reshape(ad.neg(dist), (b, k))


def elbo_loss(outputs, targets, config):
    """Sampled lower-bound loss: -sum_t [logsumexp_i log p_i - log K].

    Particles are averaged uniformly (1/K); gradients reach every
    particle chain through its own prediction.
    """
    if not outputs:
        raise ValueError("no step outputs")
    steps = _scored_steps(config, len(outputs))
    b = outputs[0].n_batch
    k = outputs[0].n_particles
    total = None
    for t in steps:
        target = targets if config.task == "classification" else targets[t]
        logp = _particle_logp(outputs[t], target, config)
        term = ad.tsum(ad.add_scalar(ad.logsumexp(logp, axis=1), -math.log(k)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(ad.neg(total), 1.0 / b)


def combined_loss(outputs, targets, config):
    """pred_weight * prediction loss + beta * ELBO loss."""
    if config.beta == 0.0:
        return (pred_loss(outputs, targets, config) if config.pred_weight == 1.0
                else ad.scale(pred_loss(outputs, targets, config), config.pred_weight))
    elbo = ad.scale(elbo_loss(outputs, targets, config), config.beta)
    if config.pred_weight == 0.0:
        return elbo
    pred = pred_loss(outputs, targets, config)
    if config.pred_weight != 1.0:
        pred = ad.scale(pred, config.pred_weight)
    return ad.add(pred, elbo)
