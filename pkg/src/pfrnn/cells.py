"""Particle-filter recurrent cells and their deterministic baselines.

A belief is a set of K weighted latent particles per batch row. Each
step applies the gated update to every particle with shared parameters,
injects reparameterized Gaussian noise into the candidate memory,
reweights particles with a learned observation function, and soft
resamples. Soft resampling draws ancestors from a mixture of the weight
distribution and a uniform, which keeps every weight positive and lets
gradients flow through the importance-ratio correction.

Particles are stored flattened: row b*K + k of `hidden` is particle k of
batch row b. Log-weights stay normalized (logsumexp zero per row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import BatchNorm, LinearLayer


class DegenerateBeliefError(ValueError):
    """Every particle in some batch row carries zero weight."""


@dataclass
class CellConfig:
    """Behavioral switches for a particle cell step."""

    n_particles: int
    alpha: float = 0.5
    resample: bool = True
    use_bn_relu: bool = True
    noise_logstd_min: float = -8.0
    noise_logstd_max: float = 2.0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.noise_logstd_min <= self.noise_logstd_max:
            raise ValueError("noise_logstd_min must not exceed noise_logstd_max")


class ParticleBelief:
    """Weighted particle set: hidden (B*K, H), log_weights (B, K).

    `cell` carries the extra memory vector of LSTM-style cells and is
    None for GRU-style cells.
    """

    def __init__(self, hidden, log_weights, cell=None):
        b, k = log_weights.data.shape
        if hidden.data.shape[0] != b * k:
            raise ad.ShapeError(
                f"hidden rows {hidden.data.shape[0]} != batch {b} * particles {k}"
            )
        if cell is not None and cell.data.shape != hidden.data.shape:
            raise ad.ShapeError("cell state shape differs from hidden shape")
        self.hidden = hidden
        self.cell = cell
        self.log_weights = log_weights
        self.n_batch = b
        self.n_particles = k
        self.hidden_dim = hidden.data.shape[1]

    def weights(self):
        """Normalized weights as a plain array (B, K)."""
        return np.exp(self.log_weights.data)

    def max_weight_error(self):
        """Largest |sum of weights - 1| over batch rows."""
        return float(np.abs(self.weights().sum(axis=1) - 1.0).max())


def initial_belief(n_batch, n_particles, hidden_dim, with_cell):
    """Zero states replicated K times, uniform log-weights (-log K)."""
    rows = n_batch * n_particles
    hidden = ad.constant(np.zeros((rows, hidden_dim)))
    cell = ad.constant(np.zeros((rows, hidden_dim))) if with_cell else None
    logw = ad.constant(np.full((n_batch, n_particles), -math.log(n_particles)))
    return ParticleBelief(hidden, logw, cell=cell)


# ---------------------------------------------------------------------------
# parameter containers


class PfLstmParams:
    """Shared per-particle parameters of the particle LSTM cell.

    gates: fused input/forget/output pre-activations (3H rows, forget
    slice bias 1.0); cand: candidate memory; noise: per-dimension
    log-std of the candidate noise; obs: scalar observation log-
    likelihood over [hidden, features]; bn: candidate normalizer.
    """

    def __init__(self, rng, feat_dim, hidden_dim):
        self.feat_dim = feat_dim
        self.hidden_dim = hidden_dim
        z = hidden_dim + feat_dim
        self.gates = LinearLayer(rng, z, 3 * hidden_dim)
        self.gates.bias.data[hidden_dim:2 * hidden_dim] = 1.0
        self.cand = LinearLayer(rng, z, hidden_dim)
        self.noise = LinearLayer(rng, z, hidden_dim)
        self.obs = LinearLayer(rng, z, 1)
        self.bn = BatchNorm(hidden_dim)

    def params(self):
        return (self.gates.params() + self.cand.params() + self.noise.params()
                + self.obs.params() + self.bn.params())

    def n_params(self):
        return sum(p.size for p in self.params())


class LstmParams:
    """Baseline LSTM parameters; BN present only for the BN-ReLU variant."""

    def __init__(self, rng, feat_dim, hidden_dim, use_bn_relu=False):
        self.feat_dim = feat_dim
        self.hidden_dim = hidden_dim
        z = hidden_dim + feat_dim
        self.gates = LinearLayer(rng, z, 3 * hidden_dim)
        self.gates.bias.data[hidden_dim:2 * hidden_dim] = 1.0
        self.cand = LinearLayer(rng, z, hidden_dim)
        self.bn = BatchNorm(hidden_dim) if use_bn_relu else None

    def params(self):
        out = self.gates.params() + self.cand.params()
        if self.bn is not None:
            out += self.bn.params()
        return out

    def n_params(self):
        return sum(p.size for p in self.params())


class PfGruParams:
    """Shared per-particle parameters of the particle GRU cell.

    gates: fused reset/update pre-activations (2H rows, update slice
    bias 1.0 so fresh cells favor keeping memory); cand: candidate over
    [r*hidden, features]; noise/obs/bn as in the LSTM variant.
    """

    def __init__(self, rng, feat_dim, hidden_dim):
        self.feat_dim = feat_dim
        self.hidden_dim = hidden_dim
        z = hidden_dim + feat_dim
        self.gates = LinearLayer(rng, z, 2 * hidden_dim)
        self.gates.bias.data[hidden_dim:2 * hidden_dim] = 1.0
        self.cand = LinearLayer(rng, z, hidden_dim)
        self.noise = LinearLayer(rng, z, hidden_dim)
        self.obs = LinearLayer(rng, z, 1)
        self.bn = BatchNorm(hidden_dim)

    def params(self):
        return (self.gates.params() + self.cand.params() + self.noise.params()
                + self.obs.params() + self.bn.params())

    def n_params(self):
        return sum(p.size for p in self.params())


class GruParams:
    """Baseline GRU parameters; BN present only for the BN-ReLU variant."""

    def __init__(self, rng, feat_dim, hidden_dim, use_bn_relu=False):
        self.feat_dim = feat_dim
        self.hidden_dim = hidden_dim
        z = hidden_dim + feat_dim
        self.gates = LinearLayer(rng, z, 2 * hidden_dim)
        self.gates.bias.data[hidden_dim:2 * hidden_dim] = 1.0
        self.cand = LinearLayer(rng, z, hidden_dim)
        self.bn = BatchNorm(hidden_dim) if use_bn_relu else None

    def params(self):
        out = self.gates.params() + self.cand.params()
        if self.bn is not None:
            out += self.bn.params()
        return out

    def n_params(self):
        return sum(p.size for p in self.params())


# ---------------------------------------------------------------------------
# step building blocks


def reparam_noise(features, noise_layer, logstd_min, logstd_max, rng):
    """Reparameterized noise xi = exp(clamp(logstd)) * eps, eps ~ N(0,1).

    eps enters the graph as a constant leaf, so backward carries only
    the pathwise derivative through the learned log-std.
    """
    logstd = ad.clamp(noise_layer(features), logstd_min, logstd_max)
    eps = ad.sample_gaussian(rng, logstd.data.shape)
    return ad.mul(ad.exp(logstd), eps)


def obs_loglik(x_feat, hidden, obs_layer):
    """Learned log-likelihood of the current features under each particle."""
    rows = hidden.data.shape[0]
    n_batch = x_feat.data.shape[0]
    k, rem = divmod(rows, n_batch)
    if rem:
        raise ad.ShapeError("particle rows not a multiple of the batch size")
    x_rep = ad.repeat_rows(x_feat, k) if k > 1 else x_feat
    logits = obs_layer(ad.concat([hidden, x_rep], axis=1))
    return ad.reshape(logits, (n_batch, k))


def weight_update(log_w, loglik):
    """Bayes-style reweighting in log space; output rows normalized."""
    combined = ad.add(log_w, loglik)
    if np.any(np.all(np.isneginf(combined.data), axis=1)):
        raise DegenerateBeliefError("all particle weights vanished in a batch row")
    return ad.sub(combined, ad.logsumexp(combined, axis=1, keepdims=True))


def soft_resample(belief, alpha, rng):
    """Resample ancestors from q = alpha*w + (1-alpha)/K (Eq-style mixture).

    States are gathered by ancestor index (gradients flow to ancestors);
    the new log-weight is the importance ratio log w_a - log q_a,
    renormalized. Returns (belief', ancestor index array (B, K)).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    b, k = belief.n_batch, belief.n_particles
    lw_flat = ad.reshape(belief.log_weights, (b * k, 1))
    # log q = logaddexp(log alpha + log w, log((1-alpha)/K)); the second
    # term is -inf at alpha=1, collapsing to classical resampling exactly
    mix = math.log((1.0 - alpha) / k) if alpha < 1.0 else -math.inf
    shifted = ad.add_scalar(lw_flat, math.log(alpha)) if alpha < 1.0 else lw_flat
    logq_flat = ad.logsumexp(
        ad.concat([shifted, ad.constant(np.full((b * k, 1), mix))], axis=1),
        axis=1, keepdims=True,
    )

    q = np.exp(logq_flat.data).reshape(b, k)
    q /= q.sum(axis=1, keepdims=True)
    ancestors = rng.multinomial_rows(q)
    flat_idx = (np.arange(b)[:, None] * k + ancestors).ravel()

    new_hidden = ad.gather_rows(belief.hidden, flat_idx)
    new_cell = ad.gather_rows(belief.cell, flat_idx) if belief.cell is not None else None
    ratio = ad.gather_rows(ad.sub(lw_flat, logq_flat), flat_idx)
    ratio = ad.reshape(ratio, (b, k))
    new_logw = ad.sub(ratio, ad.logsumexp(ratio, axis=1, keepdims=True))
    return ParticleBelief(new_hidden, new_logw, cell=new_cell), ancestors


def mean_particle(belief):
    """Weight-averaged hidden state (B, H); cell memory is not averaged."""
    b, k, h = belief.n_batch, belief.n_particles, belief.hidden_dim
    w_col = ad.reshape(ad.exp(belief.log_weights), (b * k, 1))
    weighted = ad.mul(belief.hidden, w_col)
    return ad.tsum(ad.reshape(weighted, (b, k, h)), axis=1)


def _set_mode(params, mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if params.bn is not None:
        params.bn.training = mode == "train"


# ---------------------------------------------------------------------------
# particle cell steps


def pf_lstm_step(belief, x_feat, params, config, rng, mode="train"):
    """One particle LSTM step; returns (belief', aux).

    aux holds the pre-resampling log-weights and hidden states (the raw
    particle set used for per-particle predictions) and the ancestor
    indices when resampling ran.
    """
    _set_mode(params, mode)
    k, h = belief.n_particles, belief.hidden_dim
    x_rep = ad.repeat_rows(x_feat, k) if k > 1 else x_feat
    z = ad.concat([belief.hidden, x_rep], axis=1)

    gates = ad.sigmoid(params.gates(z))
    i_gate = ad.narrow(gates, 1, 0, h)
    f_gate = ad.narrow(gates, 1, h, h)
    o_gate = ad.narrow(gates, 1, 2 * h, h)

    cand = ad.add(
        params.cand(z),
        reparam_noise(z, params.noise, config.noise_logstd_min,
                      config.noise_logstd_max, rng),
    )
    act = ad.relu(params.bn(cand)) if config.use_bn_relu else ad.tanh(cand)
    new_cell = ad.add(ad.mul(f_gate, belief.cell), ad.mul(i_gate, act))
    new_hidden = ad.mul(o_gate, ad.tanh(new_cell))

    return _reweight_and_resample(
        belief, new_hidden, new_cell, x_feat, params, config, rng
    )


def pf_gru_step(belief, x_feat, params, config, rng, mode="train"):
    """One particle GRU step; returns (belief', aux). No cell memory."""
    _set_mode(params, mode)
    k, h = belief.n_particles, belief.hidden_dim
    x_rep = ad.repeat_rows(x_feat, k) if k > 1 else x_feat
    z = ad.concat([belief.hidden, x_rep], axis=1)

    gates = ad.sigmoid(params.gates(z))
    r_gate = ad.narrow(gates, 1, 0, h)
    z_gate = ad.narrow(gates, 1, h, h)

    cand = ad.add(
        params.cand(ad.concat([ad.mul(r_gate, belief.hidden), x_rep], axis=1)),
        reparam_noise(z, params.noise, config.noise_logstd_min,
                      config.noise_logstd_max, rng),
    )
    act = ad.relu(params.bn(cand)) if config.use_bn_relu else ad.tanh(cand)
    keep = ad.mul(z_gate, belief.hidden)
    new_hidden = ad.add(ad.mul(ad.add_scalar(ad.neg(z_gate), 1.0), act), keep)

    return _reweight_and_resample(
        belief, new_hidden, None, x_feat, params, config, rng
    )


def _reweight_and_resample(belief, new_hidden, new_cell, x_feat, params, config, rng):
    loglik = obs_loglik(x_feat, new_hidden, params.obs)
    log_w = weight_update(belief.log_weights, loglik)
    aux = {"log_weights_pre": log_w, "hidden_pre": new_hidden, "ancestors": None}

    updated = ParticleBelief(new_hidden, log_w, cell=new_cell)
    if config.resample and belief.n_particles > 1:
        updated, ancestors = soft_resample(updated, config.alpha, rng)
        aux["ancestors"] = ancestors
    return updated, aux


# ---------------------------------------------------------------------------
# deterministic baselines (accept the particle param containers too, for
# same-weights comparisons: only .gates/.cand/.bn are read)


def lstm_step(hidden, cell, x_feat, params, use_bn_relu=False, mode="train"):
    """Standard gated LSTM update; BN-ReLU candidate when use_bn_relu."""
    _set_mode(params, mode)
    h = hidden.data.shape[1]
    z = ad.concat([hidden, x_feat], axis=1)
    gates = ad.sigmoid(params.gates(z))
    i_gate = ad.narrow(gates, 1, 0, h)
    f_gate = ad.narrow(gates, 1, h, h)
    o_gate = ad.narrow(gates, 1, 2 * h, h)
    cand = params.cand(z)
    act = ad.relu(params.bn(cand)) if use_bn_relu else ad.tanh(cand)
    new_cell = ad.add(ad.mul(f_gate, cell), ad.mul(i_gate, act))
    new_hidden = ad.mul(o_gate, ad.tanh(new_cell))
    return new_hidden, new_cell


def gru_step(hidden, x_feat, params, use_bn_relu=False, mode="train"):
    """Standard gated GRU update; BN-ReLU candidate when use_bn_relu."""
    _set_mode(params, mode)
    h = hidden.data.shape[1]
    z = ad.concat([hidden, x_feat], axis=1)
    gates = ad.sigmoid(params.gates(z))
    r_gate = ad.narrow(gates, 1, 0, h)
    z_gate = ad.narrow(gates, 1, h, h)
    cand = params.cand(ad.concat([ad.mul(r_gate, hidden), x_feat], axis=1))
    act = ad.relu(params.bn(cand)) if use_bn_relu else ad.tanh(cand)
    keep = ad.mul(z_gate, hidden)
    return ad.add(ad.mul(ad.add_scalar(ad.neg(z_gate), 1.0), act), keep)
