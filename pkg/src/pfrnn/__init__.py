"""Particle-filter recurrent networks for state estimation under uncertainty.

Gated recurrent cells (LSTM and GRU variants) that carry a weighted set
of latent particles instead of a single hidden vector, updated with
learned transition noise, observation-conditioned reweighting, and soft
differentiable resampling. Includes a synthetic maze localization task,
a classical bootstrap particle filter reference, and a small training
and evaluation harness.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend

__all__ = ["kernel_backend", "__version__"]
