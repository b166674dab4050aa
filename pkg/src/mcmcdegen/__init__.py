"""Gibbs samplers for cumulative link models with degeneracy diagnostics.

The package simulates ordinal (and binary probit) regression data, runs
data-augmentation Gibbs samplers in two latent parameterizations with and
without marginal augmentation by a working scale, and measures whether each
kernel actually moves: bounded-Lipschitz risks of the chain against a
reference posterior, one-step motion statistics at stationarity, and the
classification of kernels into locally consistent versus degenerate.
"""

from . import asymptotics, harness, kernels, metrics, model, sampling, svg

__version__ = "0.1.0"

__all__ = ["asymptotics", "harness", "kernels", "metrics", "model",
           "sampling", "svg", "__version__"]
