import logging
from typing import List

import numpy as np
from scipy.linalg import pinv

from app.errors import ConfigurationError
from app.kernel_core import sigma_star, tau_from_f
from app.models import BiasMode, FiniteNetSpec, KernelConfig, MCEstimate

logger = logging.getLogger(__name__)


def layer_rng(seed: int, trial: int, layer: int) -> np.random.Generator:
    """Counter-based stream per (seed, trial, layer); independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(trial, layer))))


def _quantile_relu(z: np.ndarray, f: float) -> np.ndarray:
    # Keep the top floor(f n) units of each row; the bias is the next largest value
    n = z.shape[1]
    k = int(np.floor(f * n))
    out = np.zeros_like(z)
    if k == 0:
        return out
    order = np.argsort(-z, axis=1, kind="stable")
    rows = np.arange(z.shape[0])[:, None]
    top = order[:, :k]
    bias = z[rows[:, 0], order[:, k]]
    out[rows, top] = np.maximum(z[rows, top] - bias[:, None], 0.0)
    return out


def finite_forward(x: np.ndarray, spec: FiniteNetSpec, trial: int = 0) -> np.ndarray:
    """
    Push a batch through a random sparse ReLU network and return the last layer.

    Weights are N(0, sigma^2 / n_{l-1}). In gaussian mode every input gets the
    bias b = (sigma / sqrt(n_{l-1})) * ||h|| * tau at each layer; in quantile
    mode the bias is chosen per input so exactly floor(f n_l) units fire.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("finite_forward inputs must be finite")
    tau = tau_from_f(spec.f)
    sigma = spec.sigma if spec.sigma is not None else sigma_star(tau)

    h = np.sqrt(x.shape[1]) * x if spec.dot_product_inputs else x
    for layer, width in enumerate(spec.widths, start=1):
        fan_in = h.shape[1]
        rng = layer_rng(spec.seed, trial, layer)
        weights = rng.standard_normal((fan_in, width)) * (sigma / np.sqrt(fan_in))
        z = h @ weights
        if spec.bias_mode is BiasMode.QUANTILE:
            h = _quantile_relu(z, spec.f)
        else:
            bias = (sigma / np.sqrt(fan_in)) * np.linalg.norm(h, axis=1) * tau
            h = np.maximum(z - bias[:, None], 0.0)
    return h


def finite_gram(x: np.ndarray, spec: FiniteNetSpec, trial: int = 0) -> np.ndarray:
    """Empirical last-layer kernel (1/n) H H^T."""
    h = finite_forward(x, spec, trial)
    return (h @ h.T) / h.shape[1]


def mc_kernel_estimate(
    x_p: np.ndarray,
    x_q: np.ndarray,
    config: KernelConfig,
    n_units: int,
    n_trials: int,
    seed: int = 0,
    bias_mode: BiasMode = BiasMode.GAUSSIAN,
) -> MCEstimate:
    """Monte-Carlo estimate of the single-layer kernel from independent wide layers."""
    if n_trials < 2:
        raise ConfigurationError(f"n_trials must be >= 2 for a standard error, got {n_trials}")
    spec = FiniteNetSpec(widths=[n_units], f=config.f, sigma=config.sigma, seed=seed, bias_mode=bias_mode)
    batch = np.vstack([np.asarray(x_p, dtype=float), np.asarray(x_q, dtype=float)])

    samples: List[float] = []
    for trial in range(n_trials):
        h = finite_forward(batch, spec, trial)
        samples.append(float(np.mean(h[0] * h[1])))
    values = np.asarray(samples) + config.offset

    estimate = MCEstimate(
        mean=float(np.mean(values)),
        stderr=float(np.std(values, ddof=1) / np.sqrt(n_trials)),
        n_units=n_units,
        n_trials=n_trials,
    )
    logger.debug("MC kernel f=%g: %.6g +- %.2g", config.f, estimate.mean, estimate.stderr)
    return estimate


def pseudo_inverse_readout(h_train: np.ndarray, y_train: np.ndarray, h_test: np.ndarray) -> np.ndarray:
    """Least-squares readout W = pinv(H_train) Y applied to H_test."""
    h_train = np.atleast_2d(np.asarray(h_train, dtype=float))
    h_test = np.atleast_2d(np.asarray(h_test, dtype=float))
    if h_test.shape[1] != h_train.shape[1]:
        raise ConfigurationError(
            f"h_test has {h_test.shape[1]} features, h_train has {h_train.shape[1]}"
        )
    readout = pinv(h_train) @ np.asarray(y_train, dtype=float)
    return h_test @ readout
