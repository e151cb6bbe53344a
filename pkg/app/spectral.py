"""
Eigen-analysis of Gram matrices under the discrete-uniform data measure.

Eigenvalues are divided by the number of non-zero eigenvalues N, eigenvectors
scaled by sqrt(M), and target coefficients are v_bar = Phi^T Y / sqrt(M) with
Phi the orthonormal eigenvectors.
Target power outside the retained modes is kept as null_power, so that
mean(sum y^2) = sum v_bar^2 + null_power.
"""

import logging
from typing import Tuple

import numpy as np
from scipy.linalg import eigh

from app.errors import DomainError, NumericalError
from app.models import Spectrum

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
NONZERO_RCOND = 1e-12


def decompose(k_full: np.ndarray, y_full: np.ndarray, rcond: float = NONZERO_RCOND) -> Spectrum:
    k = np.asarray(k_full, dtype=float)
    y = np.asarray(y_full, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DomainError(f"Gram matrix must be square, got shape {k.shape}")
    m = k.shape[0]
    if y.shape[0] != m:
        raise DomainError(f"targets have {y.shape[0]} rows, Gram has {m}")

    scale = max(1.0, float(np.max(np.abs(k)))) if k.size else 1.0
    asymmetry = float(np.max(np.abs(k - k.T))) if k.size else 0.0
    if asymmetry > SYMMETRY_TOL * scale:
        raise DomainError(f"Gram matrix is not symmetric (max |K - K^T| = {asymmetry:.3e})")

    evals, evecs = eigh(0.5 * (k + k.T))
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    top = float(evals[0])
    if top <= 0.0:
        raise NumericalError("Gram matrix has no positive eigenvalue")
    if evals[-1] < -PSD_TOL * top:
        raise NumericalError(
            f"PSD violation: eigenvalue {evals[-1]:.3e} below -{PSD_TOL:g} * {top:.3e}"
        )

    keep = evals > rcond * top
    n_nonzero = int(np.count_nonzero(keep))
    basis = evecs[:, keep]
    logger.debug("decomposed %dx%d Gram: %d non-zero eigenvalues", m, m, n_nonzero)

    root_m = np.sqrt(m)
    coeffs = basis.T @ y
    residual = y - basis @ coeffs
    return Spectrum(
        eta=evals[keep] / n_nonzero,
        phi=basis * root_m,
        v_bar=coeffs / root_m,
        m_total=m,
        n_nonzero=n_nonzero,
        null_power=float(np.sum(residual ** 2)) / m,
    )


def truncate(spectrum: Spectrum, rcond: float) -> Spectrum:
    """
    Drop modes with eta <= rcond * eta_max, moving their target power into
    null_power. Remaining eigenvalues are renormalized by the new mode count.
    """
    keep = spectrum.eta > rcond * spectrum.eta[0]
    n_kept = int(np.count_nonzero(keep))
    if n_kept == spectrum.n_nonzero:
        return spectrum
    dropped = float(np.sum(spectrum.v_bar[~keep] ** 2))
    logger.debug("truncated spectrum from %d to %d modes", spectrum.n_nonzero, n_kept)
    return Spectrum(
        eta=spectrum.eta[keep] * (spectrum.n_nonzero / n_kept),
        phi=spectrum.phi[:, keep],
        v_bar=spectrum.v_bar[keep],
        m_total=spectrum.m_total,
        n_nonzero=n_kept,
        null_power=spectrum.null_power + dropped,
    )


def reconstruct(spectrum: Spectrum) -> np.ndarray:
    """Inverse of decompose on the retained modes."""
    unit = spectrum.phi / np.sqrt(spectrum.m_total)
    return (unit * (spectrum.n_nonzero * spectrum.eta)) @ unit.T


def effective_dim(eta: np.ndarray) -> float:
    """Participation ratio of the eigenvalues with the leading one omitted."""
    eta = np.asarray(eta, dtype=float)
    if eta.size < 2:
        raise DomainError(f"effective dimension needs at least 2 eigenvalues, got {eta.size}")
    rest = eta[1:]
    denom = float(np.sum(rest ** 2))
    if denom == 0.0:
        return 0.0
    return float(np.sum(rest)) ** 2 / denom


def target_power_ed(v_bar: np.ndarray) -> float:
    """Participation ratio of the target power spectrum over all modes."""
    power = _power(v_bar)
    denom = float(np.sum(power ** 2))
    if denom == 0.0:
        raise DomainError("target has no power on the retained modes")
    return float(np.sum(power)) ** 2 / denom


def _power(v_bar: np.ndarray) -> np.ndarray:
    v = np.asarray(v_bar, dtype=float)
    return v ** 2 if v.ndim == 1 else np.sum(v ** 2, axis=1)


def alignment_curve(v_bar: np.ndarray) -> Tuple[np.ndarray, float]:
    """Cumulative normalized target power C(rho) and its mean (the AUC)."""
    power = _power(v_bar)
    total = float(np.sum(power))
    if total == 0.0:
        raise DomainError("alignment is undefined for an all-zero target")
    c_rho = np.minimum(np.cumsum(power) / total, 1.0)
    c_rho[-1] = 1.0
    return c_rho, float(np.mean(c_rho))
