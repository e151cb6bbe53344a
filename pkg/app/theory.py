"""
Spectral learning-curve theory for kernel regression.

Given eigenvalues eta (descending) of the kernel under the data measure, P
training points and ridge lambda, the self-consistent scalar kappa solves

    kappa = lambda + sum_rho kappa * eta_rho / (kappa + P * eta_rho)

and with gamma = sum_rho P * eta_rho^2 / (kappa + P * eta_rho)^2 the modal
errors are E_rho = kappa^2 / ((1 - gamma) * (kappa + P * eta_rho)^2).
The generalization error is E_g = sum_rho v_bar_rho^2 * E_rho, plus the target
power outside the spectrum times e_null = 1 / (1 - gamma), the E_rho of a mode
with eta = 0.
"""

import logging
import math
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from app.errors import DomainError, NumericalError, TheoryDomainError
from app.models import TheoryResult

logger = logging.getLogger(__name__)

KAPPA_RTOL = 4 * np.finfo(float).eps
KAPPA_MAX_ITER = 500


def _check_spectrum(eta: np.ndarray, p_train: int, ridge: float) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 1 or eta.size == 0:
        raise DomainError("eta must be a non-empty 1-d array")
    if not np.all(np.isfinite(eta)) or np.any(eta < 0):
        raise DomainError("eta must be finite and non-negative")
    if not np.any(eta > 0):
        raise DomainError("eta is identically zero")
    if p_train < 1:
        raise DomainError(f"p_train must be >= 1, got {p_train}")
    if ridge < 0:
        raise DomainError(f"ridge must be >= 0, got {ridge}")
    return eta


def _root(fn, lo: float, hi: float, what: str) -> float:
    try:
        kappa, info = brentq(
            fn, lo, hi, xtol=1e-300, rtol=KAPPA_RTOL, maxiter=KAPPA_MAX_ITER, full_output=True
        )
    except (ValueError, RuntimeError) as exc:
        raise NumericalError(f"kappa root-finding failed for {what}: {exc}")
    if not info.converged:
        raise NumericalError(
            f"kappa did not converge for {what} after {info.iterations} iterations "
            f"(residual {fn(kappa):.3e})"
        )
    logger.debug("kappa=%.17g for %s in %d iterations", kappa, what, info.iterations)
    return float(kappa)


def solve_kappa(eta: np.ndarray, p_train: int, ridge: float = 0.0) -> float:
    eta = _check_spectrum(eta, p_train, ridge)
    pos = eta[eta > 0]
    p = float(p_train)
    total = float(np.sum(pos))

    if ridge > 0:
        def residual(kappa: float) -> float:
            return kappa - ridge - float(np.sum(kappa * pos / (kappa + p * pos)))

        return _root(residual, 0.0, ridge + total, f"ridge={ridge:g}, P={p_train}")

    if p_train >= pos.size:
        # More samples than modes: interpolation is exact
        return 0.0

    def divided(kappa: float) -> float:
        return float(np.sum(pos / (kappa + p * pos))) - 1.0

    return _root(divided, 0.0, total, f"ridge=0, P={p_train}, N={pos.size}")


def _null_error(gamma: float, p_train: int, n_pos: int, m_total: Optional[int]) -> float:
    """
    Error factor for unlearnable target power in the interpolating regime.

    Without a finite pool this is 1 / (1 - gamma) = P / (P - N). With P of
    m_total points drawn without replacement and the error averaged over the
    whole pool it becomes (P M - 2 N P + N^2) / ((M - N) (P - N)), which is 1
    when every point is trained on.
    """
    if m_total is not None and p_train >= m_total:
        return 1.0
    if p_train <= n_pos:
        return math.inf
    if m_total is None:
        return 1.0 / (1.0 - gamma)
    p, n, m = float(p_train), float(n_pos), float(m_total)
    return (p * m - 2.0 * n * p + n * n) / ((m - n) * (p - n))


def modal_errors(
    eta: np.ndarray, p_train: int, ridge: float = 0.0, m_total: Optional[int] = None
) -> TheoryResult:
    """
    kappa, gamma and E_rho for every mode. Modes with eta = 0, and target power
    outside the spectrum, get the error factor e_null.

    m_total, when given, is the size of the pool the P training points are
    drawn from; it only matters for the interpolating regime kappa = 0.
    """
    eta = np.asarray(eta, dtype=float)
    kappa = solve_kappa(eta, p_train, ridge)
    p = float(p_train)

    if kappa == 0.0:
        n_pos = int(np.count_nonzero(eta > 0))
        gamma = n_pos / p
        e_null = _null_error(gamma, p_train, n_pos, m_total)
        return TheoryResult(
            kappa=0.0,
            gamma=gamma,
            e_rho=np.where(eta > 0, 0.0, e_null),
            e_null=e_null,
            p_train=p_train,
            ridge=ridge,
        )

    denom = kappa + p * eta
    gamma = float(np.sum(p * eta ** 2 / denom ** 2))
    if gamma >= 1.0:
        raise TheoryDomainError(f"gamma = {gamma:.6g} >= 1: theory has no valid solution")

    return TheoryResult(
        kappa=kappa,
        gamma=gamma,
        e_rho=kappa ** 2 / ((1.0 - gamma) * denom ** 2),
        e_null=1.0 / (1.0 - gamma),
        p_train=p_train,
        ridge=ridge,
    )


def _null_term(tr: TheoryResult, null_power: float) -> float:
    if null_power < 0:
        raise DomainError(f"null_power must be >= 0, got {null_power}")
    if null_power == 0.0:
        return 0.0
    if not math.isfinite(tr.e_null):
        raise TheoryDomainError(
            f"unlearnable target power {null_power:.3g} diverges at P = N = {tr.p_train} with zero ridge"
        )
    return null_power * tr.e_null


def generalization_error(tr: TheoryResult, v_bar_sq: np.ndarray, null_power: float = 0.0) -> float:
    """E_g = sum v_bar^2 E_rho plus null_power * e_null."""
    v_bar_sq = np.asarray(v_bar_sq, dtype=float)
    if v_bar_sq.shape != tr.e_rho.shape:
        raise DomainError(
            f"v_bar_sq has {v_bar_sq.shape[0]} modes, theory has {tr.e_rho.shape[0]}"
        )
    carried = v_bar_sq > 0
    modes = float(np.dot(v_bar_sq[carried], tr.e_rho[carried]))
    if not math.isfinite(modes):
        raise TheoryDomainError(f"target power on zero modes diverges at P = N = {tr.p_train} with zero ridge")
    return max(modes + _null_term(tr, null_power), 0.0)


def predict(
    eta: np.ndarray,
    v_bar_sq: np.ndarray,
    p_train: int,
    ridge: float = 0.0,
    null_power: float = 0.0,
    m_total: Optional[int] = None,
) -> TheoryResult:
    """modal_errors with e_g filled in."""
    tr = modal_errors(eta, p_train, ridge, m_total)
    return tr.model_copy(update={"e_g": generalization_error(tr, v_bar_sq, null_power)})


def grad_eg(
    eta: np.ndarray, v_bar_sq: np.ndarray, p_train: int, ridge: float = 0.0, null_power: float = 0.0
) -> np.ndarray:
    """
    Analytic gradient dE_g/d eta_i.

    Differentiating the kappa equation gives
    d kappa/d eta_i = kappa^2 / ((1 - gamma) D_i^2) with D_i = kappa + P eta_i,
    and d gamma/d eta_i = 2 P kappa eta_i / D_i^3 - 2 P S3 d kappa/d eta_i with
    S3 = sum eta^2 / D^3. Collecting terms of E_g = (kappa^2 A + null_power) / (1 - gamma),
    A = sum v^2 / D^2, yields

        dE_g/d eta_i = 2 P kappa (eta_i E_g - kappa v_i^2) / ((1 - gamma) D_i^3)
                     + 2 P kappa^2 (kappa B - E_g S3) / ((1 - gamma)^2 D_i^2)

    where B = sum v^2 eta / D^3.
    """
    eta = np.asarray(eta, dtype=float)
    v = np.asarray(v_bar_sq, dtype=float)
    if v.shape != eta.shape:
        raise DomainError(f"v_bar_sq has shape {v.shape}, eta has shape {eta.shape}")

    tr = modal_errors(eta, p_train, ridge)
    kappa, gamma = tr.kappa, tr.gamma
    if kappa == 0.0:
        return np.zeros_like(eta)

    p = float(p_train)
    d = kappa + p * eta
    e_g = generalization_error(tr, v, null_power)
    s3 = float(np.sum(eta ** 2 / d ** 3))
    b = float(np.sum(v * eta / d ** 3))
    one_minus = 1.0 - gamma

    direct = 2.0 * p * kappa * (eta * e_g - kappa * v) / (one_minus * d ** 3)
    through_kappa = 2.0 * p * kappa ** 2 * (kappa * b - e_g * s3) / (one_minus ** 2 * d ** 2)
    return direct + through_kappa


def perturb_modal(d_eta: np.ndarray, alpha: float, eta_flat: float) -> np.ndarray:
    """First-order change of the modal errors around a flat spectrum with P/N = alpha."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if eta_flat <= 0:
        raise DomainError(f"eta_flat must be positive, got {eta_flat}")
    d_eta = np.asarray(d_eta, dtype=float)
    if np.any(np.diff(d_eta) > 0):
        raise DomainError("d_eta must be sorted non-increasing to keep the perturbed spectrum ordered")
    return -2.0 * (1.0 - alpha) * alpha * (d_eta - np.mean(d_eta)) / eta_flat


def eg_with_uniform_mode(
    eta: np.ndarray,
    eta0: float,
    v_bar_sq: np.ndarray,
    v0_sq: float,
    p_train: int,
    ridge: float = 0.0,
    noise_var: float = 0.0,
    null_power: float = 0.0,
    m_total: Optional[int] = None,
) -> float:
    """
    E_g with the uniform-eigenfunction mode eta0 split out of the spectrum.

    kappa and gamma are computed from the remaining modes only. With v0_sq = 0
    the result does not depend on eta0, which is why a constant kernel offset
    leaves predictions on zero-mean targets unchanged.
    """
    if eta0 < 0:
        raise DomainError(f"eta0 must be >= 0, got {eta0}")
    if v0_sq < 0 or noise_var < 0:
        raise DomainError("v0_sq and noise_var must be >= 0")
    eta = np.asarray(eta, dtype=float)
    v = np.asarray(v_bar_sq, dtype=float)
    if v.shape != eta.shape:
        raise DomainError(f"v_bar_sq has shape {v.shape}, eta has shape {eta.shape}")

    tr = modal_errors(eta, p_train, ridge, m_total)
    kappa, gamma = tr.kappa, tr.gamma
    p = float(p_train)
    unlearnable = generalization_error(tr, v, null_power) if kappa == 0.0 else _null_term(tr, null_power)

    if kappa == 0.0:
        if noise_var > 0 and gamma >= 1.0:
            raise TheoryDomainError("noise term diverges at P = N with zero ridge")
        noise_part = noise_var * float(np.count_nonzero(eta > 0)) / p
        return (noise_part / (1.0 - gamma) if noise_part else 0.0) + unlearnable

    d = kappa + p * eta
    modes = float(np.sum((kappa ** 2 * v + p * noise_var * eta ** 2) / d ** 2)) / (1.0 - gamma)
    uniform = (1.0 + gamma) / (1.0 - gamma) * kappa ** 2 * v0_sq / (kappa + 2.0 * p * eta0) ** 2
    return modes + uniform + unlearnable
