import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from app.errors import DomainError, SingularityError
from app.models import GramPair, Prediction

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-10


def _as_matrix(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y.reshape(-1, 1) if y.ndim == 1 else y


def _pinv_solve(k: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    evals, evecs = eigh(k)
    evals = evals + ridge
    top = float(np.max(evals)) if evals.size else 0.0
    keep = evals > PINV_RCOND * top
    if top <= 0.0 or not np.any(keep):
        raise SingularityError("kernel matrix is singular: every eigenvalue is below the cutoff")
    dropped = int(keep.size - np.count_nonzero(keep))
    if dropped:
        logger.warning("pseudo-inverse dropped %d of %d eigenvalues below cutoff", dropped, keep.size)
    v = evecs[:, keep]
    return v @ ((v.T @ y) / evals[keep, None])


def krr_predict(g: GramPair, y_train: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """
    Posterior mean of kernel ridge regression: K_cross (K_train + ridge I)^-1 Y.

    ridge > 0 goes through a Cholesky factorization. ridge == 0 uses the
    eigendecomposition pseudo-inverse with relative cutoff PINV_RCOND.
    A 1-d target gives a 1-d result.
    """
    if ridge < 0:
        raise DomainError(f"ridge must be >= 0, got {ridge}")
    y = _as_matrix(y_train)
    if y.shape[0] != g.n_train:
        raise DomainError(f"y_train has {y.shape[0]} rows, kernel has {g.n_train} training points")
    if g.k_cross.shape[1] != g.n_train:
        raise DomainError(f"k_cross has {g.k_cross.shape[1]} columns, expected {g.n_train}")

    if ridge > 0:
        try:
            factor = cho_factor(g.k_train + ridge * np.eye(g.n_train), lower=True)
            alpha = cho_solve(factor, y)
        except LinAlgError:
            logger.warning("Cholesky failed at ridge=%g, falling back to eigendecomposition", ridge)
            alpha = _pinv_solve(g.k_train, y, ridge)
    else:
        alpha = _pinv_solve(g.k_train, y)

    mu = g.k_cross @ alpha
    return mu[:, 0] if np.ndim(y_train) == 1 else mu


def predict_labels(mu: np.ndarray) -> np.ndarray:
    """Argmax labels (lowest index on ties); single-column outputs use the sign, 0 on ties."""
    mu = _as_matrix(mu)
    if mu.shape[1] == 1:
        return (mu[:, 0] > 0).astype(np.int64)
    return np.argmax(mu, axis=1).astype(np.int64)


def evaluate(mu: np.ndarray, y_test: np.ndarray, true_labels: np.ndarray) -> Prediction:
    mu_m = _as_matrix(mu)
    y_m = _as_matrix(y_test)
    true_labels = np.asarray(true_labels)
    if mu_m.shape != y_m.shape:
        raise DomainError(f"prediction shape {mu_m.shape} does not match target shape {y_m.shape}")
    if true_labels.shape[0] != mu_m.shape[0]:
        raise DomainError(f"{true_labels.shape[0]} labels for {mu_m.shape[0]} predictions")
    if mu_m.shape[0] == 0:
        raise DomainError("no test points to evaluate")

    labels = predict_labels(mu_m)
    if mu_m.shape[1] == 1:
        # {-1,+1} and {0,1} labelings compare the same way
        truth = (true_labels > 0).astype(np.int64)
    else:
        truth = true_labels.astype(np.int64)

    return Prediction(
        mu=mu_m,
        labels=labels,
        mse=float(np.mean((mu_m - y_m) ** 2)),
        accuracy=float(np.mean(labels == truth)),
    )
