import logging
from typing import Iterable, Iterator, Optional

import numpy as np

from app.errors import DomainError, NumericalError
from app.kernel_core import COSINE_CLAMP, cached_lookup
from app.models import GramPair, KernelConfig, LookupTable

logger = logging.getLogger(__name__)


def _symmetrize(k: np.ndarray) -> np.ndarray:
    return 0.5 * (k + k.T)


def input_gram(x_train: np.ndarray, x_test: np.ndarray) -> GramPair:
    """Layer-0 Gram pair of raw dot products."""
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    x_test = np.asarray(x_test, dtype=float).reshape(-1, x_train.shape[1])

    for name, x in (("x_train", x_train), ("x_test", x_test)):
        zero_rows = np.flatnonzero(~np.any(x != 0.0, axis=1))
        if zero_rows.size:
            raise DomainError(f"{name} row {int(zero_rows[0])} has zero norm")

    k_train = _symmetrize(x_train @ x_train.T)
    k_cross = x_test @ x_train.T
    return GramPair(
        k_train=k_train,
        k_cross=k_cross,
        train_norms_sq=np.diag(k_train).copy(),
        test_norms_sq=np.einsum("ij,ij->i", x_test, x_test),
        layer=0,
    )


def _cosines(k: np.ndarray, left_sq: np.ndarray, right_sq: np.ndarray, lower: float, what: str) -> np.ndarray:
    c = k / np.sqrt(np.outer(left_sq, right_sq))
    if c.size:
        high = float(np.max(c)) - 1.0
        low = lower - float(np.min(c))
        violation = max(high, low)
        if violation > COSINE_CLAMP:
            raise NumericalError(
                f"numerical instability in {what}: cosine outside clamp band by {violation:.3e}"
            )
    return np.clip(c, -1.0, 1.0)


def propagate(g: GramPair, table: LookupTable, sigma: float) -> GramPair:
    """One layer of the deep kernel recursion, applied through the lookup table."""
    lower = -1.0 if g.layer == 0 else 0.0
    scale = (sigma / table.sigma) ** 2
    # map(1) read straight from the table's last node
    self_gain = float(table.c_out[-1]) * scale

    cos_train = _cosines(g.k_train, g.train_norms_sq, g.train_norms_sq, lower, "k_train")
    cos_cross = _cosines(g.k_cross, g.test_norms_sq, g.train_norms_sq, lower, "k_cross")

    p = g.n_train
    upper = np.triu_indices(p, k=1)
    mapped = np.empty((p, p))
    values = table.evaluate(cos_train[upper])
    mapped[upper] = values
    mapped[upper[1], upper[0]] = values
    np.fill_diagonal(mapped, float(table.c_out[-1]))

    train_norms_sq = g.train_norms_sq * self_gain
    test_norms_sq = g.test_norms_sq * self_gain
    k_train = scale * np.sqrt(np.outer(g.train_norms_sq, g.train_norms_sq)) * mapped
    np.fill_diagonal(k_train, train_norms_sq)
    if cos_cross.size:
        k_cross = scale * np.sqrt(np.outer(g.test_norms_sq, g.train_norms_sq)) * table.evaluate(cos_cross)
    else:
        k_cross = np.zeros(cos_cross.shape)

    return GramPair(
        k_train=k_train,
        k_cross=k_cross,
        train_norms_sq=train_norms_sq,
        test_norms_sq=test_norms_sq,
        layer=g.layer + 1,
    )


def with_offset(g: GramPair, offset: float) -> GramPair:
    """Add a constant to every kernel entry (bias-variance offset)."""
    if offset == 0.0:
        return g
    return GramPair(
        k_train=g.k_train + offset,
        k_cross=g.k_cross + offset,
        train_norms_sq=g.train_norms_sq + offset,
        test_norms_sq=g.test_norms_sq + offset,
        layer=g.layer,
    )


def iter_layers(
    x_train: np.ndarray,
    x_test: np.ndarray,
    config: KernelConfig,
    depths: Iterable[int],
    table: Optional[LookupTable] = None,
    grid_size: int = 2049,
) -> Iterator[GramPair]:
    """
    Yield the Gram pair at each requested depth, composing layers only once.

    The offset is applied to each yielded pair, never to the running recursion.
    """
    wanted = sorted(set(int(d) for d in depths))
    if not wanted or wanted[0] < 1:
        raise DomainError(f"depths must be >= 1, got {wanted}")
    if table is None:
        table = cached_lookup(config.f, grid_size)

    g = input_gram(x_train, x_test)
    for layer in range(1, wanted[-1] + 1):
        g = propagate(g, table, config.sigma)
        if layer in wanted:
            logger.debug("gram layer %d ready (P=%d, T=%d)", layer, g.n_train, g.n_test)
            yield with_offset(g, config.offset)


def gram_deep(
    x_train: np.ndarray,
    x_test: np.ndarray,
    config: KernelConfig,
    table: Optional[LookupTable] = None,
    grid_size: int = 2049,
) -> GramPair:
    """Layer-L Gram pair for config.depth, offset added once at the end."""
    *_, last = iter_layers(x_train, x_test, config, [config.depth], table=table, grid_size=grid_size)
    return last
