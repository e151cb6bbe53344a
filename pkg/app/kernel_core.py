"""
Sparse NNGP kernel evaluation.

The single-layer kernel between inputs at angle theta is

    K = (sigma^2 / 2pi) |x_p| |x_q| (2 I(theta|tau) - tau sqrt(2pi) (1 + cos theta))

where tau is the standard-normal threshold that keeps a fraction f of the
units active. Internally everything goes through the reduced integral
J(theta|tau) = I(theta|tau) - tau sqrt(pi/2) (1 + cos theta), whose integrand
uses erfc and therefore does not cancel when tau is large.
"""
import functools
import logging
import struct
from pathlib import Path

import numpy as np
from scipy.special import erfc, erfinv, ndtr, owens_t, roots_legendre

from app.errors import ConfigurationError, DomainError, FormatError, NumericalError
from app.models import LookupTable

logger = logging.getLogger(__name__)

SQRT_2PI = np.sqrt(2.0 * np.pi)
SQRT_PI_2 = np.sqrt(np.pi / 2.0)

COSINE_CLAMP = 1e-12
TAU_ZERO = 1e-14
QUADRATURE_TOL = 1e-12
MIN_GRID_SIZE = 65
INTERPOLATION_TOL = 1e-6

_GL_ORDER = 24
_GL_NODES, _GL_WEIGHTS = roots_legendre(_GL_ORDER)
_MAX_PANELS = 4096

# Lookup cache file layout (little-endian)
TABLE_MAGIC = b"SNGP"
TABLE_VERSION = 1
_HEADER = struct.Struct("<4sIddI")


# ---------------------------------------------------------------------------
# Threshold and quadrature
# ---------------------------------------------------------------------------

def tau_from_f(f: float) -> float:
    """Threshold tau with standard-normal upper-tail mass f."""
    if not 0.0 < f <= 0.5:
        raise DomainError(f"sparsity f must lie in (0, 0.5], got {f}")
    tau = float(np.sqrt(2.0) * erfinv(1.0 - 2.0 * f))
    # Newton polish on the tail equation 0.5 erfc(tau / sqrt 2) = f
    for _ in range(3):
        residual = 0.5 * erfc(tau / np.sqrt(2.0)) - f
        density = np.exp(-0.5 * tau * tau) / SQRT_2PI
        if residual == 0.0 or density == 0.0:
            break
        tau += residual / density
    return max(tau, 0.0)


def _check_angles(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < -COSINE_CLAMP) or np.any(theta > np.pi + COSINE_CLAMP):
        raise DomainError(f"theta must lie in [0, pi], got range [{theta.min()}, {theta.max()}]")
    return np.clip(theta, 0.0, np.pi)


def _check_cosines(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    worst = float(np.max(np.abs(c))) if c.size else 0.0
    if worst > 1.0 + COSINE_CLAMP:
        raise DomainError(f"cosine outside [-1, 1] beyond clamp band: max |c| = {worst!r}")
    return np.clip(c, -1.0, 1.0)


def _reduced_integrand(phi: np.ndarray, theta: np.ndarray, tau: float) -> np.ndarray:
    s = np.sin(phi)
    st = np.sin(phi + theta)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = tau / (np.sqrt(2.0) * s)
        gauss = np.exp(-z * z)
        tail = erfc(z)
    out = 2.0 * st * s * gauss - tau * (st + s) * SQRT_PI_2 * tail
    return np.where(s > 0.0, out, 0.0)


def _composite_gauss_legendre(theta: np.ndarray, tau: float, panels: int) -> np.ndarray:
    half = 0.5 * (np.pi - theta)
    width = 1.0 / panels
    starts = np.arange(panels) * width
    u = (starts[:, None] + 0.5 * width * (_GL_NODES[None, :] + 1.0)).ravel()
    w = np.tile(_GL_WEIGHTS, panels) * 0.5 * width
    phi = half[:, None] * u[None, :]
    values = _reduced_integrand(phi, theta[:, None], tau)
    return half * (values @ w)


def reduced_integral(theta, tau: float) -> np.ndarray:
    """J(theta|tau) = I(theta|tau) - tau sqrt(pi/2) (1 + cos theta), vectorized over theta."""
    theta = np.atleast_1d(_check_angles(theta))
    if tau < TAU_ZERO:
        return 0.5 * ((np.pi - theta) * np.cos(theta) + np.sin(theta))

    panels = 2
    previous = _composite_gauss_legendre(theta, tau, panels)
    while panels < _MAX_PANELS:
        panels *= 2
        current = _composite_gauss_legendre(theta, tau, panels)
        change = float(np.max(np.abs(current - previous))) if theta.size else 0.0
        if change <= QUADRATURE_TOL:
            logger.debug("quadrature converged with %d panels (change %.3e)", panels, change)
            return current
        previous = current
    raise NumericalError(
        f"quadrature for I(theta|tau={tau}) did not converge; last refinement changed by {change:.3e}"
    )


def integral_I(theta, tau: float):
    """
    The one-dimensional integral I(theta|tau).

    Accepts a scalar or an array of angles in [0, pi]; returns the same shape.
    For tau = 0 this is the closed form ((pi - theta) cos theta + sin theta) / 2.
    """
    scalar = np.ndim(theta) == 0
    theta = np.atleast_1d(_check_angles(theta))
    if tau < 0:
        raise DomainError(f"tau must be >= 0, got {tau}")
    value = reduced_integral(theta, tau) + tau * SQRT_PI_2 * (1.0 + np.cos(theta))
    value = np.where(theta >= np.pi, 0.0, value)
    return float(value[0]) if scalar else value


def sigma_star(tau: float) -> float:
    """Weight scale that makes c = 1 a fixed point and norms layer-invariant."""
    denominator = float(reduced_integral(0.0, tau)[0])
    if not denominator > 0.0:
        raise NumericalError(f"sigma* undefined: I(0|tau) - tau sqrt(2pi) = {denominator!r} for tau={tau}")
    return float(np.sqrt(np.pi / denominator))


# ---------------------------------------------------------------------------
# Kernel and cosine map
# ---------------------------------------------------------------------------

def cosine_map(c, tau: float, sigma: float):
    """c' = (sigma^2 / 2pi) (2 I(arccos c | tau) - tau sqrt(2pi) (1 + c))."""
    scalar = np.ndim(c) == 0
    c = np.atleast_1d(_check_cosines(c))
    value = (sigma * sigma / np.pi) * reduced_integral(np.arccos(c), tau)
    value = np.where(c <= -1.0, 0.0, value)
    return float(value[0]) if scalar else value


def cosine_map_slope(c, tau: float, sigma: float):
    """
    Exact derivative of the cosine map with respect to c.

    By Price's theorem this is sigma^2 P(u > tau, v > tau) for standard normals
    with correlation c, written with Owen's T as Q(tau) - 2 T(tau, tan(theta/2)).
    """
    scalar = np.ndim(c) == 0
    c = np.atleast_1d(_check_cosines(c))
    theta = np.arccos(c)
    antiparallel = theta >= np.pi
    a = np.tan(0.5 * np.where(antiparallel, 0.0, theta))
    value = sigma * sigma * np.maximum(ndtr(-tau) - 2.0 * owens_t(tau, a), 0.0)
    value = np.where(antiparallel, 0.0, value)
    return float(value[0]) if scalar else value


def kernel_single(x_p: np.ndarray, x_q: np.ndarray, config) -> float:
    """Single hidden layer sparse NNGP kernel between two input vectors."""
    x_p = np.asarray(x_p, dtype=float)
    x_q = np.asarray(x_q, dtype=float)
    norm_p = float(np.linalg.norm(x_p))
    norm_q = float(np.linalg.norm(x_q))
    if norm_p == 0.0 or norm_q == 0.0:
        raise DomainError("kernel_single requires non-zero inputs")
    if not (np.isfinite(norm_p) and np.isfinite(norm_q)):
        raise DomainError("kernel_single requires finite inputs")
    c = float(np.clip(np.dot(x_p, x_q) / (norm_p * norm_q), -1.0, 1.0))
    return norm_p * norm_q * cosine_map(c, config.tau, config.sigma) + config.offset


def arccos_kernel_closed(theta, sigma: float = np.sqrt(2.0)):
    """Normalized f = 0.5 kernel (sigma^2 / 2pi) ((pi - theta) cos theta + sin theta)."""
    theta = _check_angles(theta)
    value = (sigma * sigma / (2.0 * np.pi)) * ((np.pi - theta) * np.cos(theta) + np.sin(theta))
    return float(value) if np.ndim(value) == 0 else value


def fixed_point(tau: float, sigma: float, tol: float = 1e-14, max_iter: int = 100_000) -> float:
    """Iterate the cosine map from c = 0 until it stops moving."""
    c = 0.0
    for _ in range(max_iter):
        nxt = cosine_map(c, tau, sigma)
        if abs(nxt - c) <= tol:
            return nxt
        c = nxt
    raise NumericalError(f"cosine map iteration did not converge for tau={tau}, sigma={sigma}")


# ---------------------------------------------------------------------------
# Lookup tables
# ---------------------------------------------------------------------------

def _table_from_nodes(f: float, sigma: float, c_grid: np.ndarray, c_out: np.ndarray) -> LookupTable:
    tau = tau_from_f(f)
    slope = cosine_map_slope(c_grid, tau, sigma)
    return LookupTable(f=f, sigma=sigma, c_grid=c_grid, c_out=c_out, slope=slope)


def interpolation_error(table: LookupTable, cosines=None) -> float:
    """Max |table(c) - cosine_map(c)| over the given cosines (midpoints between nodes by default)."""
    tau = tau_from_f(table.f)
    if cosines is None:
        t = np.arccos(-table.c_grid)
        cosines = -np.cos(0.5 * (t[1:] + t[:-1]))
    cosines = _check_cosines(cosines)
    return float(np.max(np.abs(table.evaluate(cosines) - cosine_map(cosines, tau, table.sigma))))


def build_lookup(f: float, grid_size: int = 2049, sigma: float | None = None) -> LookupTable:
    """
    Tabulate the cosine map for one sparsity level.

    Nodes are uniform in theta = arccos c, so they cluster towards both c = 1
    and c = -1. Interpolation is cubic Hermite with the exact slope.
    """
    if grid_size < MIN_GRID_SIZE:
        raise ConfigurationError(f"lookup grid needs at least {MIN_GRID_SIZE} nodes, got {grid_size}")
    tau = tau_from_f(f)
    if sigma is None:
        sigma = sigma_star(tau)
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")

    t = np.linspace(0.0, np.pi, grid_size)
    c_grid = -np.cos(t)
    c_grid[0], c_grid[-1] = -1.0, 1.0
    c_out = np.maximum(cosine_map(c_grid, tau, sigma), 0.0)
    drop = float(-np.min(np.diff(c_out)))
    if drop > 10 * QUADRATURE_TOL:
        raise NumericalError(f"cosine map is not monotone on the grid for f={f} (drop {drop:.3e})")
    # quadrature noise only
    c_out = np.maximum.accumulate(c_out)

    table = _table_from_nodes(f, sigma, c_grid, c_out)
    error = interpolation_error(table)
    if error > INTERPOLATION_TOL:
        raise ConfigurationError(
            f"lookup grid of {grid_size} nodes misses the interpolation bound: "
            f"measured error {error:.3e} > {INTERPOLATION_TOL:.0e}"
        )
    logger.info("built lookup table f=%.6g sigma=%.6g nodes=%d (max interp error %.2e)",
                f, sigma, grid_size, error)
    return table


@functools.lru_cache(maxsize=64)
def cached_lookup(f: float, grid_size: int = 2049, sigma: float | None = None) -> LookupTable:
    """In-process memo of build_lookup; tables are immutable so sharing is safe."""
    return build_lookup(f, grid_size, sigma)


def table_path(table_dir: Path, f: float, grid_size: int) -> Path:
    return Path(table_dir) / f"sngp_f{f:.6f}_n{grid_size}.sngp"


def save_lookup(table: LookupTable, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.f, table.sigma, len(table))
    payload += np.asarray(table.c_grid, dtype="<f8").tobytes()
    payload += np.asarray(table.c_out, dtype="<f8").tobytes()
    path.write_bytes(payload)
    logger.info("wrote lookup table %s", path)
    return path


def _read_table_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read lookup table {path}: {exc}")


def _unpack_header(raw: bytes, path: Path) -> tuple[bytes, int, float, float, int]:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, f, sigma, n = _HEADER.unpack_from(raw, 0)
    if magic != TABLE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TABLE_MAGIC!r}")
    if version != TABLE_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return magic, version, f, sigma, n


def read_lookup_header(path: Path) -> dict[str, object]:
    """Magic, format version, f, sigma and node count from a cache file header."""
    path = Path(path)
    magic, version, f, sigma, n = _unpack_header(_read_table_bytes(path), path)
    return {"magic": magic.decode("ascii"), "version": version, "f": f, "sigma": sigma, "nodes": n}


def load_lookup(path: Path) -> LookupTable:
    """Read a cache file, verifying magic, version, length and monotonicity."""
    path = Path(path)
    raw = _read_table_bytes(path)
    magic, version, f, sigma, n = _unpack_header(raw, path)
    expected = _HEADER.size + 16 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: length check failed, {len(raw)} bytes for {n} nodes (expected {expected})")
    if not (0.0 < f <= 0.5) or not sigma > 0.0:
        raise FormatError(f"{path}: header values out of range (f={f}, sigma={sigma})")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    c_grid, c_out = body[:n].copy(), body[n:].copy()
    if n < 2 or not (np.all(np.isfinite(c_grid)) and np.all(np.isfinite(c_out))):
        raise FormatError(f"{path}: non-finite or empty table body")
    if np.any(np.diff(c_grid) <= 0.0) or c_grid[0] < -1.0 or c_grid[-1] > 1.0:
        raise FormatError(f"{path}: monotonicity check failed for c_grid")
    if np.any(np.diff(c_out) < 0.0):
        raise FormatError(f"{path}: monotonicity check failed for c_out")
    return _table_from_nodes(f, sigma, c_grid, c_out)


def load_or_build(f: float, grid_size: int, table_dir: Path | None) -> LookupTable:
    """sigma* table for f from the on-disk cache, building and saving on a miss."""
    if table_dir is None:
        return cached_lookup(f, grid_size)
    path = table_path(table_dir, f, grid_size)
    if path.exists():
        logger.debug("loading cached lookup table %s", path)
        return load_lookup(path)
    table = cached_lookup(f, grid_size)
    save_lookup(table, path)
    return table
