"""CSV writers and readers shared by the CLI commands."""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy import stats

from app.errors import DataIOError, FormatError
from app.models import Spectrum, TheoryResult

logger = logging.getLogger(__name__)


def fmt(value) -> str:
    """17 significant digits so floats parse back losslessly."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence], footer: Sequence[Sequence] = ()) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
            for row in footer:
                writer.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}")
    logger.info("wrote %s", path)
    return path


def read_rows(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise FormatError(f"{path}: empty CSV file")
            return list(reader)
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}")


def write_gram_csv(path: Path, k: np.ndarray) -> Path:
    k = np.atleast_2d(k)
    return write_rows(path, [f"c{j}" for j in range(k.shape[1])], k.tolist())


def write_spectrum_csv(path: Path, spectrum: Spectrum) -> Path:
    rows = zip(range(spectrum.n_nonzero), spectrum.eta, spectrum.v_bar_sq)
    return write_rows(path, ["rho", "eta", "v_bar_sq_total"], rows)


THEORY_FOOTER = ("kappa", "gamma", "null_power", "e_null", "e_g")


def write_theory_report(path: Path, spectrum: Spectrum, tr: TheoryResult) -> Path:
    rows = zip(range(spectrum.n_nonzero), spectrum.eta, spectrum.v_bar_sq, tr.e_rho)
    e_g = tr.e_g if tr.e_g is not None else float("nan")
    values = (tr.kappa, tr.gamma, spectrum.null_power, tr.e_null, e_g)
    return write_rows(path, ["rho", "eta", "v_bar_sq", "e_rho"], rows, footer=list(zip(THEORY_FOOTER, values)))


def read_theory_footer(path: Path) -> Dict[str, float]:
    """The footer lines (kappa, gamma, null_power, e_null, e_g) of a theory report."""
    footer = {}
    for row in read_rows(path):
        if row["rho"] in THEORY_FOOTER:
            footer[row["rho"]] = float(row["eta"])
    missing = set(THEORY_FOOTER) - footer.keys()
    if missing:
        raise FormatError(f"{path}: theory report is missing footer lines {sorted(missing)}")
    return footer


def summarize(values: Sequence[float], confidence: float = 0.95) -> Dict[str, float]:
    """Mean, sample std and Student-t confidence half-width, ignoring NaN trials."""
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    n = arr.size
    if n == 0:
        return {"mean": math.nan, "std": math.nan, "ci95": math.nan, "n": 0}
    if n == 1:
        return {"mean": float(arr[0]), "std": math.nan, "ci95": math.nan, "n": 1}
    std = float(np.std(arr, ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1)) * std / math.sqrt(n)
    return {"mean": float(np.mean(arr)), "std": std, "ci95": half, "n": n}
