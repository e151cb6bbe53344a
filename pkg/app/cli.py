"""
Experiment commands. Each cmd_* takes validated arguments, writes its CSV and
returns the rows it wrote so callers and tests can inspect them.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigvalsh

from app import reports
from app.config import get_grid_size
from app.data import parse_dataset, split_arrays, subsample
from app.database import create_db_and_tables, get_session
from app.errors import ConfigurationError, SparseNNGPError, VerificationFailure
from app.gram import iter_layers
from app.kernel_core import (
    INTERPOLATION_TOL,
    build_lookup,
    interpolation_error,
    kernel_single,
    load_lookup,
    load_or_build,
    read_lookup_header,
    save_lookup,
    table_path,
)
from app.models import (
    BiasMode,
    Dataset,
    EDRecord,
    ExperimentRun,
    FiniteNetSpec,
    GramPair,
    KernelConfig,
    LookupTable,
    SweepRecord,
    Spectrum,
    SweepSpec,
    TheoryRecord,
    TheoryResult,
)
from app.regression import PINV_RCOND, evaluate, krr_predict
from app.simulate import finite_forward, mc_kernel_estimate, pseudo_inverse_readout
from app.spectral import alignment_curve, decompose, effective_dim, target_power_ed, truncate
from app.theory import predict

logger = logging.getLogger(__name__)

NAN = float("nan")
Z_LIMIT = 4.0
SWEEP_HEADER = ["f", "L", "ridge", "trial", "accuracy", "mse", "ed"]
THEORY_HEADER = ["f", "L", "ridge", "mse_experiment", "e_g_theory"]
COMPARE_HEADER = [
    "dense_L", "dense_acc", "dense_std",
    "sparse_f", "sparse_L", "sparse_acc", "sparse_std",
    "dense_same_L_acc", "dense_same_L_std",
]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _tables(f_values: Iterable[float], grid_size: Optional[int], table_dir: Optional[Path]) -> Dict[float, LookupTable]:
    n = grid_size or get_grid_size()
    return {f: load_or_build(f, n, table_dir) for f in sorted(set(f_values))}


def _gram_ed(g: GramPair) -> float:
    eta = np.sort(eigvalsh(g.k_train))[::-1]
    return effective_dim(np.maximum(eta, 0.0)) if eta.size >= 2 else NAN


def _run_parallel(fn, tasks: Sequence, workers: int) -> List:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _record(command: str, spec: SweepSpec, records: Sequence) -> None:
    engine = create_db_and_tables()
    for session in get_session(engine):
        run = ExperimentRun(command=command, dataset=spec.dataset, seed=spec.seed)
        session.add(run)
        session.commit()
        session.refresh(run)
        for record in records:
            record.run_id = run.id
            session.add(record)
        session.commit()
        logger.info("recorded %d %s results under run %d", len(records), command, run.id)


def _split(ds: Dataset, p_train: int, seed: int, trial: int) -> Dataset:
    # Each trial draws its own training set
    return subsample(ds, p_train, seed + trial)


def _summary_rows(rows: List[Tuple]) -> List[Tuple]:
    groups: Dict[Tuple[float, int, float], List[Tuple]] = {}
    for row in rows:
        groups.setdefault(row[:3], []).append(row)
    out = []
    for key in sorted(groups):
        stats = [reports.summarize([r[i] for r in groups[key]]) for i in (4, 5, 6)]
        for name in ("mean", "std", "ci95"):
            out.append((*key, name, *(s[name] for s in stats)))
    return out


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(
    spec: SweepSpec,
    out: Path,
    table_dir: Optional[Path] = None,
    workers: int = 1,
    record: bool = False,
) -> List[Tuple]:
    """Accuracy, MSE and training-Gram ED over the f x L (x ridge) grid."""
    ds = parse_dataset(spec.dataset, spec.normalize)
    tables = _tables(spec.f_values, spec.grid_size, table_dir)
    depths = sorted(set(spec.depths))

    def run_cell(task: Tuple[float, int]) -> List[Tuple]:
        f, trial = task
        x_tr, y_tr, x_te, y_te, labels = split_arrays(_split(ds, spec.p_train, spec.seed, trial))
        config = KernelConfig(f=f)
        rows, done = [], set()
        try:
            for g in iter_layers(x_tr, x_te, config, depths, table=tables[f]):
                ed = _gram_ed(g)
                for ridge in spec.ridges:
                    try:
                        pred = evaluate(krr_predict(g, y_tr, ridge), y_te, labels)
                        rows.append((f, g.layer, ridge, trial, pred.accuracy, pred.mse, ed))
                    except SparseNNGPError as exc:
                        logger.warning("cell f=%g L=%d ridge=%g trial=%d failed: %s", f, g.layer, ridge, trial, exc.detail)
                        rows.append((f, g.layer, ridge, trial, NAN, NAN, ed))
                done.add(g.layer)
        except SparseNNGPError as exc:
            logger.warning("f=%g trial=%d stopped after depths %s: %s", f, trial, sorted(done), exc.detail)
        for depth in depths:
            if depth not in done:
                rows.extend((f, depth, ridge, trial, NAN, NAN, NAN) for ridge in spec.ridges)
        logger.info("sweep f=%g trial=%d done", f, trial)
        return rows

    tasks = [(f, trial) for f in sorted(set(spec.f_values)) for trial in range(spec.trials)]
    rows = sorted(row for cell in _run_parallel(run_cell, tasks, workers) for row in cell)
    reports.write_rows(out, SWEEP_HEADER, rows + _summary_rows(rows))

    if record:
        _record("sweep", spec, [
            SweepRecord(f=r[0], depth=r[1], ridge=r[2], trial=r[3], accuracy=r[4], mse=r[5], ed=r[6])
            for r in rows
        ])
    return rows


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

def cmd_theory(
    spec: SweepSpec,
    out: Path,
    table_dir: Optional[Path] = None,
    workers: int = 1,
    record: bool = False,
) -> List[Tuple]:
    """
    Measured KRR error against the predicted E_g on the full-data spectrum.

    Both quantities are averages over all M points of the dataset, the
    discrete-uniform measure the theory's spectrum is taken under.
    """
    ds = parse_dataset(spec.dataset, spec.normalize)
    tables = _tables(spec.f_values, spec.grid_size, table_dir)
    depths = sorted(set(spec.depths))
    x_all, y_all = ds.x, ds.y
    splits = [_split(ds, spec.p_train, spec.seed, trial).train_idx for trial in range(spec.trials)]

    def run_f(f: float) -> List[Tuple]:
        config = KernelConfig(f=f)
        rows, done = [], set()
        try:
            for g in iter_layers(x_all, x_all[:0], config, depths, table=tables[f]):
                k_full = g.k_train
                try:
                    spectrum = decompose(k_full, y_all)
                except SparseNNGPError as exc:
                    logger.warning("spectrum failed at f=%g L=%d: %s", f, g.layer, exc.detail)
                    spectrum = None
                for ridge in spec.ridges:
                    rows.append((f, g.layer, ridge, _measured_mse(k_full, y_all, splits, ridge),
                                 _predicted_eg(spectrum, spec.p_train, ridge, f, g.layer)))
                done.add(g.layer)
        except SparseNNGPError as exc:
            logger.warning("f=%g stopped after depths %s: %s", f, sorted(done), exc.detail)
        for depth in depths:
            if depth not in done:
                rows.extend((f, depth, ridge, NAN, NAN) for ridge in spec.ridges)
        logger.info("theory f=%g done", f)
        return rows

    rows = sorted(row for cell in _run_parallel(run_f, sorted(set(spec.f_values)), workers) for row in cell)
    reports.write_rows(out, THEORY_HEADER, rows)

    if record:
        _record("theory", spec, [
            TheoryRecord(f=r[0], depth=r[1], mse_experiment=r[3], e_g_theory=r[4]) for r in rows
        ])
    return rows


def _measured_mse(k_full: np.ndarray, y_all: np.ndarray, splits: List[np.ndarray], ridge: float) -> float:
    errors = []
    for train_idx in splits:
        g = GramPair(
            k_train=k_full[np.ix_(train_idx, train_idx)],
            k_cross=k_full[:, train_idx],
            train_norms_sq=np.diag(k_full)[train_idx],
            test_norms_sq=np.diag(k_full),
            layer=0,
        )
        try:
            mu = krr_predict(g, y_all[train_idx], ridge)
            errors.append(float(np.mean((mu - y_all) ** 2)))
        except SparseNNGPError as exc:
            logger.warning("KRR failed at ridge=%g: %s", ridge, exc.detail)
            errors.append(NAN)
    return float(np.mean(errors))


def _theory_for(spectrum: Spectrum, p_train: int, ridge: float) -> Tuple[Spectrum, TheoryResult]:
    """Theory on the modes the regression can use; the rest counts as unlearnable power."""
    if ridge == 0.0:
        # The ridgeless solve cannot use modes below its pseudo-inverse cutoff
        spectrum = truncate(spectrum, PINV_RCOND)
    tr = predict(
        spectrum.eta, spectrum.v_bar_sq, p_train, ridge,
        null_power=spectrum.null_power, m_total=spectrum.m_total,
    )
    return spectrum, tr


def _predicted_eg(spectrum, p_train: int, ridge: float, f: float, depth: int) -> float:
    if spectrum is None:
        return NAN
    try:
        return _theory_for(spectrum, p_train, ridge)[1].e_g
    except SparseNNGPError as exc:
        logger.warning("theory undefined at f=%g L=%d ridge=%g: %s", f, depth, ridge, exc.detail)
        return NAN


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(
    f_values: Sequence[float],
    theta_fractions: Sequence[float],
    n_units: int,
    n_trials: int,
    seed: int = 0,
    corrupt: float = 1.0,
    out: Optional[Path] = None,
) -> List[Tuple]:
    """
    Compare kernel_single with its Monte-Carlo estimate; angles are given as
    fractions of pi. corrupt scales the analytic kernel to check sensitivity.
    """
    rows = []
    for f in f_values:
        config = KernelConfig(f=f)
        for frac in theta_fractions:
            theta = frac * math.pi
            x_p = np.array([1.0, 0.0])
            x_q = np.array([math.cos(theta), math.sin(theta)])
            kernel = corrupt * kernel_single(x_p, x_q, config)
            est = mc_kernel_estimate(x_p, x_q, config, n_units, n_trials, seed)
            diff = est.mean - kernel
            if est.stderr > 0:
                z = diff / est.stderr
            else:
                z = 0.0 if abs(diff) <= 1e-12 else math.copysign(math.inf, diff)
            rows.append((f, frac, kernel, est.mean, est.stderr, z))
            print(f"f={f:<8g} theta={frac:g}pi  kernel={kernel:.8f}  mc={est.mean:.8f} +- {est.stderr:.2e}  z={z:+.2f}")

    if out is not None:
        reports.write_rows(out, ["f", "theta_over_pi", "kernel", "mc_mean", "mc_stderr", "z"], rows)
    worst = max(abs(r[5]) for r in rows) if rows else 0.0
    if worst > Z_LIMIT:
        raise VerificationFailure(f"Monte-Carlo disagreement: max |z| = {worst:.2f} > {Z_LIMIT:g}")
    return rows


# ---------------------------------------------------------------------------
# table
# ---------------------------------------------------------------------------

def cmd_table(
    action: str,
    f: Optional[float] = None,
    path: Optional[Path] = None,
    grid_size: Optional[int] = None,
    table_dir: Optional[Path] = None,
) -> Dict[str, float]:
    """Build a lookup cache file or inspect an existing one."""
    n = grid_size or get_grid_size()
    if action == "build":
        if f is None:
            raise ConfigurationError("table build needs --f")
        if path is None:
            if table_dir is None:
                raise ConfigurationError("table build needs --path or --table-dir")
            path = table_path(table_dir, f, n)
        table = build_lookup(f, n)
        save_lookup(table, path)
    elif action == "inspect":
        if path is None:
            if f is None or table_dir is None:
                raise ConfigurationError("table inspect needs --path, or --f with --table-dir")
            path = table_path(table_dir, f, n)
        table = load_lookup(path)
    else:
        raise ConfigurationError(f"unknown table action {action!r}")

    error = interpolation_error(table)
    header = read_lookup_header(path)
    info = {**header, "max_error": error}
    print(f"{path}: magic={header['magic']} version={header['version']} f={table.f:g} "
          f"sigma={table.sigma:.17g} nodes={len(table)} max interpolation error={error:.3e}")
    if error > INTERPOLATION_TOL:
        raise VerificationFailure(f"{path}: interpolation error {error:.3e} exceeds {INTERPOLATION_TOL:.0e}")
    return info


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _summary_cells(sweep_rows: List[Dict[str, str]]) -> Dict[Tuple[float, int], Dict[str, float]]:
    ridges = sorted({float(r["ridge"]) for r in sweep_rows})
    if not ridges:
        raise ConfigurationError("sweep file has no rows")
    cells: Dict[Tuple[float, int], Dict[str, float]] = {}
    for row in sweep_rows:
        if row["trial"] not in ("mean", "std") or float(row["ridge"]) != ridges[0]:
            continue
        cell = cells.setdefault((float(row["f"]), int(row["L"])), {})
        cell[row["trial"]] = float(row["accuracy"])
    return cells


def cmd_compare(sweep_csv: Path, out: Path) -> Tuple:
    """
    Best dense depth against the shallowest sparse cell that matches it.

    Uses the lowest ridge in the sweep file.
    """
    cells = _summary_cells(reports.read_rows(sweep_csv))
    dense = {L: c for (f, L), c in cells.items() if f == 0.5 and not math.isnan(c.get("mean", NAN))}
    if not dense:
        raise ConfigurationError(f"{sweep_csv} has no dense (f = 0.5) cells")
    dense_L = min(dense, key=lambda L: (-dense[L]["mean"], L))
    best = dense[dense_L]["mean"]

    sparse = [
        (L, -c["mean"], f) for (f, L), c in cells.items()
        if f < 0.5 and not math.isnan(c.get("mean", NAN)) and c["mean"] >= best
    ]
    if sparse:
        sparse_L, _, sparse_f = min(sparse)
        s_cell = cells[(sparse_f, sparse_L)]
        same = dense.get(sparse_L, {})
        row = (dense_L, best, dense[dense_L].get("std", NAN),
               sparse_f, sparse_L, s_cell["mean"], s_cell.get("std", NAN),
               same.get("mean", NAN), same.get("std", NAN))
    else:
        logger.warning("no sparse cell reaches the dense best accuracy %.4f", best)
        row = (dense_L, best, dense[dense_L].get("std", NAN), NAN, NAN, NAN, NAN, NAN, NAN)

    reports.write_rows(out, COMPARE_HEADER, [row])
    return row


# ---------------------------------------------------------------------------
# ed / spectrum
# ---------------------------------------------------------------------------

def cmd_ed(
    spec: SweepSpec,
    out: Path,
    table_dir: Optional[Path] = None,
    record: bool = False,
) -> List[Tuple]:
    """ED of the training Gram (leading eigenvalue omitted) over the f x L plane."""
    ds = parse_dataset(spec.dataset, spec.normalize)
    x_tr, *_ = split_arrays(_split(ds, spec.p_train, spec.seed, 0))
    tables = _tables(spec.f_values, spec.grid_size, table_dir)

    rows = []
    for f in sorted(set(spec.f_values)):
        config = KernelConfig(f=f)
        for g in iter_layers(x_tr, x_tr[:0], config, spec.depths, table=tables[f]):
            rows.append((f, g.layer, _gram_ed(g)))
    reports.write_rows(out, ["f", "L", "ed"], rows)

    if record:
        _record("ed", spec, [EDRecord(f=r[0], depth=r[1], ed=r[2]) for r in rows])
    return rows


def cmd_spectrum(
    spec: SweepSpec,
    out: Path,
    table_dir: Optional[Path] = None,
    gram_out: Optional[Path] = None,
) -> Dict[str, float]:
    """
    Spectrum CSV, alignment AUC and theory report for the first (f, L, ridge)
    of spec. gram_out, when given, receives the full M x M Gram.
    """
    f, depth, ridge = spec.f_values[0], spec.depths[0], spec.ridges[0]
    ds = parse_dataset(spec.dataset, spec.normalize)
    table = _tables([f], spec.grid_size, table_dir)[f]
    *_, g = iter_layers(ds.x, ds.x[:0], KernelConfig(f=f), [depth], table=table)
    if gram_out is not None:
        reports.write_gram_csv(gram_out, g.k_train)

    spectrum = decompose(g.k_train, ds.y)
    reports.write_spectrum_csv(out, spectrum)
    _, auc = alignment_curve(spectrum.v_bar)
    used, tr = _theory_for(spectrum, spec.p_train, ridge)
    out = Path(out)
    reports.write_theory_report(out.with_name(f"{out.stem}_theory.csv"), used, tr)

    result = {
        "n_nonzero": spectrum.n_nonzero,
        "null_power": used.null_power,
        "ed": effective_dim(spectrum.eta) if spectrum.n_nonzero >= 2 else NAN,
        "target_ed": target_power_ed(spectrum.v_bar),
        "auc": auc,
        "e_g": tr.e_g,
    }
    print(f"f={f:g} L={depth}: N={result['n_nonzero']} ED={result['ed']:.4f} "
          f"target ED={result['target_ed']:.4f} AUC={auc:.4f} E_g={tr.e_g:.6g}")
    return result


# ---------------------------------------------------------------------------
# finite
# ---------------------------------------------------------------------------

def cmd_finite(
    spec: SweepSpec,
    width: int,
    out: Path,
    bias_mode: BiasMode = BiasMode.QUANTILE,
) -> List[Tuple]:
    """Random finite sparse networks with a pseudo-inverse readout over f x L."""
    ds = parse_dataset(spec.dataset, spec.normalize)
    rows = []
    for trial in range(spec.trials):
        split = _split(ds, spec.p_train, spec.seed, trial)
        _, y_tr, _, y_te, labels = split_arrays(split)
        idx = np.concatenate([split.train_idx, split.test_idx])
        for f in sorted(set(spec.f_values)):
            for depth in sorted(set(spec.depths)):
                net = FiniteNetSpec(widths=[width] * depth, f=f, seed=spec.seed, bias_mode=bias_mode)
                h = finite_forward(ds.x[idx], net, trial)
                p = split.train_idx.size
                try:
                    pred = evaluate(pseudo_inverse_readout(h[:p], y_tr, h[p:]), y_te, labels)
                    rows.append((f, depth, trial, width, pred.accuracy, pred.mse))
                except SparseNNGPError as exc:
                    logger.warning("finite cell f=%g L=%d trial=%d failed: %s", f, depth, trial, exc.detail)
                    rows.append((f, depth, trial, width, NAN, NAN))
    rows.sort()
    reports.write_rows(out, ["f", "L", "trial", "width", "accuracy", "mse"], rows)
    return rows
