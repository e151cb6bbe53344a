import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app import cli
from app.config import get_log_level, get_table_dir
from app.errors import EXIT_OK, ConfigurationError, SparseNNGPError
from app.models import BiasMode, SweepSpec

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigurationError instead of exiting."""

    def error(self, message: str):
        raise ConfigurationError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}")


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")


def _add_grid_flags(p: argparse.ArgumentParser, trials: bool = True) -> None:
    p.add_argument("--f-grid", type=_floats, required=True, help="sparsity values, e.g. 0.05,0.1,0.5")
    p.add_argument("--depth-grid", type=_ints, required=True, help="depths, e.g. 1,3,5")
    p.add_argument("--p-train", type=int, required=True)
    p.add_argument("--ridge", type=_floats, default=[0.0], help="ridge value(s), comma separated")
    if trials:
        p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="circulant:1500:2",
                   help="circulant:M:blocks | idx:<images>:<labels> | csv:<path>[:header]")
    p.add_argument("--normalize", action="store_true", help="scale every input to unit norm")
    p.add_argument("--grid-size", type=int, default=None, help="lookup table nodes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--table-dir", default=None)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sparse-nngp", description="Sparse NNGP kernel experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("sweep", help="KRR accuracy/MSE/ED over the f x L grid")
    _add_grid_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--record", action="store_true", help="also store results in the SQL ledger")

    p = sub.add_parser("theory", help="measured MSE against predicted E_g")
    _add_grid_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--record", action="store_true")

    p = sub.add_parser("ed", help="training-Gram effective dimensionality over f x L")
    _add_grid_flags(p, trials=False)
    p.add_argument("--record", action="store_true")

    p = sub.add_parser("spectrum", help="spectrum, alignment and theory report for one (f, L)")
    _add_grid_flags(p, trials=False)
    p.add_argument("--gram-out", type=Path, default=None, help="also write the full Gram matrix as CSV")

    p = sub.add_parser("finite", help="finite random networks with pseudo-inverse readout")
    _add_grid_flags(p)
    p.add_argument("--width", type=int, default=2000)
    p.add_argument("--bias-mode", choices=[m.value for m in BiasMode], default=BiasMode.QUANTILE.value)

    p = sub.add_parser("verify", help="Monte-Carlo check of the single-layer kernel")
    p.add_argument("--f-grid", type=_floats, default=[0.1, 0.3, 0.5])
    p.add_argument("--theta-grid", type=_floats, default=[0.0, 1.0 / 3.0, 0.5], help="angles as fractions of pi")
    p.add_argument("--width", type=int, default=100_000)
    p.add_argument("--trials", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", type=float, default=1.0, help="scale applied to the analytic kernel")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("table", help="build or inspect a lookup table cache file")
    p.add_argument("action", choices=["build", "inspect"])
    p.add_argument("--f", type=float, default=None)
    p.add_argument("--path", type=Path, default=None)
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--table-dir", default=None)

    p = sub.add_parser("compare", help="dense vs sparse summary from a sweep file")
    p.add_argument("sweep_csv", type=Path)
    p.add_argument("--out", type=Path, required=True)

    return parser


def _sweep_spec(args: argparse.Namespace) -> SweepSpec:
    return SweepSpec(
        f_values=args.f_grid,
        depths=args.depth_grid,
        ridges=args.ridge,
        p_train=args.p_train,
        trials=getattr(args, "trials", 1),
        seed=args.seed,
        dataset=args.dataset,
        normalize=args.normalize,
        grid_size=args.grid_size,
    )


def run(args: argparse.Namespace) -> None:
    if args.command == "sweep":
        cli.cmd_sweep(_sweep_spec(args), args.out, get_table_dir(args.table_dir), args.workers, args.record)
    elif args.command == "theory":
        cli.cmd_theory(_sweep_spec(args), args.out, get_table_dir(args.table_dir), args.workers, args.record)
    elif args.command == "ed":
        cli.cmd_ed(_sweep_spec(args), args.out, get_table_dir(args.table_dir), args.record)
    elif args.command == "spectrum":
        cli.cmd_spectrum(_sweep_spec(args), args.out, get_table_dir(args.table_dir), args.gram_out)
    elif args.command == "finite":
        cli.cmd_finite(_sweep_spec(args), args.width, args.out, BiasMode(args.bias_mode))
    elif args.command == "verify":
        cli.cmd_verify(args.f_grid, args.theta_grid, args.width, args.trials, args.seed, args.corrupt, args.out)
    elif args.command == "table":
        cli.cmd_table(args.action, args.f, args.path, args.grid_size, get_table_dir(args.table_dir))
    elif args.command == "compare":
        cli.cmd_compare(args.sweep_csv, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=get_log_level(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        run(args)
    except SparseNNGPError as exc:
        logger.error(exc.detail)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
