"""Command-line entry point: ``qhgm <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run that takes ``--out`` writes ``config.json`` (the resolved inputs)
next to its outputs; timestamps go only to ``run.log``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as qdata
from .hamiltonian import write_weights_csv
from .learn import TrainConfig, TrainReport, train_vqnet
from .metrics import METRIC_FIELDS, compute_metrics
from .model import ModelParams, SamplingDegeneracy, SynthConfig, generate_synthetic
from .povm import (ConstructionInfeasible, build_default_icpovm, build_icpovm_from_angles,
                   build_sic_povm, validation_report)
from .qcore import NotHermitianError

SEED_ENV = "QHL_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("qhgm")


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ------------------------------------------------------------------

def _load_json(path, what: str) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise DataError(f"{what} must be a JSON object")
    return d


def _resolve_seed(flag: int | None, file_value: int | None, default: int = 0) -> int:
    """Flag wins, then the QHL_SEED environment variable, then the config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(file_value) if file_value is not None else default


def _povm(args):
    if getattr(args, "sic", False):
        return build_sic_povm()
    if getattr(args, "angles", None):
        return build_icpovm_from_angles(args.angles)
    return build_default_icpovm()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _prepare_out(out: str) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(p / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return p


def _resolved(args, **extra) -> dict:
    d = {"subcommand": args.command}
    if getattr(args, "angles", None):
        d["povm_angles"] = list(args.angles)
    d.update(extra)
    return d


def _metrics_table(metrics: dict) -> str:
    width = max(len(k) for k in METRIC_FIELDS)
    return "\n".join(f"{k:<{width}}  {metrics[k]:.6g}" for k in METRIC_FIELDS)


def _read_params(path) -> ModelParams:
    d = _load_json(path, "parameter file")
    try:
        return ModelParams.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed parameter file {path}: {exc}") from None


# -- subcommands ----------------------------------------------------------------

def cmd_validate_povm(args) -> int:
    rep = validation_report(_povm(args))
    if args.out:
        out = _prepare_out(args.out)
        _dump(out / "povm_report.json", rep)
        _dump(out / "config.json", _resolved(args, sic=args.sic))
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    print(f"completeness residual      {rep['completeness_residual']:.3e}")
    print("min eigenvalues            " + " ".join(f"{v:.3e}" for v in rep["min_eigenvalues"]))
    print(f"Bloch norm residual        {rep['bloch_norm_residual']:.3e}")
    print(f"Bloch sum residual         {rep['bloch_sum_residual']:.3e}")
    print(f"frame min singular value   {rep['frame_min_singular_value']:.6f}")
    print("expression scores          " + " ".join(f"{v:.4f}" for v in rep["scores"]))
    return EXIT_OK


def cmd_gen(args) -> int:
    file_cfg = _load_json(args.config, "synthetic config")
    for key, val in (("n", args.n), ("n_times", args.n_times), ("n_cells", args.n_cells)):
        if val is not None:
            file_cfg[key] = val
    file_cfg["seed"] = _resolve_seed(args.seed, file_cfg.get("seed"))
    try:
        cfg = SynthConfig.from_dict(file_cfg)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid synthetic config: {exc}") from None
    out = _prepare_out(args.out)
    ds, truth = generate_synthetic(cfg, _povm(args))
    qdata.write_dataset(ds, out, compress=args.gzip)
    _dump(out / "truth.json", truth.to_dict())
    write_weights_csv(truth.weights, out / "truth_weights.csv")
    _dump(out / "config.json", _resolved(args, synth=cfg.to_dict(), gzip=args.gzip))
    log.info("generated n=%d N_t=%d N_c=%d into %s", cfg.n, cfg.n_times, cfg.n_cells, out)
    return EXIT_OK


def cmd_discretize(args) -> int:
    povm = _povm(args)
    genes, values, pt = qdata.read_expression_csv(args.input, args.pseudotime_column, require_pseudotime=False)
    bins = qdata.bins_for(povm)
    labels = qdata.discretize(values, bins)
    out = _prepare_out(args.out)
    qdata.write_expression_csv(out / "labels.csv", labels, genes, pt, fmt="%.17g")
    _dump(out / "bins.json", {"edges": bins.edges.tolist(), "scores": povm.scores.tolist()})
    _dump(out / "config.json", _resolved(args, input=str(args.input)))
    return EXIT_OK


def cmd_ingest(args) -> int:
    ds, genes = qdata.ingest_expression(args.input, _povm(args), args.n_times, args.pseudotime_column)
    out = _prepare_out(args.out)
    qdata.write_dataset(ds, out, compress=args.gzip)
    _dump(out / "genes.json", genes)
    _dump(out / "config.json", _resolved(args, input=str(args.input), n_times=args.n_times,
                                         pseudotime_column=args.pseudotime_column, n_cells=ds.n_cells))
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_json(args.config, "train config")
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size), ("lr_base", args.lr_base)):
        if val is not None:
            file_cfg[key] = val
    file_cfg["seed"] = _resolve_seed(args.seed, file_cfg.get("seed"))
    try:
        cfg = TrainConfig.from_dict(file_cfg)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid train config: {exc}") from None
    ds = qdata.read_dataset(args.data)
    truth = _read_params(args.truth) if args.truth else None
    povm = _povm(args)
    out = _prepare_out(args.out)
    rep = train_vqnet(ds, cfg, povm, truth)
    if not np.isfinite(rep.final_full_nll):
        raise ArithmeticError("training diverged (non-finite loss)")
    rep.write(out)
    _dump(out / "params.json", rep.final.to_dict())
    write_weights_csv(rep.final.weights, out / "weights.csv")
    _dump(out / "config.json", _resolved(args, data=str(args.data), truth=args.truth, train=cfg.to_dict()))
    log.info("training took %.2fs", rep.wall_clock_s)
    return EXIT_OK


def cmd_eval(args) -> int:
    fit_dir = Path(args.fit)
    params_path = fit_dir / "params.json" if fit_dir.is_dir() else fit_dir
    learned = _read_params(params_path)
    truth = _read_params(args.truth)
    metrics = compute_metrics(learned, truth, args.tol).to_dict()
    if args.out:
        out = _prepare_out(args.out)
        _dump(out / "metrics.json", metrics)
        _dump(out / "config.json", _resolved(args, fit=str(args.fit), truth=args.truth, tol=args.tol))
    print(json.dumps(metrics, indent=2) if args.json else _metrics_table(metrics))
    return EXIT_OK


def cmd_export_continuous(args) -> int:
    ds = qdata.read_dataset(args.data)
    seed = _resolve_seed(args.seed, None)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    values, times = qdata.dequantize_dataset(ds, _povm(args), rng)
    out = _prepare_out(args.out)
    qdata.write_expression_csv(out / "expression.csv", values, None, times)
    _dump(out / "config.json", _resolved(args, data=str(args.data), seed=seed))
    return EXIT_OK


def cmd_study(args) -> int:
    from .harness import ScalingGrid, run_scaling_study

    spec = _load_json(args.config, "study config")
    spec["master_seed"] = _resolve_seed(args.seed, spec.get("master_seed"))
    try:
        grid = ScalingGrid.from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid study config: {exc}") from None
    out = _prepare_out(args.out)
    result = run_scaling_study(grid, workers=args.threads)
    result.write(out)
    _dump(out / "config.json", _resolved(args, study=grid.to_dict()))
    failed = sum(1 for r in result.rows if r["error"])
    if failed:
        print(f"{failed} of {len(result.rows)} cells failed; see results.csv", file=sys.stderr)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON output and errors")
    common.add_argument("--threads", type=int, default=None,
                        help="worker/BLAS thread count (default: all cores; 1 gives bit-determinism)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")

    povm_opts = _Parser(add_help=False)
    povm_opts.add_argument("--angles", type=float, nargs=4, metavar="ALPHA",
                           help="build the POVM from four polar angles (radians) instead of the default")

    seed_opt = _Parser(add_help=False)
    seed_opt.add_argument("--seed", type=int, default=None,
                          help=f"rng seed (overrides {SEED_ENV} and the config file)")

    p = _Parser(prog="qhgm", description="Simulate and learn quantum Hamiltonian gene-expression models.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("validate-povm", parents=[common, povm_opts], help="check a POVM and print its report")
    s.add_argument("--sic", action="store_true", help="validate the symmetric tetrahedral POVM")
    s.add_argument("--out", help="also write povm_report.json here")
    s.set_defaults(func=cmd_validate_povm)

    s = sub.add_parser("gen", parents=[common, povm_opts, seed_opt], help="generate a synthetic dataset")
    s.add_argument("--config", help="SynthConfig JSON (n, n_times, n_cells, t_max, w_max, seed)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, help="override gene count")
    s.add_argument("--n-times", type=int, help="override number of time bins")
    s.add_argument("--n-cells", type=int, help="override cells per bin")
    s.add_argument("--gzip", action="store_true", help="gzip the dataset CSV body")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("discretize", parents=[common, povm_opts], help="label normalized expression values")
    s.add_argument("--input", required=True, help="CSV of genes in [0, 1] with optional pseudotime column")
    s.add_argument("--pseudotime-column", default="pseudotime", help="name of the pseudotime column")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_discretize)

    s = sub.add_parser("ingest", parents=[common, povm_opts], help="build a dataset from an expression CSV")
    s.add_argument("--input", required=True, help="CSV of genes in [0, 1] plus a pseudotime column")
    s.add_argument("--n-times", type=int, required=True, help="number of equal-population pseudotime bins")
    s.add_argument("--pseudotime-column", default="pseudotime", help="name of the pseudotime column")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--gzip", action="store_true", help="gzip the dataset CSV body")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common, povm_opts, seed_opt], help="fit a model to a dataset")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--truth", help="ground-truth parameter JSON for per-epoch metrics")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--epochs", type=int, help="override epochs")
    s.add_argument("--batch-size", type=int, help="override cells per bin per step")
    s.add_argument("--lr-base", type=float, help="override base learning rate")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="compare fitted parameters with a ground truth")
    s.add_argument("--fit", required=True, help="training output directory or params JSON")
    s.add_argument("--truth", required=True, help="ground-truth parameter JSON")
    s.add_argument("--tol", type=float, default=0.1, help="weight recovery tolerance")
    s.add_argument("--out", help="also write metrics.json here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-continuous", parents=[common, povm_opts, seed_opt],
                       help="dequantize a dataset into continuous expression values")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_export_continuous)

    s = sub.add_parser("study", parents=[common, seed_opt], help="run an (N_t, N_c) scaling grid")
    s.add_argument("--config", required=True, help="study JSON (n_times, n_cells, seeds, synth, protocol)")
    s.add_argument("--out", required=True, help="output directory for results.csv and aggregate.csv")
    s.set_defaults(func=cmd_study)
    return p


def _emit_error(args_json: bool, code: int, exc: BaseException, field: str | None = None) -> int:
    kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERIC: "numerical"}[code]
    print(f"error ({kind}): {exc}", file=sys.stderr)
    if args_json:
        print(json.dumps({"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc),
                                    "field": field, "exit_code": code}}))
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    want_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _emit_error(want_json, EXIT_USAGE, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    logging.getLogger().setLevel(logging.DEBUG)
    for h in logging.getLogger().handlers:
        if not isinstance(h, logging.FileHandler):
            h.setLevel(logging.WARNING - 10 * min(args.verbose, 2))
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        return _emit_error(args.json, EXIT_USAGE, UsageError("--threads must be >= 1"))
    args.threads = threads

    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        return _emit_error(args.json, EXIT_USAGE, exc)
    except (DataError, qdata.DatasetFormatError) as exc:
        return _emit_error(args.json, EXIT_DATA, exc, getattr(exc, "field", None))
    except (ConstructionInfeasible, SamplingDegeneracy, NotHermitianError, np.linalg.LinAlgError,
            ArithmeticError) as exc:
        return _emit_error(args.json, EXIT_NUMERIC, exc)
    except (ValueError, OSError) as exc:
        return _emit_error(args.json, EXIT_DATA, exc)
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
