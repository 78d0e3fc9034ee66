# File: src/mragp/cli.py
# pylint: disable=duplicate-code

"""CLI interface for mragp: simulate, fit, predict, score and benchmark."""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, config_hash, load_config
from .data_io import (
    Dataset,
    Provenance,
    append_rows,
    read_dataset,
    read_json,
    read_provenance,
    save_run_record,
    write_csv,
    write_dataset,
    write_json,
    write_predictions,
    write_trace,
)
from .errors import ConfigError, DataError, GeometryError, MRAError, NumericalError, PatternError
from .experiments import (
    BENCHMARK_KEY,
    PredictionRun,
    benchmark_frame,
    close_approximation_times,
    components_from_config,
    load_dataset,
    run_benchmark,
    run_fit,
    run_predict,
    score_split,
    simulate_dataset,
    split_from_config,
    true_parameters,
)
from .inference import FitResult, ParameterVector

EXIT_OK = 0
EXIT_IO = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def setup_logging(verbose: bool) -> None:
    """Configure logging based on verbosity level."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )


def parse_args(args=None) -> argparse.Namespace:
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c",
        "--config",
        type=Path,
        default=None,
        help="Experiment configuration file (TOML, JSON or YAML; default: built-in defaults)",
    )
    common.add_argument("--seed", type=int, default=None, help="Override [data] seed")
    common.add_argument(
        "-o", "--out", type=Path, default=None, help="Output directory (overrides [output])"
    )
    common.add_argument(
        "--threads",
        type=int,
        default=1,
        help="Worker budget for replicates, grid points and stage updates (default: 1)",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")

    parser = argparse.ArgumentParser(
        description="Multi-resolution approximations of Gaussian processes."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("simulate", parents=[common], help="Simulate data on a grid and write a CSV")
    sub.add_parser("fit", parents=[common], help="Maximum-likelihood fit on the training split")
    sub.add_parser("predict", parents=[common], help="Kriging means and sds at all locations")
    sub.add_parser("score", parents=[common], help="Log-score, RMSPE and CRPS per test set")
    sub.add_parser("benchmark", parents=[common], help="Time and score a grid of M-RA versions")
    parsed = parser.parse_args(args)
    if parsed.threads < 1:
        parser.error("--threads must be at least 1")
    return parsed


def resolve_config(
    config_path: Optional[Path], seed: Optional[int] = None, out: Optional[Path] = None
) -> ExperimentConfig:
    """Load a configuration and apply the command line overrides."""
    config = load_config(config_path)
    if seed is not None:
        config.data.seed = seed
    if out is not None:
        config.output.directory = str(out)
    return config


def _provenance(config: ExperimentConfig) -> Provenance:
    return Provenance(config_hash(config), config.data.seed)


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_record(config: ExperimentConfig) -> Path:
    path = _out_dir(config) / config.output.resolved_file
    return save_run_record(path, config.to_dict(), _provenance(config))


def replicate_path(path: Path, replicate: int) -> Path:
    """Replicate 0 keeps the configured name; others get a _rep<k> suffix."""
    if replicate == 0:
        return path
    return path.with_name(f"{path.stem}_rep{replicate}{path.suffix}")


def _dataset_for_run(config: ExperimentConfig) -> Dataset:
    """The configured CSV, or the simulated data file of this run (written on first use)."""
    if config.data.source == "csv":
        return load_dataset(config, config.data.seed)
    prov = _provenance(config)
    path = _out_dir(config) / config.output.data_file
    if path.exists() and read_provenance(path) == prov:
        logging.debug("Reusing simulated data from %s", path)
        return read_dataset(path, config.dim)
    dataset = simulate_dataset(config, config.data.seed)
    write_dataset(path, dataset, prov)
    logging.info("Simulated data written to %s", path)
    return dataset


def cmd_simulate(config: ExperimentConfig, threads: int = 1) -> List[Path]:
    """Simulate every replicate and write one CSV per replicate."""
    prov = _provenance(config)
    base = _out_dir(config) / config.output.data_file
    seed = config.data.seed

    def simulate(rep: int) -> Path:
        dataset = simulate_dataset(config, seed, rep)
        return write_dataset(replicate_path(base, rep), dataset, prov)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        paths = list(executor.map(simulate, range(config.data.replicates)))
    _write_record(config)

    logging.info("=" * 60)
    logging.info("SIMULATION SUMMARY:")
    logging.info("  Locations per replicate: %d", config.data.n)
    logging.info("  Replicates: %d", len(paths))
    logging.info("  Seed: %d", seed)
    logging.info("  Data file: %s", paths[0])
    logging.info("=" * 60)
    return paths


def cmd_fit(config: ExperimentConfig, threads: int = 1) -> FitResult:
    """Fit on the training split and write the estimates and the optimizer trace."""
    prov = _provenance(config)
    dataset = _dataset_for_run(config)
    labels = split_from_config(config, dataset, config.data.seed)
    result = run_fit(config, dataset, labels, components_from_config(config), threads)
    out = _out_dir(config)
    write_json(
        out / config.output.fit_file,
        {
            "params": result.params.to_dict(),
            "loglik": result.loglik,
            "converged": result.converged,
            "n_evals": result.n_evals,
            "message": result.message,
            "n_train": int((labels == "train").sum()),
        },
        prov,
    )
    write_trace(out / config.output.trace_file, result.trace, prov)
    _write_record(config)

    logging.info("=" * 60)
    logging.info("FIT SUMMARY:")
    logging.info("  sigma2: %.6g", result.params.sigma2)
    logging.info("  kappa: %.6g", result.params.kappa)
    logging.info("  tau2: %.6g", result.params.tau2)
    if result.params.free_nu:
        logging.info("  nu: %.6g", result.params.nu)
    logging.info("  Log-likelihood: %.6f", result.loglik)
    logging.info("  Evaluations: %d (converged: %s)", result.n_evals, result.converged)
    logging.info("=" * 60)
    return result


def _prediction_parameters(config: ExperimentConfig) -> ParameterVector:
    """Estimates from this run's fit file when present, else the configured parameters."""
    path = Path(config.output.directory) / config.output.fit_file
    if path.exists():
        record = read_json(path)
        prov = _provenance(config)
        if record.get("config_hash") == prov.config_hash and record.get("seed") == prov.seed:
            logging.info("Using fitted parameters from %s", path)
            return ParameterVector(**record["params"])
        logging.warning("Ignoring %s: it was written by a different configuration", path)
    logging.info("Using the configured covariance parameters")
    return true_parameters(config)


def _predict(config: ExperimentConfig, threads: int) -> Tuple[Dataset, np.ndarray, PredictionRun]:
    dataset = _dataset_for_run(config)
    labels = split_from_config(config, dataset, config.data.seed)
    params = _prediction_parameters(config)
    run = run_predict(config, dataset, labels, components_from_config(config), params, threads)
    return dataset, labels, run


def cmd_predict(config: ExperimentConfig, threads: int = 1) -> PredictionRun:
    """Predict at every location and write (coordinates, z, mean, sd, split)."""
    dataset, labels, run = _predict(config, threads)
    path = _out_dir(config) / config.output.predictions_file
    write_predictions(
        path,
        dataset,
        run.prediction.mean,
        run.prediction.sd,
        labels,
        _provenance(config),
    )
    _write_record(config)
    logging.info("=" * 60)
    logging.info("PREDICTION SUMMARY:")
    logging.info("  Locations: %d", len(run.prediction.mean))
    logging.info("  Training values: %d", run.n_train)
    logging.info("  Predictions file: %s", path)
    logging.info("=" * 60)
    return run


def cmd_score(config: ExperimentConfig, threads: int = 1) -> Dict[str, Any]:
    """Score the predictions per test set and write the report."""
    dataset, labels, run = _predict(config, threads)
    reports = score_split(
        dataset.values, run.prediction.mean, run.prediction.sd, labels, run.loglik
    )
    payload = {
        "log_score": run.loglik,
        "log_score_per_n": run.loglik / run.n_train,
        "n_train": run.n_train,
        "params": run.params.to_dict(),
        "sets": {label: report.to_dict() for label, report in reports.items()},
    }
    write_json(_out_dir(config) / config.output.scores_file, payload, _provenance(config))
    _write_record(config)

    logging.info("=" * 60)
    logging.info("SCORE SUMMARY:")
    logging.info("  Log-score (training): %.6f", run.loglik)
    for label, report in reports.items():
        logging.info(
            "  %-6s n=%-6d RMSPE=%.6g CRPS=%.6g", label, report.n, report.rmspe, report.crps_mean
        )
    logging.info("=" * 60)
    return payload


def cmd_benchmark(config: ExperimentConfig, threads: int = 1) -> List[Any]:
    """Time the configured grid and write the benchmark and close-approximation tables."""
    prov = _provenance(config)
    out = _out_dir(config)
    rows = run_benchmark(config, prov.config_hash, prov.seed, max_workers=threads)
    append_rows(out / config.output.benchmark_file, benchmark_frame(rows), BENCHMARK_KEY, prov)
    close = close_approximation_times(rows, config.benchmark.thresholds, config.dim)
    write_csv(out / config.output.close_file, close, prov)
    _write_record(config)

    logging.info("=" * 60)
    logging.info("BENCHMARK SUMMARY:")
    logging.info("  Rows: %d", len(rows))
    logging.info("  Failed: %d", sum(r.status != "ok" for r in rows))
    for r in rows:
        if r.status == "ok":
            logging.info(
                "  %-12s r0=%d J=%d M=%d time=%.4fs gap/n=%.3g",
                r.method,
                r.r0,
                r.J,
                r.M,
                r.time,
                r.gap_per_n,
            )
    logging.info("=" * 60)
    return rows


def _fail(code: int, what: str, error: Exception, verbose: bool) -> int:
    logging.error("%s: %s", what, error)
    if verbose:
        logging.exception("Detailed error information:")
    return code


_HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the CLI."""
    args = parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = resolve_config(args.config, args.seed, args.out)
        _HANDLERS[args.command](config, args.threads)
        return EXIT_OK

    except NumericalError as e:
        return _fail(EXIT_NUMERICAL, "Numerical failure", e, args.verbose)
    except (ConfigError, DataError, GeometryError, PatternError) as e:
        return _fail(EXIT_INPUT, "Invalid input", e, args.verbose)
    except MRAError as e:
        return _fail(EXIT_NUMERICAL, "Computation failed", e, args.verbose)
    except OSError as e:
        return _fail(EXIT_IO, "An error occurred", e, args.verbose)


if __name__ == "__main__":
    sys.exit(main())
