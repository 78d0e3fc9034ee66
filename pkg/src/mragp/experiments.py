# File: src/mragp/experiments.py

"""Simulation, train/test splits, fit/predict/score pipelines and the benchmark grid."""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .covariance import CovarianceModel, Modulator, TaperSpec, recommended_taper
from .data_io import Dataset, read_dataset
from .errors import DataError, MRAError
from .geometry import (
    Domain,
    KnotHierarchy,
    PartitionTree,
    build_partition_tree,
    build_regular_knots,
)
from .inference import (
    FitOptions,
    FitResult,
    ParameterVector,
    ScoreReport,
    close_thresholds,
    fit_ml,
    log_score_gap,
    model_loglik,
    score_predictions,
)
from .mra import (
    Observations,
    PredictionResult,
    assemble_noiseless_posterior,
    assemble_posterior,
    build_prior,
    loglikelihood,
    loglikelihood_noiseless,
    predict,
)
from .oracle import MAX_DENSE_N, dense_gp_loglik, make_rng, sample_gp

LOCATION_STREAM = 1
SPLIT_STREAM = 2

TRAIN, AREAL, RANDOM = "train", "areal", "random"
SPLIT_LABELS = (TRAIN, AREAL, RANDOM)

BENCHMARK_KEY = ["config_hash", "seed", "replicate", "method", "r0", "J", "M"]


@dataclass(frozen=True)
class ModelComponents:
    """Knots and modulator of one M-RA version."""

    method: str
    knots: KnotHierarchy
    modulator: Modulator
    tree: Optional[PartitionTree] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "sizes": self.knots.sizes,
            "modulator": self.modulator.to_dict(),
        }


def make_domain(config: ExperimentConfig) -> Domain:
    return Domain(tuple(config.domain.lower), tuple(config.domain.upper))


def make_covariance(config: ExperimentConfig) -> CovarianceModel:
    cov = config.covariance
    return CovarianceModel(family=cov.family, sigma2=cov.sigma2, kappa=cov.kappa, nu=cov.nu)


def true_parameters(config: ExperimentConfig) -> ParameterVector:
    """Parameters the configuration simulates from; also the default fit start."""
    cov = config.covariance
    nu = 0.5 if cov.family == "exponential" else cov.nu
    return ParameterVector(
        sigma2=cov.sigma2,
        kappa=cov.kappa,
        tau2=cov.tau2,
        nu=nu,
        family=cov.family,
        free_nu=config.fit.free_nu,
    )


def build_model_components(
    domain: Domain,
    model: CovarianceModel,
    method: str,
    r0: Optional[int],
    J: int,
    M: int,
    layout: str = "lattice",
    d0: Optional[float] = None,
) -> ModelComponents:
    """Knot hierarchy plus block or taper modulator.

    For the taper a missing d0 or r0 is taken from the range guideline.
    """
    if method == "taper":
        guide_d0, guide_r0 = recommended_taper(model, domain)
        if r0 is None:
            r0 = guide_r0
            logging.info("Taper r0 not set; using guideline r0=%d", r0)
        if d0 is None:
            d0 = guide_d0
            logging.info("Taper d0 not set; using guideline d0=%.6g", d0)
        knots = build_regular_knots(domain, r0, J, M, layout)
        taper = TaperSpec(d0=d0, J=J, dim=domain.dim)
        return ModelComponents(method, knots, Modulator.tapered(taper))
    if method != "block":
        raise DataError(f"Unknown method '{method}'")
    if r0 is None:
        raise DataError("The block method needs r0")
    tree = build_partition_tree(domain, J, M)
    knots = build_regular_knots(domain, r0, J, M, layout)
    return ModelComponents(method, knots, Modulator.block(tree), tree)


def components_from_config(config: ExperimentConfig) -> ModelComponents:
    m = config.model
    return build_model_components(
        make_domain(config), make_covariance(config), m.method, m.r0, m.J, m.M, m.layout, m.d0
    )


def regular_grid(domain: Domain, n: int) -> np.ndarray:
    """Equidistant grid with both ends included; a 2-D grid is filled row by row."""
    if n < 1:
        raise DataError(f"Need at least one location, got n={n}")
    lo, hi = domain.lower_array, domain.upper_array
    if domain.dim == 1:
        return np.linspace(lo[0], hi[0], n).reshape(-1, 1)
    ratio = float(domain.extent[0] / domain.extent[1])
    nx = max(1, int(math.ceil(math.sqrt(n * ratio))))
    ny = int(math.ceil(n / nx))
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    if len(grid) != n:
        logging.debug("2-D grid %dx%d truncated to %d points", nx, ny, n)
    return grid[:n]


def random_locations(domain: Domain, n: int, seed: int, replicate: int = 0) -> np.ndarray:
    if n < 1:
        raise DataError(f"Need at least one location, got n={n}")
    rng = make_rng(seed, replicate, LOCATION_STREAM)
    return domain.lower_array + domain.extent * rng.random((n, domain.dim))


def simulate_dataset(config: ExperimentConfig, seed: int, replicate: int = 0) -> Dataset:
    """Draw one dataset from the configured GP plus nugget."""
    domain = make_domain(config)
    n = config.data.n
    if config.data.grid == "random":
        locations = random_locations(domain, n, seed, replicate)
    else:
        locations = regular_grid(domain, n)
    tau2 = config.covariance.tau2
    values = sample_gp(make_covariance(config), locations, tau2, seed=seed, replicate=replicate)
    logging.debug("Simulated %d values (seed=%d, replicate=%d)", n, seed, replicate)
    return Dataset(locations, values, np.full(n, tau2))


def load_dataset(config: ExperimentConfig, seed: int, replicate: int = 0) -> Dataset:
    """Read the configured CSV or simulate, and check the domain."""
    if config.data.source == "csv":
        dataset = read_dataset(config.data.path, config.dim)
    else:
        dataset = simulate_dataset(config, seed, replicate)
    make_domain(config).check_points(dataset.locations)
    return dataset


def _areal_cells(points: np.ndarray, domain: Domain, grid: Sequence[int]) -> np.ndarray:
    gx, gy = int(grid[0]), int(grid[1])
    scaled = (points - domain.lower_array) / domain.extent
    if domain.dim == 1:
        count = gx * gy
        return np.clip(np.floor(scaled[:, 0] * count), 0, count - 1).astype(np.int64)
    ix = np.clip(np.floor(scaled[:, 0] * gx), 0, gx - 1).astype(np.int64)
    iy = np.clip(np.floor(scaled[:, 1] * gy), 0, gy - 1).astype(np.int64)
    return ix * gy + iy


def make_split(
    locations: np.ndarray,
    domain: Domain,
    areal_grid: Sequence[int] = (5, 5),
    areal_removed: int = 3,
    random_fraction: float = 0.10,
    seed: int = 0,
    replicate: int = 0,
) -> np.ndarray:
    """Label every location as train, areal or random test data.

    The domain is cut into areal_grid[0] x areal_grid[1] equal rectangles (the
    same number of equal intervals in 1-D) and areal_removed of them are held
    out. random_fraction of all locations is then drawn from the rest.

    Returns:
        Array of labels, one per location
    """
    n = len(locations)
    rng = make_rng(seed, replicate, SPLIT_STREAM)
    n_cells = int(areal_grid[0]) * int(areal_grid[1])
    removed = rng.choice(n_cells, size=areal_removed, replace=False)
    labels = np.full(n, TRAIN, dtype="<U6")
    labels[np.isin(_areal_cells(locations, domain, areal_grid), removed)] = AREAL
    remaining = np.flatnonzero(labels == TRAIN)
    n_random = min(int(round(random_fraction * n)), len(remaining))
    if n_random:
        labels[rng.choice(remaining, size=n_random, replace=False)] = RANDOM
    n_train = int(np.sum(labels == TRAIN))
    if n_train == 0:
        raise DataError("The test split leaves no training data")
    logging.info(
        "Split %d locations: %d train, %d areal, %d random",
        n,
        n_train,
        int(np.sum(labels == AREAL)),
        int(np.sum(labels == RANDOM)),
    )
    return labels


def split_from_config(config: ExperimentConfig, dataset: Dataset, seed: int) -> np.ndarray:
    s = config.split
    return make_split(
        dataset.locations,
        make_domain(config),
        s.areal_grid,
        s.areal_removed,
        s.random_fraction,
        seed=seed,
    )


def observations(dataset: Dataset, tau2: float) -> Observations:
    """Observations with V_eps = tau2 * I.

    tau2 overrides the dataset's noise column, since the nugget is a model
    parameter. A column with varying noise cannot be represented and is reported.
    """
    if dataset.noise is not None and dataset.n and np.ptp(dataset.noise) > 0:
        logging.warning(
            "Ignoring heteroscedastic noise column (range %.6g..%.6g); using tau2=%.6g",
            float(np.min(dataset.noise)),
            float(np.max(dataset.noise)),
            tau2,
        )
    return Observations(dataset.locations, dataset.values, np.full(dataset.n, tau2))


def fit_options(config: ExperimentConfig, max_workers: int = 1) -> FitOptions:
    return FitOptions(
        max_evals=config.fit.max_evals,
        max_iter=config.fit.max_iter,
        rel_tol=config.fit.rel_tol,
        inverse_mode=config.model.inverse_mode,
        max_workers=max_workers,
    )


def run_fit(
    config: ExperimentConfig,
    dataset: Dataset,
    labels: np.ndarray,
    components: ModelComponents,
    max_workers: int = 1,
) -> FitResult:
    """Maximum-likelihood fit on the training locations."""
    train = dataset.subset(labels == TRAIN)
    init = true_parameters(config)
    if config.fit.init_scale != 1.0:
        init = init.scaled(config.fit.init_scale)
    logging.info("Fitting %s M-RA to %d training values from %s", components.method, train.n, init)
    return fit_ml(
        observations(train, init.tau2),
        components.knots,
        components.modulator,
        init,
        fit_options(config, max_workers),
    )


@dataclass
class PredictionRun:
    """Predictions at every location and the training log-likelihood behind them."""

    prediction: PredictionResult
    loglik: float
    n_train: int
    params: ParameterVector


def run_predict(
    config: ExperimentConfig,
    dataset: Dataset,
    labels: np.ndarray,
    components: ModelComponents,
    params: ParameterVector,
    max_workers: int = 1,
) -> PredictionRun:
    """Condition on the training data and predict at all locations."""
    train = dataset.subset(labels == TRAIN)
    prior = build_prior(
        params.to_model(),
        components.knots,
        components.modulator,
        train.locations,
        inverse_mode=config.model.inverse_mode,
        max_workers=max_workers,
    )
    if params.tau2 == 0:
        post = assemble_noiseless_posterior(prior, train.values)
        value = loglikelihood_noiseless(prior, train.values)
    else:
        obs = observations(train, params.tau2)
        post = assemble_posterior(prior, obs)
        value = loglikelihood(prior, post, obs)
    result = predict(prior, post, dataset.locations)
    return PredictionRun(prediction=result, loglik=value, n_train=train.n, params=params)


def score_split(
    values: np.ndarray,
    mean: np.ndarray,
    sd: np.ndarray,
    labels: np.ndarray,
    log_score_value: Optional[float] = None,
) -> Dict[str, ScoreReport]:
    """Scores per test set, plus the training echo (mean against the data it saw)."""
    reports: Dict[str, ScoreReport] = {}
    for label in SPLIT_LABELS:
        mask = labels == label
        if not np.any(mask):
            continue
        reports[label] = score_predictions(
            mean[mask],
            sd[mask],
            values[mask],
            log_score_value=log_score_value if label == TRAIN else None,
        )
    return reports


@dataclass
class BenchmarkRow:
    """One timed likelihood evaluation of an M-RA version."""

    method: str
    r0: int
    J: int
    M: int
    n: int
    replicate: int
    time: float
    log_score: float
    gap: float
    gap_per_n: float
    reference: str
    config_hash: str
    seed: int
    status: str = "ok"


BENCHMARK_COLUMNS = [f.name for f in fields(BenchmarkRow)]


def method_label(method: str, M: int) -> str:
    """M=1 versions are the full-scale approximation baselines."""
    return f"FSA-{method}" if M == 1 else f"M-RA-{method}"


def benchmark_frame(rows: Sequence[BenchmarkRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=BENCHMARK_COLUMNS)


@dataclass(frozen=True)
class _GridPoint:
    method: str
    r0: int
    J: int
    M: int
    replicate: int


def benchmark_grid(config: ExperimentConfig) -> List[_GridPoint]:
    bench = config.benchmark
    return [
        _GridPoint(method, r0, J, M, rep)
        for rep in range(config.data.replicates)
        for method in bench.methods
        for r0 in bench.r0
        for J in bench.J
        for M in bench.M
    ]


def _time_point(
    config: ExperimentConfig,
    point: _GridPoint,
    dataset: Dataset,
    config_hash: str,
    seed: int,
) -> BenchmarkRow:
    params = true_parameters(config)
    row = BenchmarkRow(
        method=method_label(point.method, point.M),
        r0=point.r0,
        J=point.J,
        M=point.M,
        n=dataset.n,
        replicate=point.replicate,
        time=math.nan,
        log_score=math.nan,
        gap=math.nan,
        gap_per_n=math.nan,
        reference="",
        config_hash=config_hash,
        seed=seed,
    )
    try:
        components = build_model_components(
            make_domain(config),
            params.to_model(),
            point.method,
            point.r0,
            point.J,
            point.M,
            config.model.layout,
            config.model.d0 if point.method == "taper" else None,
        )
        obs = observations(dataset, params.tau2)
        start = time.perf_counter()
        value, _ = model_loglik(
            obs, components.knots, components.modulator, params, config.model.inverse_mode
        )
        row.time = time.perf_counter() - start
        row.log_score = value
    except (MRAError, ValueError, ArithmeticError, MemoryError) as exc:
        logging.warning(
            "Benchmark row %s r0=%d J=%d M=%d failed: %s",
            point.method,
            point.r0,
            point.J,
            point.M,
            exc,
        )
        row.status = f"failed: {exc}"
    return row


def _fill_gaps(rows: List[BenchmarkRow], exact: Optional[float]) -> None:
    ok = [r for r in rows if r.status == "ok" and math.isfinite(r.log_score)]
    if exact is not None:
        base, reference = exact, "exact"
    elif ok:
        base, reference = max(r.log_score for r in ok), "best"
    else:
        return
    for r in ok:
        r.gap, r.gap_per_n = log_score_gap(r.log_score, base, r.n)
        r.reference = reference


def run_benchmark(
    config: ExperimentConfig,
    config_hash: str,
    seed: int,
    max_workers: int = 1,
    datasets: Optional[Dict[int, Dataset]] = None,
) -> List[BenchmarkRow]:
    """Time build + likelihood over the configured grid of M-RA versions.

    Each row runs single-threaded; grid points run concurrently up to
    max_workers. Gaps are taken against the exact dense log-likelihood for
    n <= exact_limit and against the best approximation otherwise.
    """
    grid = benchmark_grid(config)
    if not grid:
        logging.info("Benchmark grid is empty")
        return []
    datasets = dict(datasets or {})
    for rep in sorted({p.replicate for p in grid}):
        if rep not in datasets:
            datasets[rep] = load_dataset(config, seed, rep)
        if datasets[rep].n > config.benchmark.max_n:
            raise DataError(
                f"Benchmark is limited to n <= {config.benchmark.max_n}, got {datasets[rep].n}"
            )

    def task(point: _GridPoint) -> BenchmarkRow:
        return _time_point(config, point, datasets[point.replicate], config_hash, seed)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        rows = list(executor.map(task, grid))

    params = true_parameters(config)
    limit = min(config.benchmark.exact_limit, MAX_DENSE_N)
    for rep, dataset in sorted(datasets.items()):
        exact = None
        if dataset.n <= limit:
            exact = dense_gp_loglik(params.to_model(), observations(dataset, params.tau2))
        _fill_gaps([r for r in rows if r.replicate == rep], exact)
    failed = sum(r.status != "ok" for r in rows)
    logging.info("Benchmark finished: %d rows, %d failed", len(rows), failed)
    return rows


def close_approximation_times(
    rows: Sequence[BenchmarkRow], thresholds: Optional[Sequence[float]] = None, dim: int = 1
) -> pd.DataFrame:
    """Per method and threshold, the fastest version whose mean |gap| <= threshold * n.

    Times and gaps are averaged over replicates first. Methods with no close
    version get a NaN time.
    """
    columns = ["method", "threshold", "time", "r0", "J", "M", "gap"]
    thresholds = tuple(thresholds) if thresholds is not None else close_thresholds(dim)
    frame = benchmark_frame([r for r in rows if r.status == "ok"])
    if frame.empty:
        return pd.DataFrame(columns=columns)
    frame["abs_gap"] = frame["gap"].abs()
    averaged = (
        frame.groupby(["method", "r0", "J", "M"], as_index=False)
        .agg(time=("time", "mean"), gap=("abs_gap", "mean"), n=("n", "mean"))
        .sort_values(["method", "time", "r0", "J", "M"], kind="mergesort")
    )
    out: List[Dict[str, Any]] = []
    for method, group in averaged.groupby("method", sort=True):
        for threshold in thresholds:
            close = group[group["gap"] <= threshold * group["n"]]
            if close.empty:
                missing = dict.fromkeys(columns[2:], math.nan)
                out.append({"method": method, "threshold": threshold, **missing})
                continue
            best = close.iloc[0]
            out.append(
                {
                    "method": method,
                    "threshold": threshold,
                    "time": float(best["time"]),
                    "r0": int(best["r0"]),
                    "J": int(best["J"]),
                    "M": int(best["M"]),
                    "gap": float(best["gap"]),
                }
            )
    return pd.DataFrame(out, columns=columns)

