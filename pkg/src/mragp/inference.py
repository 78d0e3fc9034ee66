# File: src/mragp/inference.py

"""Maximum-likelihood fitting and forecast scores (log-score, RMSPE, CRPS)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .covariance import CovarianceModel, Modulator
from .errors import DataError, MRAError
from .geometry import KnotHierarchy
from .mra import (
    Observations,
    PriorFactors,
    assemble_posterior,
    build_prior,
    loglikelihood,
    loglikelihood_noiseless,
)

# Log-space box for every parameter that the optimizer may move.
PARAMETER_BOUNDS: Dict[str, Tuple[float, float]] = {
    "sigma2": (1e-8, 1e8),
    "kappa": (1e-8, 1e8),
    "tau2": (1e-10, 1e8),
    "nu": (0.05, 10.0),
}

# Thresholds (times n) for a "close" approximation.
CLOSE_THRESHOLDS_1D = (0.003, 0.005, 0.007)
CLOSE_THRESHOLDS_2D = (0.008, 0.01, 0.012)


@dataclass(frozen=True)
class ParameterVector:
    """Covariance parameters theta plus the nugget tau2."""

    sigma2: float = 0.95
    kappa: float = 0.05
    tau2: float = 0.05
    nu: float = 0.5
    family: str = "exponential"
    free_nu: bool = False

    def __post_init__(self) -> None:
        if not (self.sigma2 > 0 and self.kappa > 0 and self.nu > 0):
            raise DataError(f"sigma2, kappa and nu must be positive: {self}")
        if not self.tau2 >= 0:
            raise DataError(f"tau2 must be non-negative, got {self.tau2}")
        if self.free_nu and self.family != "matern":
            raise DataError("A free smoothness needs the matern family")

    @property
    def free_names(self) -> List[str]:
        names = ["sigma2", "kappa"]
        if self.tau2 > 0:
            names.append("tau2")
        if self.free_nu:
            names.append("nu")
        return names

    def to_model(self) -> CovarianceModel:
        return CovarianceModel(family=self.family, sigma2=self.sigma2, kappa=self.kappa, nu=self.nu)

    def to_log(self) -> np.ndarray:
        return np.log([getattr(self, name) for name in self.free_names])

    def from_log(self, x: Sequence[float]) -> "ParameterVector":
        values = asdict(self)
        for name, value in zip(self.free_names, x):
            lo, hi = PARAMETER_BOUNDS[name]
            values[name] = float(np.clip(math.exp(min(value, 700.0)), lo, hi))
        return ParameterVector(**values)

    def scaled(self, factor: float) -> "ParameterVector":
        """Every free parameter multiplied by factor."""
        return self.from_log(self.to_log() + math.log(factor))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class FitOptions:
    """Budget and numerical settings for fit_ml."""

    max_evals: int = 500
    max_iter: Optional[int] = None
    rel_tol: float = 1e-6
    inverse_mode: str = "full"
    max_workers: int = 1


@dataclass
class TraceRow:
    evaluation: int
    sigma2: float
    kappa: float
    tau2: float
    nu: float
    loglik: float
    best_loglik: float


@dataclass
class FitResult:
    """Best parameters found, their log-likelihood and the evaluation trace."""

    params: ParameterVector
    loglik: float
    trace: List[TraceRow] = field(default_factory=list)
    converged: bool = True
    message: str = ""

    @property
    def n_evals(self) -> int:
        return len(self.trace)


def model_loglik(
    obs: Observations,
    knots: KnotHierarchy,
    mod: Modulator,
    params: ParameterVector,
    inverse_mode: str = "full",
    max_workers: int = 1,
) -> Tuple[float, PriorFactors]:
    """M-RA log-likelihood at params; tau2 = 0 uses the noiseless path (S must equal Q)."""
    prior = build_prior(
        params.to_model(),
        knots,
        mod,
        obs.locations,
        inverse_mode=inverse_mode,
        max_workers=max_workers,
    )
    if params.tau2 == 0:
        return loglikelihood_noiseless(prior, obs.values), prior
    noisy = Observations(obs.locations, obs.values, np.full(obs.n, params.tau2))
    post = assemble_posterior(prior, noisy)
    return loglikelihood(prior, post, noisy), prior


def fit_ml(
    obs: Observations,
    knots: KnotHierarchy,
    mod: Modulator,
    init: ParameterVector,
    opts: Optional[FitOptions] = None,
    objective: Optional[Callable[[ParameterVector], float]] = None,
) -> FitResult:
    """Maximize the log-likelihood with Nelder-Mead over log-parameters.

    Args:
        obs: Observations; their noise column is replaced by tau2
        knots: Knot hierarchy
        mod: Modulator (held fixed during the fit)
        init: Starting parameters; tau2 = 0 keeps the nugget fixed at zero
        opts: Evaluation budget and tolerances
        objective: Optional log-likelihood override, mainly for tests

    Returns:
        FitResult with the best point seen and the full trace
    """
    opts = opts or FitOptions()
    trace: List[TraceRow] = []
    best: Dict[str, Any] = {"params": init, "loglik": -math.inf}

    def evaluate(params: ParameterVector) -> float:
        if objective is not None:
            return float(objective(params))
        value, _ = model_loglik(
            obs, knots, mod, params, opts.inverse_mode, max_workers=opts.max_workers
        )
        return value

    def record(params: ParameterVector, value: float) -> None:
        if value > best["loglik"]:
            best["params"], best["loglik"] = params, value
        trace.append(
            TraceRow(
                evaluation=len(trace),
                sigma2=params.sigma2,
                kappa=params.kappa,
                tau2=params.tau2,
                nu=params.nu,
                loglik=value,
                best_loglik=best["loglik"],
            )
        )

    init_value = evaluate(init)
    if not math.isfinite(init_value):
        raise MRAError(f"Log-likelihood is not finite at the initial parameters {init}")
    record(init, init_value)
    if opts.max_evals <= 1 or opts.max_iter == 0:
        return FitResult(params=init, loglik=init_value, trace=trace, message="no iterations")

    def negative(x: np.ndarray) -> float:
        params = init.from_log(x)
        try:
            value = evaluate(params)
        except MRAError as exc:
            logging.debug("Likelihood failed at %s: %s", params, exc)
            value = -math.inf
        if not math.isfinite(value):
            value = -math.inf
        record(params, value)
        return -value if math.isfinite(value) else math.inf

    options: Dict[str, Any] = {
        "maxfev": opts.max_evals - 1,
        "xatol": opts.rel_tol,
        "fatol": opts.rel_tol * max(1.0, abs(init_value)),
    }
    if opts.max_iter is not None:
        options["maxiter"] = opts.max_iter
    result = minimize(negative, init.to_log(), method="Nelder-Mead", options=options)
    converged = bool(result.success)
    if not converged:
        logging.warning("Optimizer stopped before convergence: %s", result.message)
    logging.info(
        "ML fit finished after %d evaluations: loglik=%.6f", len(trace), best["loglik"]
    )
    return FitResult(
        params=best["params"],
        loglik=best["loglik"],
        trace=trace,
        converged=converged,
        message=str(result.message),
    )


def log_score(model_loglik_value: float, n: int) -> Tuple[float, float]:
    """The log-score and its per-observation value."""
    if n < 1:
        raise DataError("The log-score needs n >= 1")
    return float(model_loglik_value), float(model_loglik_value) / n


def log_score_gap(approx: float, reference: float, n: int) -> Tuple[float, float]:
    """Gap approx - reference and the same gap divided by n."""
    gap = float(approx) - float(reference)
    return gap, log_score(gap, n)[1]


def is_close(approx: float, reference: float, n: int, threshold: float) -> bool:
    """True when |approx - reference| <= threshold * n."""
    return abs(float(approx) - float(reference)) <= threshold * n


def close_thresholds(dim: int) -> Tuple[float, ...]:
    return CLOSE_THRESHOLDS_1D if dim == 1 else CLOSE_THRESHOLDS_2D


def crps_gaussian(mu: Any, sd: Any, y: Any) -> Any:
    """Closed-form CRPS of N(mu, sd^2) at y; |y - mu| when sd = 0."""
    mu_arr, sd_arr, y_arr = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sd, dtype=float), np.asarray(y, dtype=float)
    )
    if np.any(sd_arr < 0):
        raise DataError("Predictive standard deviations must be non-negative")
    out = np.abs(y_arr - mu_arr).astype(float)
    positive = sd_arr > 0
    if np.any(positive):
        s = sd_arr[positive]
        z = (y_arr[positive] - mu_arr[positive]) / s
        out[positive] = s * (
            z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi)
        )
    if out.ndim == 0:
        return float(out)
    return out


def rmspe(pred_means: Any, y: Any) -> float:
    """Root mean squared prediction error."""
    pred = np.asarray(pred_means, dtype=float).ravel()
    obs = np.asarray(y, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise DataError(f"Prediction and data lengths differ: {pred.size} vs {obs.size}")
    if pred.size == 0:
        raise DataError("RMSPE needs at least one value")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


@dataclass
class ScoreReport:
    """Forecast scores for one test set."""

    log_score: Optional[float]
    rmspe: float
    crps_mean: float
    means: np.ndarray
    sds: np.ndarray
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "log_score": self.log_score,
            "rmspe": self.rmspe,
            "crps_mean": self.crps_mean,
            "n": self.n,
        }


def score_predictions(
    means: Any, sds: Any, y: Any, log_score_value: Optional[float] = None
) -> ScoreReport:
    """RMSPE and mean CRPS of Gaussian predictions against held-out data."""
    means_arr = np.asarray(means, dtype=float).ravel()
    sds_arr = np.asarray(sds, dtype=float).ravel()
    y_arr = np.asarray(y, dtype=float).ravel()
    return ScoreReport(
        log_score=log_score_value,
        rmspe=rmspe(means_arr, y_arr),
        crps_mean=float(np.mean(crps_gaussian(means_arr, sds_arr, y_arr))),
        means=means_arr,
        sds=sds_arr,
        n=int(y_arr.size),
    )


@dataclass(frozen=True)
class MethodScore:
    """Log-likelihood of one approximation evaluated at params."""

    label: str
    params: ParameterVector
    loglik: float
    n: int


def compare_log_scores(
    scores: Sequence[MethodScore], reference: Optional[MethodScore] = None
) -> List[Dict[str, Any]]:
    """Log-score table relative to a reference, refusing to mix parameter values.

    Without a reference the best log-score among the methods is the base.
    """
    entries = list(scores) + ([reference] if reference is not None else [])
    if not entries:
        return []
    shared = entries[0].params
    for entry in entries[1:]:
        if entry.params != shared:
            raise DataError(
                f"Log-scores must be compared at one parameter value; '{entry.label}' used "
                f"{entry.params}, expected {shared}"
            )
    base = reference.loglik if reference is not None else max(s.loglik for s in scores)
    rows = []
    for s in scores:
        gap, per_n = log_score_gap(s.loglik, base, s.n)
        rows.append({"method": s.label, "log_score": s.loglik, "gap": gap, "gap_per_n": per_n})
    return rows
