# File: src/mragp/config.py

"""Experiment configuration loading and validation for mragp."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

from .errors import ConfigError

try:
    import tomllib  # Python 3.11+
except ImportError:
    try:
        import tomli as tomllib  # type: ignore
    except ImportError:
        tomllib = None  # type: ignore

try:
    import yaml
except ImportError:
    yaml = None  # type: ignore

T = TypeVar("T")

METHODS = ("block", "taper")
DATA_SOURCES = ("simulate", "csv")
GRIDS = ("regular", "random")


@dataclass
class DomainConfig:
    """Bounding box of the spatial domain."""

    lower: List[float] = field(default_factory=lambda: [0.0])
    upper: List[float] = field(default_factory=lambda: [1.0])


@dataclass
class CovarianceConfig:
    """Covariance family, its parameters and the nugget."""

    family: str = "exponential"
    sigma2: float = 0.95
    kappa: float = 0.05
    nu: float = 0.5
    tau2: float = 0.05


@dataclass
class ModelConfig:
    """M-RA variant and resolution settings."""

    method: str = "block"
    r0: Optional[int] = 2
    J: int = 2
    M: int = 3
    layout: str = "lattice"
    d0: Optional[float] = None  # taper range at resolution 0; guideline value when omitted
    inverse_mode: str = "full"


@dataclass
class DataConfig:
    """Where observations come from."""

    source: str = "simulate"
    path: Optional[str] = None
    n: int = 1024
    grid: str = "regular"
    seed: int = 1
    replicates: int = 1


@dataclass
class SplitConfig:
    """Areal plus random held-out test sets."""

    areal_grid: List[int] = field(default_factory=lambda: [5, 5])
    areal_removed: int = 3
    random_fraction: float = 0.10


@dataclass
class FitConfig:
    """Maximum-likelihood settings."""

    max_evals: int = 500
    max_iter: Optional[int] = None
    rel_tol: float = 1e-6
    free_nu: bool = False
    init_scale: float = 1.0


@dataclass
class BenchmarkConfig:
    """Grid of M-RA versions to time and score."""

    methods: List[str] = field(default_factory=lambda: ["block", "taper"])
    r0: List[int] = field(default_factory=lambda: [2])
    J: List[int] = field(default_factory=lambda: [2])
    M: List[int] = field(default_factory=lambda: [1, 2, 3, 4])
    thresholds: Optional[List[float]] = None  # multiples of n; dimension defaults when omitted
    exact_limit: int = 4096
    max_n: int = 65536


@dataclass
class OutputConfig:
    """Output directory and file names."""

    directory: str = "results"
    data_file: str = "data.csv"
    predictions_file: str = "predictions.csv"
    fit_file: str = "fit.json"
    trace_file: str = "fit_trace.csv"
    scores_file: str = "scores.json"
    benchmark_file: str = "benchmark.csv"
    close_file: str = "close_times.csv"
    resolved_file: str = "resolved_config.json"


@dataclass
class ExperimentConfig:
    """Main configuration class for mragp experiments."""

    domain: DomainConfig = field(default_factory=DomainConfig)
    covariance: CovarianceConfig = field(default_factory=CovarianceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        """Create a default configuration."""
        return cls()

    @property
    def dim(self) -> int:
        return len(self.domain.lower)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _load_yaml_config(config_path: Path) -> Dict[str, Any]:
    """Load configuration from YAML file."""
    if yaml is None:
        raise ConfigError(
            f"Cannot read {config_path}: 'pyyaml' is not installed. "
            "Install it with: pip install pyyaml"
        )
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}
    except yaml.YAMLError as e:  # type: ignore
        raise ConfigError(f"Failed to parse YAML config {config_path}: {e}") from e


def _load_json_config(config_path: Path) -> Dict[str, Any]:
    """Load configuration from JSON file."""
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            return json.load(f) or {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"Failed to parse JSON config {config_path}: {e}") from e


def _load_toml_config(config_path: Path) -> Dict[str, Any]:
    """Load configuration from TOML file."""
    if tomllib is None:
        raise ConfigError(
            f"Cannot read {config_path}: 'tomli' is not installed (Python < 3.11). "
            "Install it with: pip install tomli"
        )
    try:
        with open(config_path, "rb") as f:
            data = tomllib.load(f)
    except ValueError as e:
        # TOMLDecodeError subclasses ValueError
        raise ConfigError(f"Failed to parse TOML config {config_path}: {e}") from e
    # A pyproject.toml carries its settings under [tool.mragp]
    if config_path.name == "pyproject.toml":
        return data.get("tool", {}).get("mragp", {})
    return data


def _load_config_file(config_path: Path) -> Dict[str, Any]:
    """
    Load configuration from a file based on its extension.

    Args:
        config_path: Path to the configuration file

    Returns:
        Dictionary with configuration data
    """
    suffix = config_path.suffix.lower()

    if suffix in {".yaml", ".yml"}:
        return _load_yaml_config(config_path)
    if suffix == ".json":
        return _load_json_config(config_path)
    if suffix == ".toml":
        return _load_toml_config(config_path)
    raise ConfigError(f"Unsupported config file format: {config_path}")


def _build_section(cls: Type[T], name: str, data: Any) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"Section [{name}] must be a table, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid values in [{name}]: {e}") from e


def _validate(config: ExperimentConfig) -> None:
    dom = config.domain
    if len(dom.lower) != len(dom.upper) or len(dom.lower) not in (1, 2):
        raise ConfigError("[domain] lower and upper must both have length 1 or 2")
    if any(lo >= hi for lo, hi in zip(dom.lower, dom.upper)):
        raise ConfigError("[domain] lower must be below upper on every axis")
    if config.model.method not in METHODS:
        raise ConfigError(f"[model] method must be one of {METHODS}")
    if config.model.layout not in ("lattice", "boundary"):
        raise ConfigError("[model] layout must be 'lattice' or 'boundary'")
    if config.model.inverse_mode not in ("full", "selected"):
        raise ConfigError("[model] inverse_mode must be 'full' or 'selected'")
    if config.model.M < 0 or config.model.J < 2:
        raise ConfigError("[model] needs M >= 0 and J >= 2")
    if config.model.r0 is None and config.model.method != "taper":
        raise ConfigError("[model] r0 may only be omitted for the taper method")
    if config.data.source not in DATA_SOURCES:
        raise ConfigError(f"[data] source must be one of {DATA_SOURCES}")
    if config.data.source == "csv" and not config.data.path:
        raise ConfigError("[data] path is required when source = 'csv'")
    if config.data.grid not in GRIDS:
        raise ConfigError(f"[data] grid must be one of {GRIDS}")
    if config.data.n < 1 and config.data.source == "simulate":
        raise ConfigError("[data] n must be at least 1")
    if config.data.replicates < 1:
        raise ConfigError("[data] replicates must be at least 1")
    if config.covariance.tau2 < 0:
        raise ConfigError("[covariance] tau2 must be non-negative")
    split = config.split
    if len(split.areal_grid) != 2 or min(split.areal_grid) < 1:
        raise ConfigError("[split] areal_grid must be two positive integers")
    if not 0 <= split.areal_removed <= split.areal_grid[0] * split.areal_grid[1]:
        raise ConfigError("[split] areal_removed exceeds the number of rectangles")
    if not 0.0 <= split.random_fraction < 1.0:
        raise ConfigError("[split] random_fraction must lie in [0, 1)")
    if any(m not in METHODS for m in config.benchmark.methods):
        raise ConfigError(f"[benchmark] methods must be drawn from {METHODS}")


def _parse_config_dict(config_data: Dict[str, Any]) -> ExperimentConfig:
    """
    Parse configuration dictionary into ExperimentConfig object.

    Args:
        config_data: Raw configuration dictionary

    Returns:
        Parsed and validated configuration object
    """
    config = ExperimentConfig()
    sections = {f.name: f for f in fields(ExperimentConfig)}
    unknown = sorted(set(config_data) - set(sections))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")

    for name in sections:
        if name in config_data:
            section_cls = type(getattr(config, name))
            setattr(config, name, _build_section(section_cls, name, config_data[name]))

    _validate(config)
    return config


def load_config(config_path: Optional[Path]) -> ExperimentConfig:
    """
    Load an experiment configuration, or the defaults when no file is given.

    Args:
        config_path: Path to a TOML, JSON or YAML configuration file

    Returns:
        ExperimentConfig object with loaded or default settings
    """
    if config_path is None:
        logging.debug("No configuration file given, using defaults")
        return ExperimentConfig.default()

    logging.info("Loading configuration from: %s", config_path)
    config_data = _load_config_file(Path(config_path))

    if not config_data:
        logging.debug("Configuration file is empty, using defaults")
        return ExperimentConfig.default()

    return _parse_config_dict(config_data)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of every setting except the output paths."""
    settings = config.to_dict()
    settings.pop("output", None)
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
