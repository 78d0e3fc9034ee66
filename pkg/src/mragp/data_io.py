# File: src/mragp/data_io.py

"""CSV datasets, JSON run records and knot files for mragp experiments.

Every file written here carries the configuration hash and the seed of the
run that produced it: CSV files as a leading ``#`` comment line, JSON files
as top-level keys.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataError
from .geometry import KnotHierarchy, PartitionTree

FLOAT_FORMAT = "%.17g"
COORDINATE_COLUMNS = {1: ["x"], 2: ["x", "y"]}
VALUE_COLUMN = "z"
NOISE_COLUMN = "noise"
SPLIT_COLUMN = "split"
TRACE_COLUMNS = ["iteration", "sigma2", "kappa", "tau2", "nu", "loglik", "best_loglik"]


@dataclass(frozen=True)
class Provenance:
    """Configuration hash and seed stamped on every output file."""

    config_hash: str
    seed: int

    def comment_line(self) -> str:
        return f"# config_hash={self.config_hash} seed={self.seed}"

    @classmethod
    def parse(cls, line: str) -> Optional["Provenance"]:
        """Read a provenance comment line; None when the line is not one."""
        text = line.strip()
        if not text.startswith("#"):
            return None
        fields = dict(part.split("=", 1) for part in text.lstrip("#").split() if "=" in part)
        if "config_hash" not in fields or "seed" not in fields:
            return None
        try:
            return cls(config_hash=fields["config_hash"], seed=int(fields["seed"]))
        except ValueError:
            return None


@dataclass(frozen=True)
class Dataset:
    """Observed locations, values and optional per-location noise variances."""

    locations: np.ndarray
    values: np.ndarray
    noise: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        locations = np.asarray(self.locations, dtype=float)
        if locations.ndim == 1:
            locations = locations.reshape(-1, 1)
        values = np.asarray(self.values, dtype=float).ravel()
        if locations.shape[0] != values.size:
            raise DataError(f"{locations.shape[0]} locations do not match {values.size} values")
        if locations.shape[1] not in COORDINATE_COLUMNS:
            raise DataError(f"Datasets must be 1-D or 2-D, got {locations.shape[1]} columns")
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "values", values)
        if self.noise is not None:
            noise = np.broadcast_to(np.asarray(self.noise, dtype=float), values.shape).copy()
            object.__setattr__(self, "noise", noise)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def dim(self) -> int:
        return int(self.locations.shape[1])

    def subset(self, mask: np.ndarray) -> "Dataset":
        noise = None if self.noise is None else self.noise[mask]
        return Dataset(self.locations[mask], self.values[mask], noise)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.locations, columns=coordinate_columns(self.dim))
        frame[VALUE_COLUMN] = self.values
        if self.noise is not None:
            frame[NOISE_COLUMN] = self.noise
        return frame


def coordinate_columns(dim: int) -> List[str]:
    if dim not in COORDINATE_COLUMNS:
        raise DataError(f"Unsupported dimension {dim}")
    return list(COORDINATE_COLUMNS[dim])


def read_provenance(path: Path) -> Optional[Provenance]:
    """Provenance of a CSV file written by this module, if present."""
    with open(path, "r", encoding="utf-8") as f:
        return Provenance.parse(f.readline())


def write_csv(path: Path, frame: pd.DataFrame, provenance: Optional[Provenance] = None) -> Path:
    """Write a frame with 17 significant digits, after an optional provenance line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if provenance is not None:
            f.write(provenance.comment_line() + "\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logging.debug("Wrote %d rows to %s", len(frame), path)
    return path


def _numeric_columns(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> pd.DataFrame:
    """Convert columns to float, dropping rows with missing values.

    Raises:
        DataError: A cell holds text that is not a number
    """
    raw = frame[list(columns)]
    converted = raw.apply(pd.to_numeric, errors="coerce")
    bad = converted.isna() & raw.notna()
    if bad.to_numpy().any():
        row_pos, col_pos = np.argwhere(bad.to_numpy())[0]
        column = columns[col_pos]
        raise DataError(
            f"{path}: data row {row_pos + 1}, column '{column}' is not a number: "
            f"{raw.iloc[row_pos, col_pos]!r}"
        )
    missing = converted.isna().any(axis=1)
    if missing.any():
        logging.warning("Dropped %d row(s) with missing values from %s", int(missing.sum()), path)
        converted = converted.loc[~missing]
        frame = frame.loc[~missing]
    out = frame.copy()
    out[list(columns)] = converted.astype(float)
    return out.reset_index(drop=True)


def _read_raw(path: Path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: file has no header row") from e
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: cannot parse CSV: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(
            f"{path}: missing column(s) {', '.join(missing)}; found {', '.join(frame.columns)}"
        )
    return frame


def _read_frame(path: Path, required: Sequence[str], numeric: Sequence[str]) -> pd.DataFrame:
    """Read a CSV written by write_csv (or by hand) and validate its columns."""
    return _numeric_columns(_read_raw(path, required), numeric, Path(path))


def write_dataset(
    path: Path, dataset: Dataset, provenance: Optional[Provenance] = None
) -> Path:
    """Write (x, z) or (x, y, z) plus the noise column when present."""
    return write_csv(path, dataset.to_frame(), provenance)


def read_dataset(path: Path, dim: int) -> Dataset:
    """Read a dataset CSV; the noise column is optional.

    The noise column is kept for provenance. Likelihoods and predictions use
    the configured tau2 instead.

    Args:
        path: CSV file with coordinate columns and a z column
        dim: Spatial dimension (1 or 2)

    Returns:
        Dataset with rows holding missing values removed
    """
    coords = coordinate_columns(dim)
    raw = _read_raw(path, coords + [VALUE_COLUMN])
    has_noise = NOISE_COLUMN in raw.columns
    numeric = coords + [VALUE_COLUMN] + ([NOISE_COLUMN] if has_noise else [])
    frame = _numeric_columns(raw, numeric, Path(path))
    if frame.empty:
        raise DataError(f"{path}: no usable rows")
    noise = frame[NOISE_COLUMN].to_numpy() if has_noise else None
    logging.info("Read %d observations from %s", len(frame), path)
    return Dataset(frame[coords].to_numpy(), frame[VALUE_COLUMN].to_numpy(), noise)


def write_predictions(
    path: Path,
    dataset: Dataset,
    mean: np.ndarray,
    sd: np.ndarray,
    labels: np.ndarray,
    provenance: Optional[Provenance] = None,
) -> Path:
    """Dataset columns followed by (mean, sd, split)."""
    frame = dataset.to_frame()
    frame["mean"] = np.asarray(mean, dtype=float)
    frame["sd"] = np.asarray(sd, dtype=float)
    frame[SPLIT_COLUMN] = np.asarray(labels, dtype=str)
    return write_csv(path, frame, provenance)


def read_predictions(path: Path, dim: int) -> pd.DataFrame:
    coords = coordinate_columns(dim)
    numeric = coords + [VALUE_COLUMN, "mean", "sd"]
    return _read_frame(path, numeric + [SPLIT_COLUMN], numeric)


def write_trace(path: Path, trace: Sequence[Any], provenance: Optional[Provenance] = None) -> Path:
    """Optimizer trace, one row per likelihood evaluation."""
    rows = [asdict(row) for row in trace]
    frame = pd.DataFrame(rows, columns=["evaluation"] + TRACE_COLUMNS[1:])
    frame = frame.rename(columns={"evaluation": "iteration"})
    return write_csv(path, frame, provenance)


def append_rows(
    path: Path,
    frame: pd.DataFrame,
    key_columns: Sequence[str],
    provenance: Optional[Provenance] = None,
) -> pd.DataFrame:
    """Merge rows into a CSV, replacing earlier rows with the same key.

    Returns:
        The combined frame that was written
    """
    path = Path(path)
    combined = frame
    if path.exists():
        existing = pd.read_csv(path, comment="#", dtype={"config_hash": str})
        if not existing.empty:
            new_keys = set(frame[list(key_columns)].itertuples(index=False, name=None))
            old_keys = existing[list(key_columns)].itertuples(index=False, name=None)
            keep = [key not in new_keys for key in old_keys]
            combined = pd.concat([existing.loc[keep], frame], ignore_index=True)
            logging.debug("Kept %d of %d existing rows in %s", sum(keep), len(existing), path)
    write_csv(path, combined, provenance)
    return combined


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(
    path: Path, payload: Dict[str, Any], provenance: Optional[Provenance] = None
) -> Path:
    """Write a JSON record; floats keep their shortest round-trip repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = dict(payload)
    if provenance is not None:
        record["config_hash"] = provenance.config_hash
        record["seed"] = provenance.seed
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    logging.debug("Wrote %s", path)
    return path


def read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON record: {e}") from e


def save_run_record(path: Path, config: Dict[str, Any], provenance: Provenance) -> Path:
    """Resolved configuration next to the results it produced."""
    return write_json(path, {"config": config}, provenance)


def load_run_record(path: Path) -> Tuple[Dict[str, Any], Provenance]:
    record = read_json(path)
    try:
        provenance = Provenance(str(record["config_hash"]), int(record["seed"]))
        return record["config"], provenance
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: not a run record: {e}") from e


def save_knots(
    path: Path, knots: KnotHierarchy, tree: Optional[PartitionTree] = None
) -> Path:
    """Knot hierarchy and optional partition tree as human-readable JSON."""
    payload: Dict[str, Any] = {"knots": knots.to_dict()}
    if tree is not None:
        payload["tree"] = tree.to_dict()
    return write_json(path, payload)


def load_knots(path: Path) -> Tuple[KnotHierarchy, Optional[PartitionTree]]:
    record = read_json(path)
    if "knots" not in record:
        raise DataError(f"{path}: no 'knots' entry")
    knots = KnotHierarchy.from_dict(record["knots"])
    tree = PartitionTree.from_dict(record["tree"]) if "tree" in record else None
    return knots, tree
