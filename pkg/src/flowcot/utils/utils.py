from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp


class FlowCotError(RuntimeError):
    """Base class for errors the command line reports without a traceback."""


class ConfigurationError(FlowCotError):
    """Raised when required configuration is missing or invalid."""


class StateError(FlowCotError, ValueError):
    """Raised when a reasoning state violates its invariants or is used where it cannot be."""


class UnreachableContextError(FlowCotError, LookupError):
    """Raised when a model is asked about a context its table does not cover."""


class BudgetExceededError(FlowCotError):
    """Raised when exact enumeration would exceed its budget."""

    def __init__(self, message: str, *, required: int) -> None:
        super().__init__(message)
        self.required = required


class ZeroProbabilityConditioningError(FlowCotError, ArithmeticError):
    """Raised when conditioning on an answer the state can never reach."""


class DivergenceError(FlowCotError):
    """Raised by the training loop when parameters blow up."""

    def __init__(
        self,
        message: str,
        *,
        step: int,
        gate: str,
        magnitude: float,
        records: list | None = None,
    ) -> None:
        super().__init__(message)
        self.step = step
        self.gate = gate
        self.magnitude = magnitude
        self.records = records or []


class CheckpointError(FlowCotError):
    """Raised when a policy checkpoint cannot be read or is malformed."""


class OutputExistsError(FlowCotError, FileExistsError):
    """Raised when an output file exists and overwriting was not requested."""


def get_env_var(name: str) -> str:
    """
    Read a required environment variable.

    Parameters
    ----------
    name:
        Name of the environment variable.

    Returns
    -------
    str
        The value of the environment variable.

    Raises
    ------
    ConfigurationError
        If the variable is unset or empty.
    """
    value = os.getenv(name)
    if not value:
        raise ConfigurationError(
            f"Environment variable {name!r} is not set. "
            "Set it or pass the corresponding command-line flag."
        )
    return value


def env_or_default(name: str, default: str) -> str:
    """Return an optional environment variable, falling back to ``default``."""
    try:
        return get_env_var(name)
    except ConfigurationError:
        return default


def print_section_title(title: str) -> None:
    """
    Print a terminal-friendly section header.

    Parameters
    ----------
    title:
        Title to print.
    """
    bar = "=" * len(title)
    print(f"\n{bar}\n{title}\n{bar}\n")


# --- log-domain arithmetic ---------------------------------------------------

LOG_FLOOR = -60.0
"""Log-probabilities below this value are clamped before taking ratios."""

NORMALIZATION_TOL = 1e-9


def log_normalize(logits: np.ndarray) -> np.ndarray:
    """
    Log-softmax over the last axis, honouring ``-inf`` entries as masked.

    Parameters
    ----------
    logits:
        Unnormalized log-weights. Entries equal to ``-inf`` stay ``-inf``.

    Returns
    -------
    np.ndarray
        Array of the same shape whose log-sum-exp along the last axis is 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def clamp_log(value: float) -> tuple[float, bool]:
    """Clamp a log-probability to :data:`LOG_FLOOR`; the flag reports clamping."""
    if value < LOG_FLOOR:
        return LOG_FLOOR, True
    return float(value), False


def relative_error(a: np.ndarray | float, b: np.ndarray | float, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / scale


# --- seeding and hashing -----------------------------------------------------


def stable_key(value: int | str) -> int:
    """Map an int or string onto a non-negative 32-bit spawn key."""
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise ValueError(f"Spawn keys must be non-negative, got {value}")
        return int(value)
    digest = hashlib.sha256(str(value).encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    """
    Derive an independent random stream from the run seed.

    The stream is a Philox (counter-based) generator keyed by
    ``SeedSequence(seed, spawn_key=keys)``, so the same ``(seed, keys)`` always
    yields the same numbers no matter which worker asks for them.

    Parameters
    ----------
    seed:
        Root seed of the run.
    *keys:
        Stream path, e.g. ``("rollout", instance_id)``.

    Returns
    -------
    np.random.Generator
        Fresh generator for that stream.
    """
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(stable_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def canonical_json(payload: Any) -> str:
    """Serialize with sorted keys and compact separators (platform independent)."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(payload: Mapping[str, Any]) -> str:
    """Hex sha256 of :func:`canonical_json` of ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def fsum_mean(values: Iterable[float]) -> float:
    """Order-independent mean (``math.fsum`` is exactly rounded); ``nan`` when empty."""
    values = list(values)
    if not values:
        return float("nan")
    return math.fsum(values) / len(values)


# --- files -------------------------------------------------------------------


def ensure_writable(path: Path, *, force: bool) -> Path:
    """
    Refuse to clobber an existing output unless ``force`` is set.

    Raises
    ------
    OutputExistsError
        If ``path`` exists and ``force`` is false.
    """
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"Refusing to overwrite {path} (pass --force to replace it).")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]], *, meta: Mapping[str, Any] | None = None) -> int:
    """
    Write rows as JSON Lines in iteration order.

    Parameters
    ----------
    path:
        Destination file (overwritten).
    rows:
        Records to write.
    meta:
        Optional header record, written first as ``{"meta": {...}}``.

    Returns
    -------
    int
        Number of data rows written (the meta line excluded).
    """
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": dict(meta)}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")
            count += 1
    return count


def read_jsonl(path: Path) -> Iterator[dict]:
    """Yield records from a JSON Lines file, skipping blank and meta lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "meta" in record and len(record) == 1:
                continue
            yield record


def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    *,
    meta: Mapping[str, Any] | None = None,
) -> int:
    """
    Write a CSV table, optionally preceded by a ``# key=value`` meta line.

    Returns
    -------
    int
        Number of data rows written.
    """
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if meta is not None:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
            count += 1
    return count


def _csv_cell(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.10g}"
    return value
