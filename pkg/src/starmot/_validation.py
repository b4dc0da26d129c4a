"""Input checks shared by the estimators, the simulator and the CLI."""

from __future__ import annotations

import math
from numbers import Integral, Real

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending parameter."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class EvaluationError(ValueError):
    """Run records and ground truth cannot be compared."""


def check_int(name: str, value, *, min_value: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if min_value is not None and value < min_value:
        raise ConfigError(name, f"must be >= {min_value}, got {value}")
    return int(value)


def check_float(name: str, value, *, min_value: float | None = None, strict: bool = False,
                max_value: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, Real) or not math.isfinite(value):
        raise ConfigError(name, f"expected a finite number, got {value!r}")
    value = float(value)
    if min_value is not None:
        if strict and not value > min_value:
            raise ConfigError(name, f"must be > {min_value}, got {value}")
        if not strict and value < min_value:
            raise ConfigError(name, f"must be >= {min_value}, got {value}")
    if max_value is not None and value > max_value:
        raise ConfigError(name, f"must be <= {max_value}, got {value}")
    return value


def check_weights(weights, name: str = "weights") -> tuple[float, float, float]:
    try:
        w = tuple(float(x) for x in weights)
    except TypeError:
        raise ConfigError(name, f"expected three numbers, got {weights!r}") from None
    if len(w) != 3:
        raise ConfigError(name, f"expected three numbers, got {len(w)}")
    if any(not math.isfinite(x) or x < 0 for x in w):
        raise ConfigError(name, f"weights must be finite and non-negative, got {w}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ConfigError(name, f"weights must sum to 1, got {sum(w)}")
    return w


def normalize_weights(weights) -> tuple[float, float, float]:
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if not s > 0:
        raise ConfigError("lambda", "at least one criterion weight must be positive")
    return tuple(float(x) for x in w / s)


def check_score_matrix(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {s.shape}")
    return s
