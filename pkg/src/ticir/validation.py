"""Input validation helpers, in the spirit of sklearn's check_array."""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import InputError, NumericError


def check_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InputError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def check_matrix(x, cols: int | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally with fixed column count."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise InputError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise InputError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise InputError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise InputError(f"{name} must be a finite non-negative number, got {value}")
    return value


def check_in_unit_interval(value, name: str, open_left=False, open_right=False) -> float:
    value = float(value)
    lo_ok = value > 0 if open_left else value >= 0
    hi_ok = value < 1 if open_right else value <= 1
    if not (np.isfinite(value) and lo_ok and hi_ok):
        raise InputError(f"{name}={value} is outside the allowed unit-interval range")
    return value


def unit_normalize(x: np.ndarray, name: str = "vector") -> np.ndarray:
    """Scale to unit L2 norm; a zero vector is a numeric error."""
    norm = float(np.linalg.norm(x))
    if norm == 0.0 or not np.isfinite(norm):
        raise NumericError(f"cannot normalize {name} with norm {norm}")
    return x / norm


def stable_seed_words(*parts) -> list[int]:
    """Derive 32-bit seed words from arbitrary parts via a stable hash.

    Python's builtin hash() is salted per process, so seeds derived from
    strings must go through an explicit digest to be reproducible.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
