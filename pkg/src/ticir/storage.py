"""On-disk containers: raw float32 row matrices with JSON sidecar manifests.

The binary file holds little-endian 32-bit floats in row-major order; the
manifest lives next to it at ``<path>.json`` and records the row ids plus
format-specific metadata. Feature stores, retrieval indexes and pseudo-token
sets all share this container.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

_DTYPE = np.dtype("<f4")


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_matrix(path: str | Path, matrix: np.ndarray, manifest: dict) -> None:
    """Write rows as float32 LE plus a sidecar manifest.

    The manifest must already contain the id list and dimension keys the
    caller's format expects; this function only adds nothing and validates
    shape consistency.
    """
    matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if matrix.ndim != 2:
        raise InputError(f"matrix must be 2-D, got shape {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(matrix.astype(_DTYPE).tobytes())
    tmp.replace(path)
    mtmp = manifest_path(path).with_suffix(".json.tmp")
    mtmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    mtmp.replace(manifest_path(path))


def load_matrix(path: str | Path, n_rows: int, dim: int) -> np.ndarray:
    """Read a float32 row matrix back as float64, checking the byte count."""
    path = Path(path)
    raw = path.read_bytes()
    expected = n_rows * dim * _DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path} holds {len(raw)} bytes, expected {expected} for {n_rows}x{dim} float32"
        )
    return np.frombuffer(raw, dtype=_DTYPE).reshape(n_rows, dim).astype(np.float64)


def load_manifest(path: str | Path) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"manifest {mpath} must be a JSON object")
    return manifest


def save_feature_store(path, ids, matrix, normalized: bool) -> None:
    """Persist an id-addressed feature matrix {ids, dim, normalized}."""
    ids = list(ids)
    matrix = np.asarray(matrix, dtype=np.float64)
    if len(ids) != matrix.shape[0]:
        raise InputError(f"{len(ids)} ids for {matrix.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise InputError("duplicate ids in feature store")
    save_matrix(path, matrix, {"ids": ids, "dim": int(matrix.shape[1]), "normalized": bool(normalized)})


def load_feature_store(path) -> tuple[list[str], np.ndarray, bool]:
    manifest = load_manifest(path)
    for key in ("ids", "dim", "normalized"):
        if key not in manifest:
            raise FormatError(f"feature-store manifest missing key {key!r}")
    ids = [str(i) for i in manifest["ids"]]
    matrix = load_matrix(path, len(ids), int(manifest["dim"]))
    return ids, matrix, bool(manifest["normalized"])
