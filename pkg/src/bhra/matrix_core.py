"""Dense float64 matrix helpers and spectral primitives.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64.  Every
public function validates its inputs eagerly and returns a fresh array, so
callers can treat matrices as values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_RANK_TOL = 1e-10


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce ``m`` to a finite 2-D float64 array (copying)."""
    arr = np.array(m, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    """Entrywise product of two equally shaped matrices."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: Optional[np.ndarray] = None
    right_vectors: Optional[np.ndarray] = None

    def reconstruct(self) -> np.ndarray:
        if self.left_vectors is None or self.right_vectors is None:
            raise ValueError("factors were not computed")
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(m, compute_vectors: bool = False) -> SvdResult:
    """Thin SVD.  ``right_vectors`` holds V (not V^T), so M = U diag(s) V^T."""
    m = as_matrix(m)
    try:
        if compute_vectors:
            u, s, vt = np.linalg.svd(m, full_matrices=False)
            return SvdResult(s, u, vt.T)
        s = np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge for {m.shape} input: {exc}") from exc
    return SvdResult(s)


def singular_values(m) -> np.ndarray:
    return svd(m).singular_values


def numeric_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values strictly above ``tol * sigma_max``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m) -> float:
    return float(singular_values(m)[0])


# -- text serialization ----------------------------------------------------

def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_matrix(m) -> str:
    """``rows cols`` header, then one line per row of space-separated values."""
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(format_float(v) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def loads_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad header line: {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be positive")
    body = lines[1:]
    if len(body) != rows:
        raise ValueError(f"expected {rows} rows, found {len(body)}")
    data = []
    for i, ln in enumerate(body):
        vals = [float(tok) for tok in ln.split()]
        if len(vals) != cols:
            raise ValueError(f"row {i} has {len(vals)} entries, expected {cols}")
        data.append(vals)
    return as_matrix(data)


def save_matrix(path, m) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_matrix(m))


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return loads_matrix(fh.read())


def dumps_json(obj) -> str:
    """JSON text with every float written to 17 significant digits.

    Non-finite floats become ``null``; numpy scalars and arrays are accepted.
    """
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj) if np.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")
