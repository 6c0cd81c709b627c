"""Spectral diagnostics for weight updates.

Conventions for the zero matrix: stable rank, effective rank, singular-value
counts and block Gini are all 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .adapters import BlockGrid, partition
from .matrix_core import as_matrix, dumps_json, format_float, numeric_rank, singular_values


def _spectrum(sv) -> np.ndarray:
    s = np.asarray(sv, dtype=np.float64).ravel()
    if np.any(s < 0):
        raise ValueError("singular values must be nonnegative")
    return s


def stable_rank(m) -> float:
    """||M||_F^2 / ||M||_2^2."""
    s = singular_values(m)
    if s[0] == 0.0:
        return 0.0
    # normalize first so that scaling M leaves the ratio unchanged to roundoff
    t = s / s[0]
    return float(np.sum(t * t))


def effective_rank(sv) -> float:
    """exp of the Shannon entropy of ``sv / sum(sv)``; zero entries are dropped."""
    s = _spectrum(sv)
    s = s[s > 0]
    if s.size == 0:
        return 0.0
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def count_above_fraction(sv, frac: float = 0.01) -> int:
    """Number of singular values strictly greater than ``frac * max(sv)``."""
    if not 0 < frac < 1:
        raise ValueError("frac must lie in (0, 1)")
    s = _spectrum(sv)
    top = s.max() if s.size else 0.0
    if top == 0.0:
        return 0
    return int(np.count_nonzero(s > frac * top))


def energy(sv) -> float:
    s = _spectrum(sv)
    return float(np.sum(s * s))


def gini(values) -> float:
    """Gini coefficient sum_ij |v_i - v_j| / (2 k^2 mean(v)) of nonnegative values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    k = v.size
    if k == 0 or v.sum() == 0.0:
        return 0.0
    # closed form of the pairwise sum over sorted values
    v = np.sort(v)
    ranks = np.arange(1, k + 1)
    total = 2.0 * np.sum((2 * ranks - k - 1) * v)
    return float(total / (2.0 * k * k * v.mean()))


def block_norms(m, grid: BlockGrid) -> np.ndarray:
    blocks = partition(m, grid)
    return np.array([[np.linalg.norm(b) for b in row] for row in blocks])


def block_gini(m, grid: BlockGrid) -> float:
    """Gini coefficient of the per-block Frobenius norms of ``m``."""
    return gini(block_norms(m, grid))


@dataclass
class SpectralReport:
    stable_rank: float
    effective_rank: float
    count_above_1pct: int
    energy: float
    numeric_rank: int
    block_gini: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    def csv_row(self, matrix_id: str) -> str:
        gini_txt = "" if self.block_gini is None else format_float(self.block_gini)
        return ",".join([
            matrix_id,
            format_float(self.stable_rank),
            format_float(self.effective_rank),
            str(self.count_above_1pct),
            format_float(self.energy),
            gini_txt,
        ])


CSV_HEADER = "matrix_id,stable_rank,effective_rank,count_1pct,energy,block_gini"


def spectral_report(m, grid: Optional[BlockGrid] = None) -> SpectralReport:
    m = as_matrix(m)
    s = singular_values(m)
    return SpectralReport(
        stable_rank=stable_rank(m),
        effective_rank=effective_rank(s),
        count_above_1pct=count_above_fraction(s, 0.01),
        energy=energy(s),
        numeric_rank=numeric_rank(m),
        block_gini=None if grid is None else block_gini(m, grid),
    )
