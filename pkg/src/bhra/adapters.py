"""LoRA, HiRA, ABBA and block-Hadamard (BHRA) adapters on a single linear layer.

An adapter is described by an :class:`AdapterConfig` and holds its trainable
factors in an :class:`AdapterState`.  BHRA factors are stored as 4-D arrays
indexed ``[i, j]`` by block, so ``state.params["B"][i, j]`` is the
``(m/p) x r_b`` up-projection of block ``(i, j)``.

The scale ``alpha / r_tot`` is applied only in :func:`forward` and
:func:`merge`; the ``delta_*`` functions return the unscaled update.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .matrix_core import (
    DEFAULT_RANK_TOL,
    ShapeError,
    as_matrix,
    dumps_matrix,
    loads_matrix,
    numeric_rank,
)

KINDS = ("lora", "hira", "abba", "bhra")


class ConfigError(ValueError):
    """Invalid adapter configuration (kind, budget or divisibility)."""


def check_kind(kind: str) -> str:
    k = kind.lower()
    if k not in KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {KINDS}")
    return k


@dataclass(frozen=True)
class BlockGrid:
    row_parts: int
    col_parts: int

    def __post_init__(self):
        if self.row_parts < 1 or self.col_parts < 1:
            raise ConfigError("grid parts must be positive")

    @classmethod
    def square(cls, b: int) -> "BlockGrid":
        return cls(b, b)

    @property
    def num_blocks(self) -> int:
        return self.row_parts * self.col_parts

    def check(self, m: int, n: int) -> None:
        if m % self.row_parts or n % self.col_parts:
            raise ConfigError(
                f"{self.row_parts}x{self.col_parts} grid does not divide a {m}x{n} matrix"
            )

    def block_shape(self, m: int, n: int) -> tuple:
        self.check(m, n)
        return m // self.row_parts, n // self.col_parts


def partition(m, grid: BlockGrid) -> list:
    """Split ``m`` into a nested list ``blocks[i][j]`` of contiguous blocks."""
    m = as_matrix(m)
    mb, nb = grid.block_shape(*m.shape)
    return [
        [m[i * mb:(i + 1) * mb, j * nb:(j + 1) * nb].copy() for j in range(grid.col_parts)]
        for i in range(grid.row_parts)
    ]


def assemble(blocks, grid: BlockGrid) -> np.ndarray:
    if len(blocks) != grid.row_parts or any(len(row) != grid.col_parts for row in blocks):
        raise ShapeError("block layout does not match grid")
    shapes = {np.shape(blk) for row in blocks for blk in row}
    if len(shapes) != 1:
        raise ShapeError(f"blocks must share one shape, got {sorted(shapes)}")
    return np.block([[as_matrix(blk) for blk in row] for row in blocks])


def to_blocks(m: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """(p, q, m/p, n/q) copy of ``m`` arranged by block."""
    mb, nb = grid.block_shape(*m.shape)
    return m.reshape(grid.row_parts, mb, grid.col_parts, nb).transpose(0, 2, 1, 3).copy()


def from_blocks(t: np.ndarray) -> np.ndarray:
    p, q, mb, nb = t.shape
    return t.transpose(0, 2, 1, 3).reshape(p * mb, q * nb)


@dataclass(frozen=True)
class AdapterConfig:
    kind: str
    r_tot: int
    b: int = 1
    alpha: Optional[float] = None
    grid: Optional[BlockGrid] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", check_kind(self.kind))
        if self.r_tot < 1:
            raise ConfigError("r_tot must be positive")
        if self.b < 1:
            raise ConfigError("b must be positive")
        if self.kind != "bhra" and self.b != 1:
            raise ConfigError(f"{self.kind} adapters use b=1, got b={self.b}")
        if self.r_tot % self.b:
            raise ConfigError(f"b={self.b} does not divide r_tot={self.r_tot}")
        if self.kind == "abba" and self.r_tot % 2:
            raise ConfigError("ABBA splits r_tot into two equal halves; r_tot must be even")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.r_tot))
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.grid is None:
            object.__setattr__(self, "grid", BlockGrid.square(self.b))

    @property
    def r_b(self) -> int:
        return self.r_tot // self.b

    @property
    def scale(self) -> float:
        return self.alpha / self.r_tot

    def check_shape(self, m: int, n: int) -> None:
        if self.kind == "bhra":
            self.grid.check(m, n)


@dataclass
class FrozenWeight:
    w0: np.ndarray
    r0: int

    @classmethod
    def from_matrix(cls, w0, tol: float = DEFAULT_RANK_TOL) -> "FrozenWeight":
        w = as_matrix(w0, "w0")
        w.setflags(write=False)
        return cls(w, numeric_rank(w, tol))

    @property
    def shape(self) -> tuple:
        return self.w0.shape


@dataclass
class AdapterState:
    kind: str
    m: int
    n: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdapterState":
        return AdapterState(self.kind, self.m, self.n, {k: v.copy() for k, v in self.params.items()})

    def block(self, i: int, j: int) -> tuple:
        """(B_ij, A_ij) of a BHRA state."""
        _require(self, "bhra")
        return self.params["B"][i, j], self.params["A"][i, j]


def factor_shapes(cfg: AdapterConfig, m: int, n: int) -> Dict[str, tuple]:
    cfg.check_shape(m, n)
    r = cfg.r_tot
    if cfg.kind == "lora":
        return {"L1": (m, r), "L2": (r, n)}
    if cfg.kind == "hira":
        return {"B": (m, r), "A": (r, n)}
    if cfg.kind == "abba":
        h = r // 2
        return {"B1": (m, h), "A1": (h, n), "B2": (m, h), "A2": (h, n)}
    p, q = cfg.grid.row_parts, cfg.grid.col_parts
    mb, nb = cfg.grid.block_shape(m, n)
    return {"B": (p, q, mb, cfg.r_b), "A": (p, q, cfg.r_b, nb)}


def param_count(cfg: AdapterConfig, m: int, n: int) -> int:
    return sum(int(np.prod(s)) for s in factor_shapes(cfg, m, n).values())


# A-side (down-projection) factors are random; B-side factors start at zero.
# ABBA keeps its second pair random so that gradients reach B1 at step 0.
_ZERO_FACTORS = {"lora": ("L1",), "hira": ("B",), "abba": ("B1",), "bhra": ("B",)}


def init_adapter(cfg: AdapterConfig, m: int, n: int, seed: int) -> AdapterState:
    """Zero-update initialization; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in factor_shapes(cfg, m, n).items():
        if name in _ZERO_FACTORS[cfg.kind]:
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return AdapterState(cfg.kind, m, n, params)


def _require(state: AdapterState, kind: str) -> None:
    if state.kind != kind:
        raise ConfigError(f"expected a {kind} state, got {state.kind}")


def _check_w0(w0: FrozenWeight, state: AdapterState) -> np.ndarray:
    if w0.shape != (state.m, state.n):
        raise ShapeError(f"frozen weight {w0.shape} does not match adapter {(state.m, state.n)}")
    return w0.w0


def delta_lora(state: AdapterState) -> np.ndarray:
    _require(state, "lora")
    return state.params["L1"] @ state.params["L2"]


def delta_hira(w0: FrozenWeight, state: AdapterState) -> np.ndarray:
    _require(state, "hira")
    w = _check_w0(w0, state)
    return w * (state.params["B"] @ state.params["A"])


def delta_abba(state: AdapterState) -> np.ndarray:
    _require(state, "abba")
    p = state.params
    return (p["B1"] @ p["A1"]) * (p["B2"] @ p["A2"])


def capacity_bhra(state: AdapterState) -> np.ndarray:
    """Block matrix whose (i, j) block is B_ij @ A_ij."""
    _require(state, "bhra")
    return from_blocks(np.matmul(state.params["B"], state.params["A"]))


def delta_bhra(w0: FrozenWeight, state: AdapterState) -> np.ndarray:
    # aligned disjoint blocks: the block Hadamard product is the plain one
    w = _check_w0(w0, state)
    return capacity_bhra(state) * w


def delta(w0: Optional[FrozenWeight], state: AdapterState) -> np.ndarray:
    """Unscaled update of any adapter kind."""
    if state.kind == "lora":
        return delta_lora(state)
    if state.kind == "abba":
        return delta_abba(state)
    if w0 is None:
        raise ValueError(f"{state.kind} needs the frozen weight")
    if state.kind == "hira":
        return delta_hira(w0, state)
    return delta_bhra(w0, state)


def _adapter_output_blockwise(w: np.ndarray, state: AdapterState, x: np.ndarray) -> np.ndarray:
    """Unscaled Delta W @ x without materializing Delta W."""
    p = state.params
    if state.kind == "lora":
        z = p["L2"] @ x
        return p["L1"] @ z
    if state.kind == "hira":
        return (w * (p["B"] @ p["A"])) @ x
    if state.kind == "abba":
        return ((p["B1"] @ p["A1"]) * (p["B2"] @ p["A2"])) @ x
    B, A = p["B"], p["A"]
    p_parts, q_parts = B.shape[:2]
    mb, nb = B.shape[2], A.shape[3]
    out = np.zeros((state.m, x.shape[1]))
    for i in range(p_parts):
        rows = slice(i * mb, (i + 1) * mb)
        for j in range(q_parts):
            cols = slice(j * nb, (j + 1) * nb)
            mask = w[rows, cols] * (B[i, j] @ A[i, j])
            out[rows] += mask @ x[cols]
    return out


def forward(
    w0: FrozenWeight,
    state: AdapterState,
    cfg: AdapterConfig,
    x,
    path: str = "materialized",
) -> np.ndarray:
    """Layer output ``W0 x + (alpha / r_tot) * Delta W x``.

    ``path="materialized"`` forms Delta W explicitly; ``path="blockwise"``
    applies one mask ``W0_ij * C_ij`` per block to the matching input slice.
    """
    x = as_matrix(x, "x")
    w = _check_w0(w0, state)
    if x.shape[0] != state.n:
        raise ShapeError(f"input has {x.shape[0]} rows, layer expects {state.n}")
    if cfg.kind != state.kind:
        raise ConfigError("config and state kinds differ")
    base = w @ x
    if path == "materialized":
        upd = delta(w0, state) @ x
    elif path == "blockwise":
        upd = _adapter_output_blockwise(w, state, x)
    else:
        raise ValueError(f"unknown forward path {path!r}")
    return base + cfg.scale * upd


def merge(w0: FrozenWeight, state: AdapterState, cfg: AdapterConfig) -> np.ndarray:
    """Fold the scaled update into the frozen weight for inference."""
    return _check_w0(w0, state) + cfg.scale * delta(w0, state)


def rank_bound(kind: str, m: int, n: int, r_tot: int, b: int = 1, r0: int = 0) -> int:
    kind = check_kind(kind)
    if r0 > min(m, n):
        raise ConfigError("r0 cannot exceed min(m, n)")
    if kind == "lora":
        bound = r_tot
    elif kind == "hira":
        bound = r0 * r_tot
    elif kind == "abba":
        bound = (r_tot // 2) ** 2
    else:
        bound = b * r0 * r_tot
    return min(bound, m, n)


def rank_witness():
    """Rank-1 W0 (4x4 ones), b=2, r_tot=2, whose BHRA update has rank 4 > r0 * r_tot.

    Every block carries a rank-1 product e_u e_v^T chosen so that the assembled
    capacity is a permutation matrix.
    """
    cfg = AdapterConfig("bhra", r_tot=2, b=2)
    w0 = FrozenWeight.from_matrix(np.ones((4, 4)))
    state = init_adapter(cfg, 4, 4, seed=0)
    B = np.zeros_like(state.params["B"])
    A = np.zeros_like(state.params["A"])
    # (row in block, col in block) of the single 1 in each block
    spots = {(0, 0): (0, 0), (0, 1): (1, 0), (1, 0): (0, 1), (1, 1): (1, 1)}
    for (i, j), (u, v) in spots.items():
        B[i, j, u, 0] = 1.0
        A[i, j, 0, v] = 1.0
    state.params["B"], state.params["A"] = B, A
    return w0, state, cfg


def rank_trial(kind: str, rng: np.random.Generator, max_dim: int = 16) -> dict:
    """Draw one random instance and compare the update's rank with its bound.

    W0 is a product of Gaussian factors with a random inner rank, and every
    adapter factor is Gaussian (not the zero init).  The bound uses the
    measured rank of W0.
    """
    kind = check_kind(kind)
    b = int(rng.choice([1, 2, 4])) if kind == "bhra" else 1
    r = 2 * b * int(rng.integers(1, 3))
    m, n = b * int(rng.integers(1, max_dim // b + 1)), b * int(rng.integers(1, max_dim // b + 1))
    k = int(rng.integers(1, min(m, n) + 1))
    w0 = FrozenWeight.from_matrix(rng.standard_normal((m, k)) @ rng.standard_normal((k, n)))
    cfg = AdapterConfig(kind, r, b)
    state = init_adapter(cfg, m, n, seed=0)
    state.params = {name: rng.standard_normal(v.shape) for name, v in state.params.items()}
    rank = numeric_rank(delta(w0, state))
    bound = rank_bound(kind, m, n, r, b, w0.r0)
    return {"kind": kind, "m": m, "n": n, "r_tot": r, "b": b, "r0": w0.r0, "rank": rank, "bound": bound}


# -- checkpoints -------------------------------------------------------------

def _named_matrices(state: AdapterState):
    for name, arr in state.params.items():
        if arr.ndim == 2:
            yield name, arr
        else:
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    yield f"{name}[{i},{j}]", arr[i, j]


def dumps_checkpoint(state: AdapterState, cfg: AdapterConfig) -> str:
    doc = {
        "kind": cfg.kind,
        "m": state.m,
        "n": state.n,
        "r_tot": cfg.r_tot,
        "b": cfg.b,
        "alpha": cfg.alpha,
        "factors": [
            {"name": name, "matrix": dumps_matrix(arr)} for name, arr in _named_matrices(state)
        ],
    }
    return json.dumps(doc, indent=1)


def loads_checkpoint(text: str) -> tuple:
    """Inverse of :func:`dumps_checkpoint`; returns ``(state, cfg)``."""
    doc = json.loads(text)
    cfg = AdapterConfig(doc["kind"], int(doc["r_tot"]), int(doc["b"]), float(doc["alpha"]))
    m, n = int(doc["m"]), int(doc["n"])
    shapes = factor_shapes(cfg, m, n)
    params = {name: np.zeros(shape) for name, shape in shapes.items()}
    for entry in doc["factors"]:
        name = entry["name"]
        mat = loads_matrix(entry["matrix"])
        if "[" in name:
            base, idx = name[:-1].split("[")
            i, j = (int(t) for t in idx.split(","))
            target = params[base][i, j]
        else:
            target = params[name]
        if target.shape != mat.shape:
            raise ShapeError(f"factor {name} has shape {mat.shape}, expected {target.shape}")
        target[...] = mat
    return AdapterState(cfg.kind, m, n, params), cfg
