"""Analytic adapter gradients, a central-difference oracle, and Adam.

All gradients are for the layer loss ``0.5 * ||(W0 + s * Delta W) x - y||_F^2``
with ``s = alpha / r_tot``.  They factor through the outer product
``G = g x^T`` of the output residual ``g`` and the input ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .adapters import AdapterConfig, AdapterState, BlockGrid, FrozenWeight, delta, init_adapter, to_blocks
from .matrix_core import ShapeError, as_matrix

Params = Dict[str, np.ndarray]


class BackpropContext:
    """Residual/input pair of one layer, with the lazily formed ``G = g x^T``."""

    def __init__(self, residual, inputs):
        self.residual = as_matrix(residual, "residual")
        self.input = as_matrix(inputs, "input")
        if self.residual.shape[1] != self.input.shape[1]:
            raise ShapeError("residual and input must share the token dimension T")
        self._outer = None

    @property
    def T(self) -> int:
        return self.input.shape[1]

    @property
    def outer(self) -> np.ndarray:
        if self._outer is None:
            self._outer = self.residual @ self.input.T
        return self._outer

    def block_slice(self, grid: BlockGrid, i: int, j: int) -> np.ndarray:
        """G_ij = g_i x_j^T, read out of the full outer product."""
        mb, nb = grid.block_shape(*self.outer.shape)
        return self.outer[i * mb:(i + 1) * mb, j * nb:(j + 1) * nb]


def _check(ctx: BackpropContext, state: AdapterState) -> None:
    if ctx.outer.shape != (state.m, state.n):
        raise ShapeError(f"G has shape {ctx.outer.shape}, adapter is {(state.m, state.n)}")


def grad_lora(ctx: BackpropContext, state: AdapterState, scale: float = 1.0) -> Params:
    _check(ctx, state)
    G = ctx.outer
    L1, L2 = state.params["L1"], state.params["L2"]
    return {"L1": scale * (G @ L2.T), "L2": scale * (L1.T @ G)}


def grad_hira(ctx: BackpropContext, w0: FrozenWeight, state: AdapterState, scale: float = 1.0) -> Params:
    _check(ctx, state)
    M = w0.w0 * ctx.outer
    B, A = state.params["B"], state.params["A"]
    return {"B": scale * (M @ A.T), "A": scale * (B.T @ M)}


def grad_bhra(ctx: BackpropContext, w0: FrozenWeight, state: AdapterState, scale: float = 1.0) -> Params:
    """Per-block gradients; block (i, j) only sees ``W0_ij * G_ij``."""
    _check(ctx, state)
    B, A = state.params["B"], state.params["A"]
    grid = BlockGrid(B.shape[0], B.shape[1])
    M = to_blocks(w0.w0, grid) * to_blocks(ctx.outer, grid)
    dB = scale * np.matmul(M, np.swapaxes(A, -1, -2))
    dA = scale * np.matmul(np.swapaxes(B, -1, -2), M)
    return {"B": dB, "A": dA}


def grad_abba(ctx: BackpropContext, state: AdapterState, scale: float = 1.0) -> Params:
    _check(ctx, state)
    G = ctx.outer
    p = state.params
    P = p["B1"] @ p["A1"]
    Q = p["B2"] @ p["A2"]
    GQ = G * Q
    GP = G * P
    return {
        "B1": scale * (GQ @ p["A1"].T),
        "A1": scale * (p["B1"].T @ GQ),
        "B2": scale * (GP @ p["A2"].T),
        "A2": scale * (p["B2"].T @ GP),
    }


def adapter_grad(ctx: BackpropContext, w0: FrozenWeight, state: AdapterState, cfg: AdapterConfig) -> Params:
    s = cfg.scale
    if state.kind == "lora":
        return grad_lora(ctx, state, s)
    if state.kind == "hira":
        return grad_hira(ctx, w0, state, s)
    if state.kind == "abba":
        return grad_abba(ctx, state, s)
    return grad_bhra(ctx, w0, state, s)


def layer_loss(w0: FrozenWeight, state: AdapterState, cfg: AdapterConfig, x, y) -> float:
    z = (w0.w0 + cfg.scale * delta(w0, state)) @ x
    r = z - y
    return 0.5 * float(np.sum(r * r))


def loss_and_grad(w0: FrozenWeight, state: AdapterState, cfg: AdapterConfig, x, y):
    """Loss value and analytic gradients of the regression layer loss."""
    z = (w0.w0 + cfg.scale * delta(w0, state)) @ x
    g = z - y
    ctx = BackpropContext(g, x)
    return 0.5 * float(np.sum(g * g)), adapter_grad(ctx, w0, state, cfg)


def fd_gradient(loss_fn: Callable[[Params], float], params: Params, eps: float = 1e-5) -> Params:
    """Central finite differences of ``loss_fn`` at ``params``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            f_plus = loss_fn(work)
            flat[idx] = old - eps
            f_minus = loss_fn(work)
            flat[idx] = old
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while differentiating {name}[{idx}]")
            gflat[idx] = (f_plus - f_minus) / (2 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic: Params, numeric: Params, abs_floor: float = 1e-9) -> float:
    """Largest ``|a - n| / max(|n|, |a|)`` over coordinates where ``|a - n| > abs_floor``."""
    worst = 0.0
    for k in analytic:
        a, nm = analytic[k], numeric[k]
        diff = np.abs(a - nm)
        denom = np.maximum(np.abs(a), np.abs(nm))
        over = diff > abs_floor
        if np.any(over):
            worst = max(worst, float(np.max(diff[over] / denom[over])))
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, adam: AdamState, lr: Optional[float] = None) -> Params:
    """One bias-corrected Adam(W) update.

    Returns new parameter arrays; the moment buffers and step counter in
    ``adam`` advance in place.  ``lr`` overrides ``adam.lr`` for this step
    (used by warmup schedules).
    """
    if set(params) != set(grads):
        raise ShapeError("params and grads carry different names")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(grads[k])):
            raise FloatingPointError(f"non-finite gradient for {k}")
    lr = adam.lr if lr is None else lr
    adam.step += 1
    bc1 = 1.0 - adam.beta1 ** adam.step
    bc2 = 1.0 - adam.beta2 ** adam.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if k not in adam.m:
            adam.m[k] = np.zeros_like(p)
            adam.v[k] = np.zeros_like(p)
        adam.m[k] = adam.beta1 * adam.m[k] + (1.0 - adam.beta1) * g
        adam.v[k] = adam.beta2 * adam.v[k] + (1.0 - adam.beta2) * (g * g)
        m_hat = adam.m[k] / bc1
        v_hat = adam.v[k] / bc2
        new = p - lr * m_hat / (np.sqrt(v_hat) + adam.eps)
        if adam.weight_decay:
            new = new - lr * adam.weight_decay * p
        out[k] = new
    return out


def _inner_rank(cfg: AdapterConfig) -> int:
    if cfg.kind == "abba":
        return cfg.r_tot // 2
    return cfg.r_b if cfg.kind == "bhra" else cfg.r_tot


def random_grad_problem(kind: str, rng: np.random.Generator, b: int = 1, max_dim: int = 16, max_T: int = 4,
                        residual_scale: float = 0.1):
    """Random layer, adapter state with nonzero factors, and regression data.

    Returns ``(cfg, state, w0, x, y)``; ``b`` only applies to BHRA.  Entries are
    scaled so that layer outputs are O(1), and targets sit ``residual_scale``
    away from the current output.  Central differences carry a roundoff error
    of roughly ``macheps * |z| * |residual| * m * T / eps``; with these scales
    it stays below the 1e-9 absolute floor of the gradient check, so the
    comparison measures the gradient formulas rather than cancellation in the
    loss.
    """
    b = b if kind == "bhra" else 1
    m = b * int(rng.integers(1, max_dim // b + 1))
    n = b * int(rng.integers(1, max_dim // b + 1))
    r = (2 if kind == "abba" else 1) * b * int(rng.integers(1, 3))
    T = int(rng.integers(1, max_T + 1))
    cfg = AdapterConfig(kind, r, b, alpha=float(rng.uniform(0.5, 2.0)) * r)
    state = init_adapter(cfg, m, n, 0)
    k = _inner_rank(cfg)
    state.params = {name: rng.standard_normal(v.shape) / np.sqrt(k) for name, v in state.params.items()}
    w0 = FrozenWeight.from_matrix(rng.standard_normal((m, n)) / np.sqrt(n))
    x = rng.standard_normal((n, T))
    z = (w0.w0 + cfg.scale * delta(w0, state)) @ x
    y = z + residual_scale * rng.standard_normal((m, T))
    return cfg, state, w0, x, y


def grad_check(cfg: AdapterConfig, state: AdapterState, w0: FrozenWeight, x, y, eps: float = 1e-5,
               abs_floor: float = 1e-9, details: bool = False):
    """Worst relative disagreement between analytic and finite-difference gradients.

    With ``details=True`` returns ``(relative, max_abs_diff, max_abs_grad)``.
    """
    def f(params):
        return layer_loss(w0, AdapterState(state.kind, state.m, state.n, params), cfg, x, y)

    _, analytic = loss_and_grad(w0, state, cfg, x, y)
    numeric = fd_gradient(f, state.params, eps=eps)
    rel = max_relative_error(analytic, numeric, abs_floor=abs_floor)
    if not details:
        return rel
    diff = max(float(np.max(np.abs(analytic[k] - numeric[k]))) for k in analytic)
    scale = max(float(np.max(np.abs(analytic[k]))) for k in analytic)
    return rel, diff, scale
