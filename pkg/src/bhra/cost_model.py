"""Closed-form FLOP and memory accounting for LoRA, HiRA and BHRA layers.

Convention: a scalar multiply and a scalar add each cost one FLOP, so a
length-k dot product costs ``2k - 1``.  The dense base product ``W0 X`` is
not part of any adapter count.  ``T`` is the number of tokens (columns of X).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def _positive(**kw) -> None:
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{k} must be a positive integer, got {v}")


def _divides(b: int, **kw) -> None:
    for k, v in kw.items():
        if v % b:
            raise ValueError(f"b={b} does not divide {k}={v}")


def flops_lora_train(m: int, n: int, r: int, T: int) -> int:
    """Z = A X then Y = B Z: ``(2n-1) r T + (2r-1) m T``."""
    _positive(m=m, n=n, r=r, T=T)
    return 2 * r * (m + n) * T - (r + m) * T


def flops_hira_adapter(m: int, n: int, r: int, T: int) -> int:
    _positive(m=m, n=n, r=r, T=T)
    return (2 * n - 1) * r * T + (2 * m - 1) * r * T


def flops_bhra_adapter(m: int, n: int, r: int, b: int, T: int) -> int:
    """Inference overhead after folding the masks: same two rank-r GEMMs as HiRA."""
    _positive(m=m, n=n, r=r, b=b, T=T)
    _divides(b, m=m, n=n, r=r)
    return (2 * n - 1) * r * T + (2 * m - 1) * r * T


def flops_hira_train(m: int, n: int, r: int, T: int) -> int:
    """HiRA training cost: low-rank GEMMs, the ``mnT`` mask products and one mask refresh."""
    _positive(m=m, n=n, r=r, T=T)
    return 2 * r * (m + n) * T - 2 * r * T + m * n * T + 2 * m * n * r


def bhra_train_stages(m: int, n: int, r: int, b: int, T: int) -> dict:
    """Stage terms of the BHRA training count; their sum is :func:`flops_bhra_train`."""
    _positive(m=m, n=n, r=r, b=b, T=T)
    _divides(b, m=m, n=n, r=r)
    return {
        "projection": (2 * n - b) * r * T,
        "reconstruction": (2 * m - b) * r * T,
        "mask": (m * n // (b * b)) * T,
        "refresh": 2 * m * n * r // b,
    }


def flops_bhra_train(m: int, n: int, r: int, b: int, T: int) -> int:
    _positive(m=m, n=n, r=r, b=b, T=T)
    _divides(b, m=m, n=n, r=r)
    return 2 * r * (m + n) * T - 2 * b * r * T + (m * n // (b * b)) * T + 2 * m * n * r // b


def flops_gralora_train(m: int, n: int, r: int, k: int, T: int) -> int:
    """Block-LoRA limit (all W0 blocks equal to one) in its standard closed form
    ``(2n-k) r T + (2m-k) m T + (k-1) m T``.

    The middle term is kept as stated even though a block reconstruction
    GEMM would count ``(2r-k) m T``; see :func:`count_gralora_forward`.
    """
    _positive(m=m, n=n, r=r, k=k, T=T)
    _divides(k, m=m, n=n, r=r)
    return (2 * n - k) * r * T + (2 * m - k) * m * T + (k - 1) * m * T


def peak_memory(m: int, n: int, r: int, b: int, T: int,
                checkpointing: bool = False, persistent_masks: str = "full") -> int:
    """Peak adapter memory of one layer, in stored elements.

    Without checkpointing: ``rT`` cached projections plus one resident
    ``mn/b^2`` block mask.  With checkpointing: the ``rT`` cache plus the
    persistent masks, which total ``mn`` over all blocks
    (``persistent_masks="full"``) or ``mn/b^2`` when only one block's mask is
    kept (``persistent_masks="block"``).
    """
    _positive(m=m, n=n, r=r, b=b, T=T)
    _divides(b, m=m, n=n, r=r)
    block = m * n // (b * b)
    if not checkpointing:
        return r * T + block
    if persistent_masks == "full":
        return r * T + m * n
    if persistent_masks == "block":
        return r * T + block
    raise ValueError(f"persistent_masks must be 'full' or 'block', got {persistent_masks!r}")


@dataclass
class CostReport:
    m: int
    n: int
    r: int
    b: int
    T: int
    flops_train: int
    flops_adapter_inference: int
    peak_memory_elements: int
    peak_memory_checkpointed: int
    lora_train: int
    hira_train: int
    hira_adapter: int
    gralora_train: int

    def to_dict(self) -> dict:
        return asdict(self)


def cost_report(m: int, n: int, r: int, b: int, T: int) -> CostReport:
    return CostReport(
        m=m, n=n, r=r, b=b, T=T,
        flops_train=flops_bhra_train(m, n, r, b, T),
        flops_adapter_inference=flops_bhra_adapter(m, n, r, b, T),
        peak_memory_elements=peak_memory(m, n, r, b, T),
        peak_memory_checkpointed=peak_memory(m, n, r, b, T, checkpointing=True),
        lora_train=flops_lora_train(m, n, r, T),
        hira_train=flops_hira_train(m, n, r, T),
        hira_adapter=flops_hira_adapter(m, n, r, T),
        gralora_train=flops_gralora_train(m, n, r, b, T),
    )


# -- instrumented execution ---------------------------------------------------

class FlopCounter:
    """Runs numpy products while tallying FLOPs under the ``2k - 1`` convention."""

    def __init__(self):
        self.total = 0
        self.by_stage = {}
        self._stage = "other"

    def stage(self, name: str) -> "FlopCounter":
        self._stage = name
        self.by_stage.setdefault(name, 0)
        return self

    def _add(self, count: int) -> None:
        self.total += count
        self.by_stage[self._stage] = self.by_stage.get(self._stage, 0) + count

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        p, k = a.shape
        k2, q = b.shape
        assert k == k2
        self._add(p * q * (2 * k - 1))
        return a @ b

    def hadamard(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        assert a.shape == b.shape
        self._add(a.size)
        return a * b

    def add(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        assert a.shape == b.shape
        self._add(a.size)
        return a + b


def count_lora_forward(m: int, n: int, r: int, T: int, seed: int = 0) -> FlopCounter:
    """Executes ``Y = B (A X)`` on random data and counts its FLOPs."""
    rng = np.random.default_rng(seed)
    A, B, X = rng.standard_normal((r, n)), rng.standard_normal((m, r)), rng.standard_normal((n, T))
    fc = FlopCounter()
    Z = fc.stage("projection").matmul(A, X)
    fc.stage("reconstruction").matmul(B, Z)
    return fc


def count_gralora_forward(m: int, n: int, r: int, k: int, T: int, seed: int = 0) -> FlopCounter:
    """k x k block-LoRA forward: per-block Z_ij, Y_ij, then sum of Y_ij over j."""
    _divides(k, m=m, n=n, r=r)
    rng = np.random.default_rng(seed)
    mb, nb, rb = m // k, n // k, r // k
    X = rng.standard_normal((n, T))
    fc = FlopCounter()
    for i in range(k):
        acc = None
        for j in range(k):
            A = rng.standard_normal((rb, nb))
            B = rng.standard_normal((mb, rb))
            Z = fc.stage("projection").matmul(A, X[j * nb:(j + 1) * nb])
            Y = fc.stage("reconstruction").matmul(B, Z)
            acc = Y if acc is None else fc.stage("sum").add(acc, Y)
    return fc


def count_bhra_train(m: int, n: int, r: int, b: int, T: int, seed: int = 0) -> FlopCounter:
    """Executes the four per-block training stages of BHRA and counts FLOPs.

    For each block: projection ``Z_ij = A_ij X_j``, reconstruction
    ``Y_ij = B_ij Z_ij``, capacity refresh ``C_ij = B_ij A_ij`` and the mask
    ``H_ij = W0_ij * C_ij`` evaluated online once per token.
    """
    _positive(m=m, n=n, r=r, b=b, T=T)
    _divides(b, m=m, n=n, r=r)
    rng = np.random.default_rng(seed)
    mb, nb, rb = m // b, n // b, r // b
    W0 = rng.standard_normal((m, n))
    X = rng.standard_normal((n, T))
    fc = FlopCounter()
    for i in range(b):
        for j in range(b):
            A = rng.standard_normal((rb, nb))
            B = rng.standard_normal((mb, rb))
            Z = fc.stage("projection").matmul(A, X[j * nb:(j + 1) * nb])
            fc.stage("reconstruction").matmul(B, Z)
            C = fc.stage("refresh").matmul(B, A)
            w_ij = W0[i * mb:(i + 1) * mb, j * nb:(j + 1) * nb]
            for _ in range(T):
                fc.stage("mask").hadamard(w_ij, C)
    return fc
