"""Low-rank and Hadamard-gated weight adapters in numpy.

Four adapter families share one interface: LoRA (a plain low-rank update),
HiRA (a low-rank mask multiplied entrywise into the frozen weight), ABBA (the
entrywise product of two low-rank products) and BHRA, which gives each block
of a grid over the weight its own low-rank mask.
"""
from .adapters import (
    KINDS,
    AdapterConfig,
    AdapterState,
    BlockGrid,
    ConfigError,
    FrozenWeight,
    delta,
    forward,
    init_adapter,
    merge,
    param_count,
    rank_bound,
)
from .grads import AdamState, BackpropContext, adam_step, adapter_grad
from .matrix_core import ShapeError, numeric_rank
from .spectral import SpectralReport, block_gini, effective_rank, spectral_report, stable_rank

__version__ = "0.1.0"

__all__ = [
    "KINDS",
    "AdamState",
    "AdapterConfig",
    "AdapterState",
    "BackpropContext",
    "BlockGrid",
    "ConfigError",
    "FrozenWeight",
    "ShapeError",
    "SpectralReport",
    "adam_step",
    "adapter_grad",
    "block_gini",
    "delta",
    "effective_rank",
    "forward",
    "init_adapter",
    "merge",
    "numeric_rank",
    "param_count",
    "rank_bound",
    "spectral_report",
    "stable_rank",
]
