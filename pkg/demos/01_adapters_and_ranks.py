"""Four adapters on one frozen layer, and how far each can raise the rank.

Run with ``python3 demos/01_adapters_and_ranks.py``.
"""
import numpy as np

from bhra.adapters import AdapterConfig, FrozenWeight, delta, init_adapter, param_count, rank_bound, rank_witness
from bhra.matrix_core import numeric_rank

m = n = 32
r_tot = 4
rng = np.random.default_rng(0)

# A frozen weight of rank 2, like a layer with a few dominant directions.
w0 = FrozenWeight.from_matrix(rng.standard_normal((m, 2)) @ rng.standard_normal((2, n)))
print(f"frozen weight: {m}x{n}, rank {w0.r0}")
print()
print(f"{'adapter':10s} {'params':>7s} {'rank':>5s} {'bound':>6s}")

for kind, b in [("lora", 1), ("hira", 1), ("abba", 1), ("bhra", 2), ("bhra", 4)]:
    cfg = AdapterConfig(kind, r_tot, b)
    state = init_adapter(cfg, m, n, seed=1)
    # the zero init gives a zero update, so draw every factor to see the reachable rank
    state.params = {k: rng.standard_normal(v.shape) for k, v in state.params.items()}
    rank = numeric_rank(delta(w0, state))
    bound = rank_bound(kind, m, n, r_tot, b, w0.r0)
    label = kind if kind != "bhra" else f"bhra b={b}"
    print(f"{label:10s} {param_count(cfg, m, n):7d} {rank:5d} {bound:6d}")

# Same parameter budget everywhere.  LoRA is stuck at r_tot; the Hadamard
# adapters multiply by the rank of W0, and the block grid multiplies again.

w0, state, cfg = rank_witness()
print()
print("smallest case where blocks beat the global mask:")
print("  W0 = ones(4, 4), rank", w0.r0)
print("  BHRA b=2, r_tot=2 update:")
print(delta(w0, state))
print("  rank", numeric_rank(delta(w0, state)), "while HiRA at the same budget is capped at", w0.r0 * cfg.r_tot)
