"""Stable rank, block Gini, the block-size sweep and the FLOP model.

Run with ``python3 demos/03_desk_scale_diagnostics.py`` (about ten seconds).
"""
from bhra.cost_model import cost_report
from bhra.experiments import (
    ToyTaskSpec,
    block_size_sweep,
    figure1_probe,
    figure1_task,
    gini_experiment,
    gini_ordering_by_seed,
    heterogeneous_task,
)

print("mean stable rank of the learned update, 5 seeds, short horizon")
rows = figure1_probe(figure1_task())
for r in (4, 8, 16):
    cells = {row["kind"]: row["mean_stable_rank"] for row in rows if row["r"] == r}
    print(f"  r={r:2d}  lora {cells['lora']:.2f}  hira {cells['hira']:.2f}  bhra(b=4) {cells['bhra']:.2f}")

print()
print("block Gini on the checkerboard teacher (r_tot = 8, Gini read on a 4x4 grid)")
_, gini_rows = gini_experiment(heterogeneous_task())
for row in gini_rows:
    print(f"  seed {row['seed']:5d}  {row['kind']:5s} Gini {row['block_gini']:.3f}  loss {row['final_loss']:.3f}")
per_seed = gini_ordering_by_seed(gini_rows)
print("  seeds with bhra > hira > lora:", sum(v["gini_order"] for v in per_seed.values()), "of", len(per_seed))

print()
print("block count sweep at r_tot = 8 on the default task")
_, agg = block_size_sweep(ToyTaskSpec())
for row in agg:
    print(f"  b={row['b']}  r_b={8 // row['b']}  median loss removed {row['median_improvement']:.4f}")

print()
rep = cost_report(m=4096, n=4096, r=32, b=4, T=512)
print("training FLOPs for one 4096x4096 layer, r=32, T=512")
print(f"  lora {rep.lora_train:,}")
print(f"  hira {rep.hira_train:,}")
print(f"  bhra b=4 {rep.flops_train:,}")
print(f"  peak activation memory (elements) {rep.peak_memory_elements:,}")
