"""
How many sequences fit in memory?
=================================

Sweeps batch sizes for the 160M-shaped baseline and its eight converted
variants under a fixed byte budget, using the analytic memory model only
(no timing). Writes ``memory_sweep.csv`` next to this script.
"""

import os

from mlkv import bench
from mlkv.experiment import pythia_variants
from mlkv.model import param_count

variants = pythia_variants()
weights = bench.memory_model(variants["MHA-144"], 0, 2048).weights
budget = weights + 12 * 2**30  # weights plus 12 GiB of cache

reports = bench.sweep(variants, [2**k for k in range(15)], budget, measure=False)

for rep in sorted(reports, key=lambda r: variants[r.config_id].share.kv_heads):
    cfg = variants[rep.config_id]
    exact = bench.max_fitting_batch(cfg, budget, 2048)
    print(f"{rep.config_id:8s} params={param_count(cfg):,d}  largest power-of-two batch={rep.max_batch:5d}"
          f"  exact max batch={exact}")

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "memory_sweep.csv")
bench.write_csv(out, reports)
print("wrote", out)
