"""
Two orders, one result
======================

The scaled block never normalizes the affinity matrix, so the product
theta phi^T g can be grouped either way.  Grouping from the right skips
the HW x HW matrix entirely.
"""

import time

import numpy as np

from scalednl import AttentionConfig, FeatureMap, Rng, init_embeddings, scaled_nl_forward
from scalednl.cost import cost_scaled_nl, crossover

rng = Rng(0)
cfg = AttentionConfig("scaled_nl", channels=32)
x = FeatureMap.random(24, 24, 32, rng)
emb = init_embeddings(cfg, rng)

# same numbers from both groupings
t0 = time.perf_counter()
y_mat = scaled_nl_forward(x, emb, cfg, mode="materialized")
t1 = time.perf_counter()
y_assoc = scaled_nl_forward(x, emb, cfg, mode="associative")
t2 = time.perf_counter()

diff = np.max(np.abs(y_mat.values - y_assoc.values)) / np.max(np.abs(y_mat.values))
print(f"relative difference   {diff:.2e}")
print(f"materialized          {1e3 * (t1 - t0):.2f} ms")
print(f"associative           {1e3 * (t2 - t1):.2f} ms")

# the analytic model says where the right-grouping starts to win
print(f"\nassociative is cheaper once HW >= {crossover(32)} (C_e = 32)")
for hw in (8, 32, 128, 576):
    a = cost_scaled_nl(hw, 1, 32, mode="associative").flops
    m = cost_scaled_nl(hw, 1, 32, mode="materialized").flops
    print(f"  HW={hw:4d}  associative {a:>12,}  materialized {m:>12,}")
