"""
Memory as heads are added
=========================

Softmax keeps one HW x HW attention matrix per head, so its footprint grows
with the head count.  The associative scaled block only holds a C_e x C_e
summary per head and stays flat.  A tracker inside the forward pass counts
live float64 elements and agrees with the closed-form model.
"""

from scalednl import AttentionConfig, FeatureMap, MemoryTracker, Rng, init_embeddings
from scalednl.blocks import _forward
from scalednl.cost import cost

h, w, c = 16, 16, 32
print(f"{'variant':10s} {'mode':13s} heads  model peak  tracked peak")
for variant, mode in (("softmax_nl", "materialized"), ("scaled_nl", "associative")):
    for heads in (1, 2, 4, 8):
        cfg = AttentionConfig(variant, channels=c, heads=heads)
        rng = Rng(0)
        tracker = MemoryTracker()
        _forward(FeatureMap.random(h, w, c, rng).values, init_embeddings(cfg, rng), cfg, mode, tracker)
        model = cost(variant, h, w, c, heads=heads, mode=mode).peak_activation_elements
        print(f"{variant:10s} {mode:13s} {heads:5d}  {model:10d}  {tracker.peak:12d}")
