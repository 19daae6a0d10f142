"""
What the attention maps look like
=================================

Train both blocks on the toy matching task, then score their maps with key
dominance: the share of map variance explained by which key is looked at
rather than which query is asking.  A map where every query attends to the
same few keys scores near 1.
"""

from pathlib import Path

from scalednl import AttentionConfig, FeatureMap, extract_map
from scalednl.analysis import write_pgm
from scalednl.toy import make_toy_task, train_toy, trained_dominance

out = Path("attention_maps")
out.mkdir(exist_ok=True)
task = make_toy_task(256, seed=0)

for variant in ("softmax_nl", "scaled_nl"):
    cfg = AttentionConfig(variant, channels=8)
    res = train_toy(cfg, task, steps=1000, raise_on_divergence=False)
    dom = trained_dominance(res, task, cfg)
    print(f"{variant:10s} accuracy {res.final_accuracy:.3f}  key dominance {dom.key_dominance:.4f}")

    # the block sees the input after the learned 1x1 stem
    x = FeatureMap(task.height, task.width, task.inputs[0] @ res.model.w_in)
    write_pgm(extract_map(x, res.model.block, cfg), out / f"{variant}.pgm")

print(f"maps written under {out}/")
