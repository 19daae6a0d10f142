"""
Checking the hand-written backward pass
=======================================

Every parameter gradient is compared against central finite differences
of a half squared-norm loss.
"""

from scalednl import AttentionConfig, grad_check

for variant in ("softmax_nl", "scaled_nl"):
    for heads in (1, 2, 4):
        rep = grad_check(AttentionConfig(variant, channels=4, heads=heads), sizes=(3, 3))
        worst = ", ".join(f"{k}={v:.1e}" for k, v in rep.errors.items())
        print(f"{variant:10s} heads={heads}  {'ok ' if rep.passed else 'BAD'}  {worst}")
