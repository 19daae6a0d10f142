"""Analytic FLOP and activation-memory model of the attention blocks.

Conventions: a multiply-add counts as 2 flops; exp, max, subtract, sum and
divide in the softmax count 1 flop per map element each (5 per element).
Peak memory counts elements of intermediate tensors only (weights and the
input excluded) and follows the allocation order of ``blocks._forward``:
embeddings and attention maps stay live for the backward pass, the
pre-softmax logits are released once normalized.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .tensor import DimensionError

__all__ = [
    "STAGES",
    "CostReport",
    "cost_softmax_nl",
    "cost_scaled_nl",
    "cost",
    "crossover",
    "to_csv",
]

STAGES = ("embed", "logits", "normalize", "aggregate", "project")
CSV_FIELDS = ("variant", "mode", "H", "W", "C", "C_e", "N_h", "flops", "peak_elements") + STAGES


@dataclass(frozen=True)
class CostReport:
    variant: str
    mode: str
    height: int
    width: int
    channels: int
    embed_channels: int
    heads: int
    peak_activation_elements: int
    breakdown: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return sum(self.breakdown.values())

    def as_row(self) -> dict:
        row = {
            "variant": self.variant,
            "mode": self.mode,
            "H": self.height,
            "W": self.width,
            "C": self.channels,
            "C_e": self.embed_channels,
            "N_h": self.heads,
            "flops": self.flops,
            "peak_elements": self.peak_activation_elements,
        }
        row.update({s: self.breakdown.get(s, 0) for s in STAGES})
        return row


def _sizes(channels: int, embed_channels: int | None, heads: int) -> int:
    if heads < 1 or channels < 1:
        raise ValueError("channels and heads must be positive")
    if channels % heads:
        raise DimensionError(f"{channels} channels are not divisible by {heads} heads")
    if embed_channels is None:
        return channels // heads
    if heads > 1 and embed_channels != channels // heads:
        raise DimensionError(f"multi-head blocks need C_e = {channels}/{heads}")
    return embed_channels


def _tail(n: int, c: int, e: int, heads: int, residual: bool) -> int:
    # per-head outputs, concat copy (multi-head only), projection, residual sum
    return n * e + (n * e if heads > 1 else 0) + n * c + (n * c if residual else 0)


def cost_softmax_nl(height, width, channels, embed_channels=None, heads=1, residual=True) -> CostReport:
    d = _sizes(channels, embed_channels, heads)
    n = height * width
    e = heads * d
    breakdown = {
        "embed": heads * 3 * 2 * n * channels * d,
        "logits": heads * 2 * n * n * d,
        "normalize": heads * 5 * n * n,
        "aggregate": heads * 2 * n * n * d,
        "project": 2 * n * e * channels,
    }
    # every head's map is live at once; logits and map coexist while normalizing
    at_normalize = 3 * n * e + 2 * heads * n * n
    at_end = 3 * n * e + heads * n * n + _tail(n, channels, e, heads, residual)
    return CostReport(
        "softmax_nl", "materialized", height, width, channels, d, heads,
        max(at_normalize, at_end), breakdown,
    )


def cost_scaled_nl(height, width, channels, embed_channels=None, heads=1, mode="associative", residual=True) -> CostReport:
    d = _sizes(channels, embed_channels, heads)
    n = height * width
    e = heads * d
    embed = heads * 3 * 2 * n * channels * d
    project = 2 * n * e * channels
    if mode == "associative":
        breakdown = {
            "embed": embed,
            "logits": heads * 2 * n * d * d,  # phi^T g
            "normalize": heads * n * d,  # output scaling
            "aggregate": heads * 2 * n * d * d,  # theta (phi^T g)
            "project": project,
        }
        peak = 3 * n * e + heads * d * d + _tail(n, channels, e, heads, residual)
    elif mode == "materialized":
        breakdown = {
            "embed": embed,
            "logits": heads * 2 * n * n * d,
            "normalize": 0,
            "aggregate": heads * 2 * n * n * d,
            "project": project,
        }
        peak = 3 * n * e + heads * n * n + _tail(n, channels, e, heads, residual)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return CostReport("scaled_nl", mode, height, width, channels, d, heads, peak, breakdown)


def cost(variant, height, width, channels, embed_channels=None, heads=1, mode="associative", residual=True) -> CostReport:
    if variant == "softmax_nl":
        return cost_softmax_nl(height, width, channels, embed_channels, heads, residual)
    if variant == "scaled_nl":
        return cost_scaled_nl(height, width, channels, embed_channels, heads, mode, residual)
    raise ValueError(f"unknown variant {variant!r}")


def crossover(embed_channels: int) -> int:
    """Smallest pixel count HW at which associative beats materialized evaluation.

    Per head the materialized form costs ``4 HW^2 C_e`` and the associative
    form ``4 HW C_e^2 + HW C_e``; the latter is cheaper iff ``HW > C_e + 1/4``.
    """
    if embed_channels < 1:
        raise ValueError("embed_channels must be >= 1")
    return embed_channels + 1


def to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.as_row())
    return buf.getvalue()
