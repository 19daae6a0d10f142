"""Wall-clock micro-benchmark of single forward passes."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .blocks import AttentionConfig, FeatureMap, _forward, init_embeddings
from .tensor import Rng

__all__ = ["BenchCell", "time_forward", "run_bench", "bench_ratios", "bench_csv"]


@dataclass(frozen=True)
class BenchCell:
    variant: str
    mode: str
    heads: int
    median_ms: float
    iterations: int


def time_forward(cfg: AttentionConfig, height: int, width: int, mode: str = "associative",
                 warmup: int = 10, iterations: int = 100, seed: int = 0) -> BenchCell:
    """Median wall-clock milliseconds of one forward pass."""
    if warmup < 10 or iterations < 100:
        raise ValueError("need warmup >= 10 and iterations >= 100")
    rng = Rng(seed)
    x = FeatureMap.random(height, width, cfg.channels, rng).values
    emb = init_embeddings(cfg, rng)
    for _ in range(warmup):
        _forward(x, emb, cfg, mode)
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        _forward(x, emb, cfg, mode)
        times[i] = time.perf_counter() - t0
    mode_tag = "materialized" if cfg.variant == "softmax_nl" else mode
    return BenchCell(cfg.variant, mode_tag, cfg.heads, float(np.median(times) * 1e3), iterations)


def run_bench(height=32, width=32, channels=64, heads=(1, 2, 4),
              variants=(("softmax_nl", "materialized"), ("scaled_nl", "associative")),
              warmup=10, iterations=100, seed=0) -> list[BenchCell]:
    cells = []
    for variant, mode in variants:
        for h in heads:
            cfg = AttentionConfig(variant=variant, channels=channels, heads=h)
            cells.append(time_forward(cfg, height, width, mode, warmup, iterations, seed))
    return cells


def bench_ratios(cells) -> dict[tuple[str, str], float]:
    """time(max heads) / time(1 head) per (variant, mode)."""
    out = {}
    for key in {(c.variant, c.mode) for c in cells}:
        group = sorted((c for c in cells if (c.variant, c.mode) == key), key=lambda c: c.heads)
        out[key] = group[-1].median_ms / group[0].median_ms
    return out


def bench_csv(cells) -> str:
    ratios = bench_ratios(cells)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mode", "N_h", "median_ms", "iterations", "ratio_max_heads_vs_1"])
    for c in cells:
        w.writerow([c.variant, c.mode, c.heads, f"{c.median_ms:.4f}", c.iterations,
                    f"{ratios[(c.variant, c.mode)]:.4f}"])
    return buf.getvalue()
