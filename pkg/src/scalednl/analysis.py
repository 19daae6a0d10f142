"""Attention-map extraction, key-dominance diagnostics and map export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import AttentionConfig, AttentionMap, EmbeddingSet, FeatureMap, _forward
from .tensor import Rng, as_tensor

__all__ = [
    "DominanceReport",
    "extract_map",
    "key_dominance",
    "variance_stability",
    "variance_stability_stats",
    "map_to_pgm_bytes",
    "write_pgm",
    "map_to_csv",
    "dominance_csv",
]


@dataclass(frozen=True)
class DominanceReport:
    key_dominance: float
    per_key_query_variance: np.ndarray
    map_source: str = ""


def extract_map(x: FeatureMap, emb: EmbeddingSet, cfg: AttentionConfig) -> AttentionMap:
    """Attention map the block applies to its values.

    Softmax blocks give the row-normalized map. Scaled blocks never need the
    map, so it is materialized here only for inspection: the scaled logits
    ``theta phi^T / sqrt(HW * C_e)``.
    """
    if cfg.variant == "softmax_nl":
        _, cache = _forward(x.values, emb, cfg)
        a, normalized = cache["a"], True
    else:
        _, cache = _forward(x.values, emb, cfg, mode="materialized")
        a, normalized = cache["s"] * cache["scale"], False
    if cfg.heads == 1:
        a = a[0]
    return AttentionMap(a, normalized, cfg.variant)


def key_dominance(amap) -> DominanceReport:
    """Share of map variance explained by the key (column) index.

    ``Var_j(mean_i A_ij) / (Var_j(mean_i A_ij) + mean_j Var_i(A_ij))``: 1 when
    every query sees the same row (vertical stripes), 0 when column means
    are all equal. A constant map scores 0.
    """
    source = getattr(amap, "source", "")
    a = as_tensor(getattr(amap, "values", amap))
    if a.ndim != 2:
        raise ValueError("key_dominance takes a single HW x HW map; use AttentionMap.head()")
    if a.shape[1] < 2:
        raise ValueError("key_dominance needs at least two keys")
    between = float(np.var(a.mean(axis=0)))
    per_key = a.var(axis=0)
    within = float(per_key.mean())
    total = between + within
    score = between / total if total > 0 else 0.0
    return DominanceReport(score, per_key, source)


def _trial_products(hw: int, c_e: int, trials: int, rng: Rng, scaled: bool):
    factor = 1.0 / np.sqrt(hw) if scaled else 1.0
    for t in range(trials):
        r = rng.derive(t)
        a = r.normal((hw, hw))
        g = r.normal((hw, c_e))
        yield (a @ g) * factor


def variance_stability_stats(hw: int, c_e: int, trials: int, rng: Rng, scaled: bool = True):
    """Pooled elementwise variance of ``A G / sqrt(HW)`` and its standard error.

    ``A`` (HW x HW) and ``G`` (HW x C_e) are i.i.d. standard normal, redrawn
    for each trial from ``rng.derive(trial)``. The standard error is taken
    from the spread of per-trial second moments.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    first = np.empty(trials)
    second = np.empty(trials)
    for t, p in enumerate(_trial_products(hw, c_e, trials, rng, scaled)):
        first[t] = p.mean()
        second[t] = np.mean(p * p)
    var = float(second.mean() - first.mean() ** 2)
    stderr = float(second.std(ddof=1) / np.sqrt(trials))
    return var, stderr


def variance_stability(hw: int, c_e: int, trials: int, rng: Rng, scaled: bool = True) -> float:
    if trials < 1000:
        raise ValueError("variance_stability needs at least 1000 trials")
    return variance_stability_stats(hw, c_e, trials, rng, scaled)[0]


def _to_gray(amap: AttentionMap) -> tuple[np.ndarray, str]:
    a = as_tensor(amap.values)
    if amap.normalized:
        g = np.clip(a * a.shape[-1] * 255.0, 0.0, 255.0)
        note = "softmax map scaled by HW*255, clipped to [0,255]"
    else:
        lo, hi = float(a.min()), float(a.max())
        g = (a - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(a)
        note = f"scaled-logit map min-max normalized from [{lo:.6g},{hi:.6g}] to [0,255]"
    return np.rint(g).astype(np.uint8), note


def map_to_pgm_bytes(amap: AttentionMap) -> bytes:
    """8-bit binary PGM (P5); rows are queries, columns are keys."""
    amap = amap.head(0)
    gray, note = _to_gray(amap)
    rows, cols = gray.shape
    header = f"P5\n# source: {amap.source or 'unknown'}\n# {note}\n{cols} {rows}\n255\n"
    return header.encode("ascii") + gray.tobytes()


def write_pgm(amap: AttentionMap, path) -> None:
    Path(path).write_bytes(map_to_pgm_bytes(amap))


def map_to_csv(amap: AttentionMap) -> str:
    """Long-format CSV: ``head,query,key,value``."""
    a = as_tensor(amap.values)
    if a.ndim == 2:
        a = a[None]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["head", "query", "key", "value"])
    for h, m in enumerate(a):
        for i, row in enumerate(m):
            for j, val in enumerate(row):
                w.writerow([h, i, j, repr(float(val))])
    return buf.getvalue()


def dominance_csv(rows) -> str:
    """CSV of ``(label, DominanceReport)`` pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "map_source", "key_dominance", "mean_query_variance"])
    for label, rep in rows:
        w.writerow([label, rep.map_source, repr(rep.key_dominance), repr(float(np.mean(rep.per_key_query_variance)))])
    return buf.getvalue()
