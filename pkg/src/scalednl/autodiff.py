"""Analytic gradients of the attention blocks and a finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    AttentionConfig,
    EmbeddingSet,
    FeatureMap,
    _forward,
    _merge_heads,
    _split_heads,
    init_embeddings,
)
from .tensor import DimensionError, Rng, as_tensor

__all__ = [
    "GradBundle",
    "GradCheckReport",
    "backward",
    "backward_arrays",
    "finite_diff",
    "half_sq_loss",
    "grad_check",
    "rel_error",
]

PARAMS = ("w_theta", "w_phi", "w_g", "w_out")


@dataclass(frozen=True)
class GradBundle:
    d_w_theta: np.ndarray
    d_w_phi: np.ndarray
    d_w_g: np.ndarray
    d_w_out: np.ndarray
    d_x: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w_theta": self.d_w_theta,
            "w_phi": self.d_w_phi,
            "w_g": self.d_w_g,
            "w_out": self.d_w_out,
            "x": self.d_x,
        }


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    step: float
    tolerance: float = 1e-4
    analytic: dict = field(default_factory=dict, repr=False)
    numeric: dict = field(default_factory=dict, repr=False)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def rel_error(a, n) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = as_tensor(a)
    n = as_tensor(n)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def backward_arrays(x, emb: EmbeddingSet, cfg: AttentionConfig, upstream, mode: str = "associative"):
    """Gradients for array inputs of shape ``(..., HW, C)``; weight grads sum over leading axes."""
    if cfg.scope != "full":
        raise NotImplementedError("gradients are only implemented for scope='full'")
    x = as_tensor(x)
    dy = as_tensor(upstream)
    if dy.shape != x.shape:
        raise DimensionError(f"upstream {dy.shape} does not match output {x.shape}")
    _, cache = _forward(x, emb, cfg, mode)
    q, k, v, z = cache["q"], cache["k"], cache["v"], cache["z"]
    heads = cfg.heads
    c = x.shape[-1]
    e = emb.embed_total

    def flat(t, width):
        return t.reshape(-1, width)

    d_w_out = flat(z, e).T @ flat(dy, c)
    dz = dy @ emb.w_out.T
    do = _split_heads(dz, heads)

    if cfg.variant == "softmax_nl":
        a = cache["a"]
        da = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(a, -1, -2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        ds /= np.sqrt(cache["dq"])
        dq_ = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
    elif mode == "materialized":
        scale = cache["scale"]
        s = cache["s"]
        ds = (do @ np.swapaxes(v, -1, -2)) * (scale / np.sqrt(cache["dq"]))
        dv = (np.swapaxes(s, -1, -2) @ do) * scale
        dq_ = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
    else:
        f = cache["scale"] / np.sqrt(cache["dq"])
        m = cache["m"]
        dq_ = (do @ np.swapaxes(m, -1, -2)) * f
        dm = (np.swapaxes(q, -1, -2) @ do) * f
        dk = v @ np.swapaxes(dm, -1, -2)
        dv = k @ dm

    dq_m, dk_m, dv_m = _merge_heads(dq_), _merge_heads(dk), _merge_heads(dv)
    xf = flat(x, c)
    d_x = dq_m @ emb.w_theta.T + dk_m @ emb.w_phi.T + dv_m @ emb.w_g.T
    if cfg.residual:
        d_x = d_x + dy
    return GradBundle(
        xf.T @ flat(dq_m, e),
        xf.T @ flat(dk_m, e),
        xf.T @ flat(dv_m, e),
        d_w_out,
        d_x,
    )


def backward(x: FeatureMap, emb: EmbeddingSet, cfg: AttentionConfig, upstream, mode: str = "associative") -> GradBundle:
    """Gradients of ``sum(upstream * y)`` for the configured block."""
    return backward_arrays(x.values, emb, cfg, upstream, mode)


def half_sq_loss(x, emb: EmbeddingSet, cfg: AttentionConfig, mode: str = "associative") -> float:
    y, _ = _forward(as_tensor(x), emb, cfg, mode)
    return 0.5 * float(np.sum(y * y))


def finite_diff(loss, param, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss(p)`` at ``param``.

    ``loss`` receives a perturbed copy of ``param``; ``param`` is not modified.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    p = as_tensor(param).copy()
    grad = np.empty_like(p)
    flat = p.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = loss(p.copy())
        flat[i] = old - h
        minus = loss(p.copy())
        flat[i] = old
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def grad_check(
    cfg: AttentionConfig,
    sizes: tuple[int, int] = (3, 3),
    seed: int = 0,
    h: float = 1e-6,
    mode: str = "associative",
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare :func:`backward` with central differences of ``0.5*||y||^2``."""
    rng = Rng(seed)
    height, width = sizes
    x = FeatureMap.random(height, width, cfg.channels, rng)
    emb = init_embeddings(cfg, rng)
    y, _ = _forward(x.values, emb, cfg, mode)
    grads = backward(x, emb, cfg, y, mode).as_dict()

    numeric = {}
    for name in PARAMS:
        numeric[name] = finite_diff(
            lambda w, name=name: half_sq_loss(x.values, emb.replace(**{name: w}), cfg, mode),
            getattr(emb, name),
            h,
        )
    numeric["x"] = finite_diff(lambda xv: half_sq_loss(xv, emb, cfg, mode), x.values, h)

    errors = {name: rel_error(grads[name], numeric[name]) for name in numeric}
    return GradCheckReport(errors, h, tolerance, grads, numeric)
