"""Non-local attention blocks: softmax-normalized and sqrt(HW)-scaled.

A feature map is stored flattened as an ``HW x C`` matrix (row ``i = h*W + w``).
Queries, keys and values are linear embeddings (1x1 convolutions) of that
matrix. Multi-head blocks keep all heads' embedding columns side by side in
one ``C x (N_h*C_e)`` matrix per role; head ``h`` owns columns
``h*C_e:(h+1)*C_e``.

The scaled block computes ``theta(x) phi(x)^T g(x) / sqrt(HW * C_e)``. It can
be evaluated either by materializing the ``HW x HW`` map first or by
contracting ``phi^T g`` first (``C_e x C_e``), which never touches an
``HW x HW`` buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Rng, as_tensor, softmax_rows

__all__ = [
    "VARIANTS",
    "SCOPES",
    "INITS",
    "MODES",
    "DegenerateVectorError",
    "FeatureMap",
    "EmbeddingSet",
    "AttentionConfig",
    "AttentionMap",
    "MemoryTracker",
    "init_embeddings",
    "embed",
    "logits",
    "softmax_nl_forward",
    "scaled_nl_forward",
    "project_magnitude",
    "project_direction",
    "ablated_forward",
    "multi_head_forward",
    "forward",
]

VARIANTS = ("softmax_nl", "scaled_nl")
SCOPES = ("full", "magnitude_only", "direction_only")
INITS = ("he", "gaussian_0p01", "zeros")
MODES = ("materialized", "associative")

_MIN_NORM = 1e-12


class DegenerateVectorError(ValueError):
    """A row with (near) zero norm cannot be normalized to a direction."""

    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3g}; direction is undefined")
        self.row = row


@dataclass(frozen=True)
class FeatureMap:
    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        v = as_tensor(self.values)
        if self.height < 1 or self.width < 1:
            raise DimensionError(f"invalid spatial size {self.height}x{self.width}")
        if v.ndim != 2 or v.shape[0] != self.height * self.width or v.shape[1] < 1:
            raise DimensionError(
                f"values of shape {v.shape} do not fit a {self.height}x{self.width} map"
            )
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def random(cls, height: int, width: int, channels: int, rng: Rng, std: float = 1.0):
        return cls(height, width, rng.normal((height * width, channels), std))

    @classmethod
    def from_hwc(cls, array) -> "FeatureMap":
        a = as_tensor(array)
        h, w, c = a.shape
        return cls(h, w, a.reshape(h * w, c))

    def to_hwc(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width, self.channels)


@dataclass(frozen=True)
class EmbeddingSet:
    """Weights of one block: three embeddings plus the output projection."""

    w_theta: np.ndarray
    w_phi: np.ndarray
    w_g: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        for name in ("w_theta", "w_phi", "w_g", "w_out"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        c, e = self.w_theta.shape
        if self.w_phi.shape != (c, e) or self.w_g.shape != (c, e):
            raise DimensionError(
                f"embedding shapes differ: {self.w_theta.shape}, "
                f"{self.w_phi.shape}, {self.w_g.shape}"
            )
        if self.w_out.shape != (e, c):
            raise DimensionError(f"w_out has shape {self.w_out.shape}, expected {(e, c)}")

    @property
    def channels(self) -> int:
        return self.w_theta.shape[0]

    @property
    def embed_total(self) -> int:
        return self.w_theta.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "w_theta": self.w_theta,
            "w_phi": self.w_phi,
            "w_g": self.w_g,
            "w_out": self.w_out,
        }

    def replace(self, **weights) -> "EmbeddingSet":
        return EmbeddingSet(**{**self.as_dict(), **weights})

    def split_heads(self, heads: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Per-head ``(w_theta, w_phi, w_g)`` column blocks."""
        if self.embed_total % heads:
            raise DimensionError(f"{self.embed_total} embedding columns do not split into {heads} heads")
        d = self.embed_total // heads
        cols = [slice(h * d, (h + 1) * d) for h in range(heads)]
        return [(self.w_theta[:, s], self.w_phi[:, s], self.w_g[:, s]) for s in cols]

    @classmethod
    def stack(cls, heads, w_out) -> "EmbeddingSet":
        """Build a multi-head set from per-head ``(w_theta, w_phi, w_g)`` and a shared projection."""
        heads = list(heads)
        return cls(
            np.concatenate([h[0] for h in heads], axis=1),
            np.concatenate([h[1] for h in heads], axis=1),
            np.concatenate([h[2] for h in heads], axis=1),
            w_out,
        )


@dataclass(frozen=True)
class AttentionConfig:
    """Block configuration.

    ``embed_channels`` is the per-head embedding width; it defaults to
    ``channels // heads`` and must equal it when ``heads > 1``.
    ``scale_output=False`` drops the ``1/sqrt(HW)`` factor of the scaled
    variant (divergence ablation); it has no effect on the softmax variant.
    """

    variant: str = "scaled_nl"
    channels: int = 8
    embed_channels: int | None = None
    heads: int = 1
    scope: str = "full"
    init: str = "he"
    residual: bool = True
    scale_output: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.channels < 1 or self.heads < 1:
            raise ValueError("channels and heads must be positive")
        if self.channels % self.heads:
            raise DimensionError(f"{self.channels} channels are not divisible by {self.heads} heads")
        if self.embed_channels is None:
            object.__setattr__(self, "embed_channels", self.channels // self.heads)
        if self.embed_channels < 1:
            raise ValueError("embed_channels must be positive")
        if self.heads > 1 and self.embed_channels != self.channels // self.heads:
            raise DimensionError(
                f"multi-head blocks need embed_channels = {self.channels}/{self.heads}, "
                f"got {self.embed_channels}"
            )

    @property
    def embed_total(self) -> int:
        return self.heads * self.embed_channels


@dataclass(frozen=True)
class AttentionMap:
    """``HW x HW`` map (or ``N_h x HW x HW`` for multi-head blocks)."""

    values: np.ndarray
    normalized: bool
    source: str = ""

    @property
    def pixels(self) -> int:
        return self.values.shape[-1]

    def head(self, h: int = 0) -> "AttentionMap":
        v = self.values if self.values.ndim == 2 else self.values[h]
        return AttentionMap(v, self.normalized, self.source)


@dataclass
class MemoryTracker:
    """Counts elements of intermediate tensors live during a forward pass."""

    live: int = 0
    peak: int = 0
    events: list = field(default_factory=list)

    def alloc(self, name: str, elements: int):
        self.live += int(elements)
        self.peak = max(self.peak, self.live)
        self.events.append((name, int(elements)))

    def free(self, name: str, elements: int):
        self.live -= int(elements)
        self.events.append((name, -int(elements)))


def init_embeddings(cfg: AttentionConfig, rng: Rng) -> EmbeddingSet:
    """Sample block weights under ``cfg.init``.

    ``he`` draws N(0, 2/fan_in) where fan_in is the number of input rows of
    each matrix; ``gaussian_0p01`` draws N(0, 0.01^2); ``zeros`` is all zero.
    """
    c, e = cfg.channels, cfg.embed_total
    shapes = [(c, e), (c, e), (c, e), (e, c)]
    weights = []
    for shape in shapes:
        if cfg.init == "zeros":
            weights.append(np.zeros(shape))
        elif cfg.init == "gaussian_0p01":
            weights.append(rng.normal(shape, 0.01))
        else:
            weights.append(rng.normal(shape, np.sqrt(2.0 / shape[0])))
    return EmbeddingSet(*weights)


def embed(x: FeatureMap, w) -> np.ndarray:
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[0] != x.channels:
        raise DimensionError(f"cannot embed {x.values.shape} with weights {w.shape}")
    return x.values @ w


def logits(q, k) -> np.ndarray:
    """Dot-product logits ``q k^T / sqrt(C_e)``."""
    q = as_tensor(q)
    k = as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query {q.shape} and key {k.shape} widths differ")
    return (q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])


def project_magnitude(e) -> np.ndarray:
    e = as_tensor(e)
    return np.sqrt(np.sum(e * e, axis=-1, keepdims=True))


def project_direction(e) -> np.ndarray:
    e = as_tensor(e)
    norms = project_magnitude(e)
    bad = np.argwhere(norms[..., 0] < _MIN_NORM)
    if bad.size:
        idx = tuple(bad[0])
        raise DegenerateVectorError(int(idx[-1]), float(norms[idx][0]))
    return e / norms


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    # (..., n, N*d) -> (..., N, n, d)
    *lead, n, e = t.shape
    return np.swapaxes(t.reshape(*lead, n, heads, e // heads), -2, -3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    # (..., N, n, d) -> (..., n, N*d)
    *lead, heads, n, d = t.shape
    return np.swapaxes(t, -2, -3).reshape(*lead, n, heads * d)


def _check_input(x: np.ndarray, emb: EmbeddingSet, cfg: AttentionConfig):
    if x.shape[-1] != emb.channels:
        raise DimensionError(f"input {x.shape} does not match weights with {emb.channels} channels")
    if emb.embed_total != cfg.embed_total:
        raise DimensionError(
            f"weights have {emb.embed_total} embedding columns, config expects {cfg.embed_total}"
        )


def _forward(x, emb: EmbeddingSet, cfg: AttentionConfig, mode: str = "associative", tracker=None):
    """Array-level forward shared by all public entry points and the backward pass.

    ``x`` has shape ``(..., HW, C)``; leading axes are treated as a batch.
    Returns ``(y, cache)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    _check_input(x, emb, cfg)
    t = tracker or MemoryTracker()
    batch = int(np.prod(x.shape[:-2], dtype=np.int64))
    n, c = x.shape[-2:]
    heads, e = cfg.heads, cfg.embed_total
    d = e // heads

    q = _split_heads(x @ emb.w_theta, heads)
    k = _split_heads(x @ emb.w_phi, heads)
    v = _split_heads(x @ emb.w_g, heads)
    for name in ("theta", "phi", "g"):
        t.alloc(name, batch * n * e)

    if cfg.scope == "magnitude_only":
        q, k = project_magnitude(q), project_magnitude(k)
    elif cfg.scope == "direction_only":
        q, k = project_direction(q), project_direction(k)
    if cfg.scope != "full":
        t.alloc("q_proj", q.size)
        t.alloc("k_proj", k.size)
    dq = q.shape[-1]

    cache = {"x": x, "q": q, "k": k, "v": v, "n": n, "dq": dq}
    if cfg.variant == "softmax_nl":
        s = logits(q, k)
        t.alloc("logits", s.size)
        a = softmax_rows(s)
        t.alloc("attention", a.size)
        t.free("logits", s.size)
        o = a @ v
        cache["a"] = a
    else:
        scale = 1.0 / np.sqrt(n) if cfg.scale_output else 1.0
        cache["scale"] = scale
        if mode == "materialized":
            s = logits(q, k)
            t.alloc("logits", s.size)
            o = (s @ v) * scale
            cache["s"] = s
        else:
            m = np.swapaxes(k, -1, -2) @ v
            t.alloc("kv", m.size)
            o = (q @ m) * (scale / np.sqrt(dq))
            cache["m"] = m
    t.alloc("heads_out", batch * n * e)

    z = _merge_heads(o)
    if heads > 1:
        t.alloc("concat", batch * n * e)
    p = z @ emb.w_out
    t.alloc("project", batch * n * c)
    y = p
    if cfg.residual:
        y = p + x
        t.alloc("residual", batch * n * c)
    cache["z"] = z
    cache["o"] = o
    return y, cache


def _as_feature_map(x) -> FeatureMap:
    if not isinstance(x, FeatureMap):
        raise TypeError("expected a FeatureMap")
    return x


def softmax_nl_forward(x: FeatureMap, emb: EmbeddingSet, cfg: AttentionConfig, tracker=None):
    """Softmax non-local block. Returns ``(y, attention_map)``."""
    x = _as_feature_map(x)
    if cfg.variant != "softmax_nl":
        raise ValueError("softmax_nl_forward needs variant='softmax_nl'")
    y, cache = _forward(x.values, emb, cfg, tracker=tracker)
    a = cache["a"]
    amap = AttentionMap(a[0] if cfg.heads == 1 else a, True, "softmax_nl")
    return FeatureMap(x.height, x.width, y), amap


def scaled_nl_forward(
    x: FeatureMap,
    emb: EmbeddingSet,
    cfg: AttentionConfig,
    mode: str = "associative",
    tracker=None,
) -> FeatureMap:
    x = _as_feature_map(x)
    if cfg.variant != "scaled_nl":
        raise ValueError("scaled_nl_forward needs variant='scaled_nl'")
    y, _ = _forward(x.values, emb, cfg, mode, tracker)
    return FeatureMap(x.height, x.width, y)


def ablated_forward(
    x: FeatureMap, emb: EmbeddingSet, cfg: AttentionConfig, mode: str = "associative"
) -> FeatureMap:
    """Forward with queries/keys reduced to their norms or their directions.

    Magnitude-only logits use a ``1/sqrt(1)`` scale since the projected
    vectors are scalars; direction-only logits keep ``1/sqrt(C_e)``.
    """
    if cfg.scope not in ("magnitude_only", "direction_only"):
        raise ValueError("ablated_forward needs scope 'magnitude_only' or 'direction_only'")
    return forward(x, emb, cfg, mode)


def multi_head_forward(
    x: FeatureMap,
    emb: EmbeddingSet | list,
    cfg: AttentionConfig,
    mode: str = "associative",
    w_out=None,
) -> FeatureMap:
    """Run ``cfg.heads`` heads on the full input, concatenate, project.

    ``emb`` is either a stacked :class:`EmbeddingSet` or a list of per-head
    ``(w_theta, w_phi, w_g)`` triples together with a shared ``w_out``.
    """
    if not isinstance(emb, EmbeddingSet):
        heads = list(emb)
        if len(heads) != cfg.heads:
            raise DimensionError(f"got {len(heads)} heads, config has {cfg.heads}")
        emb = EmbeddingSet.stack(heads, w_out)
    return forward(x, emb, cfg, mode)


def forward(x: FeatureMap, emb: EmbeddingSet, cfg: AttentionConfig, mode: str = "associative", tracker=None) -> FeatureMap:
    """Block output for any variant, scope and head count."""
    x = _as_feature_map(x)
    y, _ = _forward(x.values, emb, cfg, mode, tracker)
    return FeatureMap(x.height, x.width, y)
