"""Toy causal transformer with an explicit KV-cache interface.

The forward pass here is used twice: as the serial reference and as the
per-worker kernel of the parallel engine.  Every block is

    h = h + o_proj(causal_attention(q_proj(h), k_proj(h), v_proj(h)))
    h = h + w2 @ relu(w1 @ h)

with an optional RMS normalisation in front of both sublayers.  There are no
bias terms, so a zero input produces zero projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_context, check_matrix, precision_dtype
from .exceptions import CacheAlignmentError, ConfigurationError, DimensionError

# Additive stand-in for -inf in the causal mask; exp() of it underflows to
# exactly zero at the respective precision.
MASK_VALUE = {"f32": -1e9, "f64": -1e18}
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 16
    n_heads: int = 4
    n_kv_heads: int | None = None
    n_layers: int = 2
    seed: int = 0
    precision: str = "f64"
    d_ff: int | None = None
    rms_norm: bool = False

    def __post_init__(self):
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        for name in ("d_model", "n_heads", "n_kv_heads", "n_layers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d_ff is not None and self.d_ff < 1:
            raise ConfigurationError(f"d_ff must be positive, got {self.d_ff}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.precision not in MASK_VALUE:
            raise ConfigurationError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.n_heads % self.n_kv_heads:
            raise ConfigurationError(
                f"n_heads={self.n_heads} is not divisible by n_kv_heads={self.n_kv_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def dtype(self):
        return precision_dtype(self.precision)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "n_layers": self.n_layers,
            "seed": int(self.seed),
            "precision": self.precision,
            "d_ff": self.d_ff,
            "rms_norm": self.rms_norm,
        }


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class WeightSet:
    config: ModelConfig
    layers: tuple[LayerWeights, ...]

    def __getitem__(self, layer: int) -> LayerWeights:
        return self.layers[layer]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class CausalMask:
    """Query row ``i`` may attend to key columns ``0 .. offset + i``."""

    offset: int
    rows: int

    def __post_init__(self):
        if self.offset < 0 or self.rows < 1:
            raise ValueError(f"invalid mask offset={self.offset} rows={self.rows}")

    def allowed(self, n_keys: int) -> np.ndarray:
        """Boolean ``(rows, n_keys)`` matrix of attendable positions."""
        query_pos = self.offset + np.arange(self.rows)[:, None]
        return np.arange(n_keys)[None, :] <= query_pos

    def additive(self, n_keys: int, precision: str = "f64") -> np.ndarray:
        dtype = precision_dtype(precision)
        mask = np.zeros((self.rows, n_keys), dtype=dtype)
        mask[~self.allowed(n_keys)] = MASK_VALUE[precision]
        return mask


@dataclass(frozen=True)
class KVCacheSegment:
    """Keys and values for token positions ``[start_pos, end_pos)`` of one layer."""

    layer: int
    start_pos: int
    end_pos: int
    K: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0 <= self.start_pos < self.end_pos:
            raise CacheAlignmentError(
                f"segment range [{self.start_pos}, {self.end_pos}) is empty or negative"
            )
        if self.K.shape != self.V.shape:
            raise CacheAlignmentError(f"K shape {self.K.shape} != V shape {self.V.shape}")
        if self.K.ndim != 2 or self.K.shape[0] != self.end_pos - self.start_pos:
            raise CacheAlignmentError(
                f"segment [{self.start_pos}, {self.end_pos}) holds {self.K.shape[0]} rows"
            )

    @property
    def rows(self) -> int:
        return self.end_pos - self.start_pos

    def extend(self, other: "KVCacheSegment") -> "KVCacheSegment":
        """Append ``other``, which must start exactly where this segment ends."""
        if other.layer != self.layer:
            raise CacheAlignmentError(f"cannot join layer {self.layer} with layer {other.layer}")
        if other.start_pos != self.end_pos:
            raise CacheAlignmentError(
                f"gap between cached [.., {self.end_pos}) and new [{other.start_pos}, ..)"
            )
        return KVCacheSegment(
            self.layer,
            self.start_pos,
            other.end_pos,
            np.concatenate([self.K, other.K]),
            np.concatenate([self.V, other.V]),
        )


def init_weights(config: ModelConfig) -> WeightSet:
    """Draw deterministic weights for ``config``.

    Each layer gets its own PCG64 stream spawned from ``SeedSequence(config.seed)``.
    Entries are uniform on ``[-1, 1] / sqrt(fan_in)``, drawn in float64 and cast
    to the configured precision, so an f32 model is the rounded f64 model.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_weights expects a ModelConfig")
    d, kv, ff = config.d_model, config.kv_width, config.ffn_width
    shapes = {
        "wq": (d, d),
        "wk": (d, kv),
        "wv": (d, kv),
        "wo": (d, d),
        "w1": (d, ff),
        "w2": (ff, d),
    }
    layers = []
    for child in np.random.SeedSequence(int(config.seed)).spawn(config.n_layers):
        rng = np.random.Generator(np.random.PCG64(child))
        mats = {}
        for name, shape in shapes.items():
            w = (rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(shape[0])).astype(config.dtype)
            w.setflags(write=False)
            mats[name] = w
        layers.append(LayerWeights(**mats))
    return WeightSet(config, tuple(layers))


def _rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def qkv_project(hidden, weights: WeightSet, layer: int):
    """Project hidden states of one layer to ``(Q, K, V)``."""
    cfg = weights.config
    h = check_matrix(hidden, cols=cfg.d_model, name="hidden")
    w = weights[layer]
    if cfg.rms_norm:
        h = _rms(h)
    return h @ w.wq, h @ w.wk, h @ w.wv


def causal_attention(
    Q,
    K,
    V,
    mask: CausalMask,
    n_heads: int,
    n_kv_heads: int | None = None,
    *,
    precision: str | None = None,
    return_weights: bool = False,
):
    """Masked multi-head attention of local queries against (cached + local) keys.

    ``Q`` holds ``mask.rows`` query tokens sitting at absolute positions
    ``mask.offset ..``; ``K``/``V`` cover positions ``0 ..`` and must reach at
    least the last query position.  KV heads are shared by
    ``n_heads // n_kv_heads`` consecutive query heads.  The result has the
    shape of ``Q``.  With ``return_weights`` the ``(n_heads, rows, keys)``
    softmax weights are returned as well.
    """
    Q = np.asarray(Q)
    K = np.asarray(K)
    V = np.asarray(V)
    n_kv_heads = n_heads if n_kv_heads is None else n_kv_heads
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionError("Q, K, V must be 2-D")
    if K.shape != V.shape:
        raise DimensionError(f"K shape {K.shape} != V shape {V.shape}")
    if Q.shape[1] % n_heads or K.shape[1] % n_kv_heads or n_heads % n_kv_heads:
        raise DimensionError("head counts do not divide the projection widths")
    head_dim = Q.shape[1] // n_heads
    if K.shape[1] != n_kv_heads * head_dim:
        raise DimensionError(f"K width {K.shape[1]} != n_kv_heads*head_dim={n_kv_heads * head_dim}")
    if Q.shape[0] != mask.rows:
        raise CacheAlignmentError(f"mask covers {mask.rows} rows but Q has {Q.shape[0]}")
    if K.shape[0] < mask.offset + mask.rows:
        raise CacheAlignmentError(
            f"{K.shape[0]} key rows cannot cover offset {mask.offset} + {mask.rows} queries"
        )
    if precision is None:
        precision = "f32" if Q.dtype == np.float32 else "f64"

    n_keys = K.shape[0]
    group = n_heads // n_kv_heads
    # (heads, rows, head_dim) views; KV heads repeated across their query group
    q = Q.reshape(Q.shape[0], n_heads, head_dim).transpose(1, 0, 2)
    k = np.repeat(K.reshape(n_keys, n_kv_heads, head_dim).transpose(1, 0, 2), group, axis=0)
    v = np.repeat(V.reshape(n_keys, n_kv_heads, head_dim).transpose(1, 0, 2), group, axis=0)

    scores = q @ k.transpose(0, 2, 1) / np.sqrt(head_dim).astype(Q.dtype)
    scores = scores + mask.additive(n_keys, precision)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)

    out = (probs @ v).transpose(1, 0, 2).reshape(Q.shape)
    if return_weights:
        return out, probs
    return out


def finish_layer(hidden, attn, weights: WeightSet, layer: int) -> np.ndarray:
    """Output projection, residual and feed-forward half of a block."""
    w = weights[layer]
    h = hidden + attn @ w.wo
    x = _rms(h) if weights.config.rms_norm else h
    return h + np.maximum(x @ w.w1, 0) @ w.w2


def layer_forward(hidden, weights: WeightSet, layer: int, cache: KVCacheSegment | None = None):
    """One block with an optional cached prefix; returns ``(hidden, updated_cache)``.

    ``hidden`` holds the tokens directly following the cached positions.
    """
    cfg = weights.config
    Q, K, V = qkv_project(hidden, weights, layer)
    offset = 0 if cache is None else cache.end_pos
    local = KVCacheSegment(layer, offset, offset + Q.shape[0], K, V)
    full = local if cache is None else cache.extend(local)
    if full.start_pos != 0:
        raise CacheAlignmentError("cache must start at position 0")
    attn = causal_attention(
        Q, full.K, full.V, CausalMask(offset, Q.shape[0]), cfg.n_heads, cfg.n_kv_heads,
        precision=cfg.precision,
    )
    return finish_layer(hidden, attn, weights, layer), full


def forward_serial(context, weights: WeightSet):
    """Run the whole prompt on one worker.

    Returns the final hidden states (row ``C-1`` is the first-token readout)
    and one cache segment per layer covering positions ``[0, C)``.
    """
    cfg = weights.config
    h = check_context(context, cfg.d_model, cfg.dtype)
    cache = []
    for layer in range(cfg.n_layers):
        h, seg = layer_forward(h, weights, layer)
        cache.append(seg)
    return h, cache
