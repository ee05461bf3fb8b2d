"""Reference forward passes for the attention blocks and the branch merge.

Everything here is a plain-numpy forward evaluation in float64. Parameters are
supplied by the caller (seeded random or loaded from a parameter bundle, see
:mod:`heatmot.params_io`); nothing is trained.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import (
    FeaturePyramid,
    Layer,
    bilinear_sample_many,
    ffn_forward,
    identity_layers,
    random_ffn,
    relu,
    softmax,
    upscale_bilinear,
)

DEFAULT_HEADS = 8
DEFAULT_POINTS = 4
NUM_LEVELS = 4
LN_EPS = 1e-5


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be matrices")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if min(q.shape[1], k.shape[0]) == 0:
        raise ValueError("empty key set or zero hidden dimension")


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``softmax(q k^T / sqrt(h)) v`` with a row-wise softmax."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_qkv(q, k, v)
    if q.shape[0] == 0:
        return np.zeros((0, v.shape[1]))
    scores = q @ k.T / np.sqrt(q.shape[1])
    return softmax(scores, axis=1) @ v


def reduce_rows(x: np.ndarray, r: int) -> np.ndarray:
    """Average consecutive groups of ``r`` rows; a short last group is averaged as is."""
    if r < 1:
        raise ValueError("reduction factor must be positive")
    x = np.asarray(x, dtype=np.float64)
    if r == 1:
        return x
    n = x.shape[0]
    return np.stack([x[i:i + r].mean(axis=0) for i in range(0, n, r)])


def sra_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, r: int) -> np.ndarray:
    """Spatial-reduction attention: keys and values shrunk ``r``-fold, queries kept."""
    if r <= 0:
        raise ValueError("reduction factor must be positive")
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"{k.shape[0]} keys but {v.shape[0]} values")
    return scaled_dot_attention(q, reduce_rows(k, r), reduce_rows(v, r))


def layer_norm(x: np.ndarray, gamma: np.ndarray | None = None,
               beta: np.ndarray | None = None) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + LN_EPS)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def _layers_to_arrays(layers: Sequence[Layer], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(layers):
        out[f"{prefix}.{i}.weight"] = np.asarray(w, dtype=np.float64)
        out[f"{prefix}.{i}.bias"] = np.asarray(b, dtype=np.float64)
    return out


def _layers_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> list[Layer]:
    layers = []
    while f"{prefix}.{len(layers)}.weight" in arrays:
        i = len(layers)
        layers.append((arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"]))
    if not layers:
        raise KeyError(f"no layers stored under {prefix!r}")
    return layers


@dataclass
class DeformAttnParams:
    """Multi-scale deformable attention parameters.

    ``offset_net`` maps a query to ``heads * levels * points * 2`` offsets,
    ordered (head, level, point, xy) and measured in cells of the target level.
    ``weight_net`` maps a query to ``heads * levels * points`` logits, softmaxed
    per head over (level, point). Each head reads its own contiguous slice of
    ``hidden_dim / num_heads`` channels of the projected memory.
    """

    hidden_dim: int
    offset_net: list[Layer]
    weight_net: list[Layer]
    value_proj: list[Layer] | None = None
    output_proj: list[Layer] | None = None
    num_heads: int = DEFAULT_HEADS
    num_points: int = DEFAULT_POINTS
    num_levels: int = NUM_LEVELS

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        n = self.num_heads * self.num_levels * self.num_points
        if np.asarray(self.offset_net[-1][0]).shape[0] != 2 * n:
            raise ValueError(f"offset_net must emit {2 * n} values")
        if np.asarray(self.weight_net[-1][0]).shape[0] != n:
            raise ValueError(f"weight_net must emit {n} values")

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {
            f"{prefix}.hidden_dim": np.array(float(self.hidden_dim)),
            f"{prefix}.num_heads": np.array(float(self.num_heads)),
            f"{prefix}.num_points": np.array(float(self.num_points)),
            f"{prefix}.num_levels": np.array(float(self.num_levels)),
        }
        out.update(_layers_to_arrays(self.offset_net, f"{prefix}.offset_net"))
        out.update(_layers_to_arrays(self.weight_net, f"{prefix}.weight_net"))
        if self.value_proj is not None:
            out.update(_layers_to_arrays(self.value_proj, f"{prefix}.value_proj"))
        if self.output_proj is not None:
            out.update(_layers_to_arrays(self.output_proj, f"{prefix}.output_proj"))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "DeformAttnParams":
        def optional(name: str) -> list[Layer] | None:
            key = f"{prefix}.{name}"
            return _layers_from_arrays(arrays, key) if f"{key}.0.weight" in arrays else None

        return cls(
            hidden_dim=int(arrays[f"{prefix}.hidden_dim"]),
            offset_net=_layers_from_arrays(arrays, f"{prefix}.offset_net"),
            weight_net=_layers_from_arrays(arrays, f"{prefix}.weight_net"),
            value_proj=optional("value_proj"),
            output_proj=optional("output_proj"),
            num_heads=int(arrays[f"{prefix}.num_heads"]),
            num_points=int(arrays[f"{prefix}.num_points"]),
            num_levels=int(arrays[f"{prefix}.num_levels"]),
        )


def init_deform_attn_params(rng: np.random.Generator, hidden_dim: int,
                            num_heads: int = DEFAULT_HEADS, num_points: int = DEFAULT_POINTS,
                            num_levels: int = NUM_LEVELS,
                            offset_scale: float = 0.5) -> DeformAttnParams:
    n = num_heads * num_levels * num_points
    offset_net = random_ffn(rng, (hidden_dim, 2 * n), scale=offset_scale)
    return DeformAttnParams(
        hidden_dim=hidden_dim,
        offset_net=offset_net,
        weight_net=random_ffn(rng, (hidden_dim, n)),
        value_proj=random_ffn(rng, (hidden_dim, hidden_dim)),
        output_proj=random_ffn(rng, (hidden_dim, hidden_dim)),
        num_heads=num_heads,
        num_points=num_points,
        num_levels=num_levels,
    )


def deform_attention_weights(queries: np.ndarray, params: DeformAttnParams) -> np.ndarray:
    """Per-query sampling weights, shape ``(n, heads, levels, points)``."""
    m, lv, p = params.num_heads, params.num_levels, params.num_points
    logits = ffn_forward(queries, params.weight_net).reshape(-1, m, lv * p)
    return softmax(logits, axis=-1).reshape(-1, m, lv, p)


def deform_sampling_locations(queries: np.ndarray, reference_points: np.ndarray,
                              memory: FeaturePyramid,
                              params: DeformAttnParams) -> list[np.ndarray]:
    """Level-local ``(x, y)`` sample coordinates, one ``(n, heads, points, 2)`` array per level."""
    m, lv, p = params.num_heads, params.num_levels, params.num_points
    offsets = ffn_forward(queries, params.offset_net).reshape(-1, m, lv, p, 2)
    locs = []
    for level, (h, w) in enumerate(memory.shapes):
        scale = np.array([w, h], dtype=np.float64)
        normalized = reference_points[:, None, None, :] + offsets[:, :, level] / scale
        locs.append(normalized * scale)
    return locs


def deformable_pre_projection(queries: np.ndarray, reference_points: np.ndarray,
                              memory: FeaturePyramid,
                              params: DeformAttnParams) -> tuple[np.ndarray, np.ndarray]:
    """Weighted, head-concatenated samples before the output projection.

    Returns the ``(n, hidden_dim)`` features and the ``(n, heads, levels, points)``
    attention weights used to combine them.
    """
    queries = np.asarray(queries, dtype=np.float64)
    reference_points = np.asarray(reference_points, dtype=np.float64).reshape(-1, 2)
    if queries.ndim != 2 or queries.shape[1] != params.hidden_dim:
        raise ValueError(f"queries must be (n, {params.hidden_dim})")
    if reference_points.shape[0] != queries.shape[0]:
        raise ValueError(
            f"{reference_points.shape[0]} reference points for {queries.shape[0]} queries"
        )
    if len(memory.levels) != params.num_levels:
        raise ValueError(f"memory has {len(memory.levels)} levels, params expect {params.num_levels}")
    if memory.hidden_dim != params.hidden_dim:
        raise ValueError("memory channel count does not match hidden_dim")
    n = queries.shape[0]
    if n == 0:
        return np.zeros((0, params.hidden_dim)), np.zeros((0, params.num_heads, params.num_levels, params.num_points))

    m = params.num_heads
    dh = params.hidden_dim // m
    weights = deform_attention_weights(queries, params)
    locs = deform_sampling_locations(queries, reference_points, memory, params)
    out = np.zeros((n, m, dh))
    for level, value in enumerate(memory.levels):
        if params.value_proj is not None:
            value = ffn_forward(value, params.value_proj)
        value = value.reshape(*value.shape[:2], m, dh)
        for head in range(m):
            xy = locs[level][:, head]
            sampled = bilinear_sample_many(value[:, :, head], xy[..., 0], xy[..., 1])
            out[:, head] += np.einsum("np,npd->nd", weights[:, head, level], sampled)
    return out.reshape(n, params.hidden_dim), weights


def deformable_cross_attention(queries: np.ndarray, reference_points: np.ndarray,
                               memory: FeaturePyramid, params: DeformAttnParams) -> np.ndarray:
    """Deformable cross-attention of sparse or flattened dense queries over ``memory``.

    ``reference_points`` are normalized ``(x, y)``: a point ``u`` lands on
    level coordinate ``u * (W_l, H_l)``.
    """
    pre, _ = deformable_pre_projection(queries, reference_points, memory, params)
    if params.output_proj is None:
        return pre
    return ffn_forward(pre, params.output_proj)


@dataclass
class MHAParams:
    """Multi-head self-attention projections, each a single affine layer."""

    hidden_dim: int
    wq: Layer
    wk: Layer
    wv: Layer
    wo: Layer
    num_heads: int = DEFAULT_HEADS

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.hidden_dim": np.array(float(self.hidden_dim)),
               f"{prefix}.num_heads": np.array(float(self.num_heads))}
        for name in ("wq", "wk", "wv", "wo"):
            out.update(_layers_to_arrays([getattr(self, name)], f"{prefix}.{name}"))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "MHAParams":
        proj = {name: _layers_from_arrays(arrays, f"{prefix}.{name}")[0]
                for name in ("wq", "wk", "wv", "wo")}
        return cls(hidden_dim=int(arrays[f"{prefix}.hidden_dim"]),
                   num_heads=int(arrays[f"{prefix}.num_heads"]), **proj)


def init_mha_params(rng: np.random.Generator, hidden_dim: int,
                    num_heads: int = DEFAULT_HEADS) -> MHAParams:
    layers = [random_ffn(rng, (hidden_dim, hidden_dim))[0] for _ in range(4)]
    return MHAParams(hidden_dim, *layers, num_heads=num_heads)


def multi_head_attention(x: np.ndarray, params: MHAParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.hidden_dim:
        raise ValueError(f"expected (n, {params.hidden_dim}) queries, got {x.shape}")
    m = params.num_heads
    dh = params.hidden_dim // m
    q = ffn_forward(x, [params.wq])
    k = ffn_forward(x, [params.wk])
    v = ffn_forward(x, [params.wv])
    heads = [
        scaled_dot_attention(q[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh],
                             v[:, i * dh:(i + 1) * dh])
        for i in range(m)
    ]
    return ffn_forward(np.concatenate(heads, axis=1), [params.wo])


def tqsa(tracking_queries: np.ndarray, params: MHAParams) -> np.ndarray:
    """Self-attention among the sparse tracking queries, residual-added."""
    x = np.asarray(tracking_queries, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("tqsa needs at least one query")
    return x + multi_head_attention(x, params)


class DecoderMode(str, enum.Enum):
    SINGLE = "Single"
    DUAL = "Dual"
    TQSA_SINGLE = "TQSA-Single"
    TQSA_DUAL = "TQSA-Dual"

    @property
    def dual(self) -> bool:
        return self in (DecoderMode.DUAL, DecoderMode.TQSA_DUAL)

    @property
    def has_tqsa(self) -> bool:
        return self in (DecoderMode.TQSA_SINGLE, DecoderMode.TQSA_DUAL)


@dataclass(frozen=True)
class DecoderConfig:
    n_dec: int = 6
    mode: DecoderMode = DecoderMode.TQSA_SINGLE
    residual: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DecoderMode(self.mode))
        if not 3 <= self.n_dec <= 6:
            raise ValueError(f"n_dec must be in [3, 6], got {self.n_dec}")


@dataclass
class DecoderLayerParams:
    """One decoder layer: optional self-attention, deformable cross-attention, FFN.

    Each sub-block is followed by layer normalization (post-norm layout);
    ``norms`` holds ``(gamma, beta)`` per sub-block, ``None`` for unit/zero.
    """

    cross: DeformAttnParams
    ffn: list[Layer]
    self_attn: MHAParams | None = None
    norms: list[tuple[np.ndarray, np.ndarray] | None] = field(default_factory=lambda: [None] * 3)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = self.cross.to_arrays(f"{prefix}.cross")
        out.update(_layers_to_arrays(self.ffn, f"{prefix}.ffn"))
        if self.self_attn is not None:
            out.update(self.self_attn.to_arrays(f"{prefix}.self_attn"))
        for i, norm in enumerate(self.norms):
            if norm is not None:
                out[f"{prefix}.norm{i}.gamma"] = np.asarray(norm[0], dtype=np.float64)
                out[f"{prefix}.norm{i}.beta"] = np.asarray(norm[1], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "DecoderLayerParams":
        self_attn = None
        if f"{prefix}.self_attn.hidden_dim" in arrays:
            self_attn = MHAParams.from_arrays(arrays, f"{prefix}.self_attn")
        norms = []
        for i in range(3):
            key = f"{prefix}.norm{i}.gamma"
            norms.append((arrays[key], arrays[f"{prefix}.norm{i}.beta"]) if key in arrays else None)
        return cls(
            cross=DeformAttnParams.from_arrays(arrays, f"{prefix}.cross"),
            ffn=_layers_from_arrays(arrays, f"{prefix}.ffn"),
            self_attn=self_attn,
            norms=norms,
        )


def init_decoder_layer(rng: np.random.Generator, hidden_dim: int, with_self_attn: bool = False,
                       num_heads: int = DEFAULT_HEADS, num_points: int = DEFAULT_POINTS,
                       num_levels: int = NUM_LEVELS) -> DecoderLayerParams:
    return DecoderLayerParams(
        cross=init_deform_attn_params(rng, hidden_dim, num_heads, num_points, num_levels),
        ffn=random_ffn(rng, (hidden_dim, 2 * hidden_dim, hidden_dim)),
        self_attn=init_mha_params(rng, hidden_dim, num_heads) if with_self_attn else None,
    )


@dataclass
class DecoderParams:
    """Per-layer parameters of the detection (DDCA) and tracking (TQSA/TDCA) stacks."""

    det_layers: list[DecoderLayerParams]
    track_layers: list[DecoderLayerParams]


def init_decoder_params(rng: np.random.Generator, hidden_dim: int, cfg: DecoderConfig,
                        num_heads: int = DEFAULT_HEADS, num_points: int = DEFAULT_POINTS,
                        num_levels: int = NUM_LEVELS) -> DecoderParams:
    det = [init_decoder_layer(rng, hidden_dim, False, num_heads, num_points, num_levels)
           for _ in range(cfg.n_dec)] if cfg.mode.dual else []
    track = [init_decoder_layer(rng, hidden_dim, cfg.mode.has_tqsa, num_heads, num_points, num_levels)
             for _ in range(cfg.n_dec)]
    return DecoderParams(det, track)


def _norm(x: np.ndarray, norm) -> np.ndarray:
    return layer_norm(x) if norm is None else layer_norm(x, norm[0], norm[1])


def decoder_layer(x: np.ndarray, reference_points: np.ndarray, memory: FeaturePyramid,
                  layer: DecoderLayerParams, use_self_attn: bool = False,
                  residual: bool = True) -> np.ndarray:
    if use_self_attn:
        if layer.self_attn is None:
            raise ValueError("layer has no self-attention parameters")
        if x.shape[0]:
            sa = tqsa(x, layer.self_attn) if residual else multi_head_attention(x, layer.self_attn)
            x = _norm(sa, layer.norms[0])
    ca = deformable_cross_attention(x, reference_points, memory, layer.cross)
    x = _norm(x + ca if residual else ca, layer.norms[1])
    ff = ffn_forward(x, layer.ffn)
    return _norm(x + ff if residual else ff, layer.norms[2])


def cell_reference_points(pyramid: FeaturePyramid) -> np.ndarray:
    """Normalized ``(x, y)`` of every cell, in :meth:`FeaturePyramid.flatten` order."""
    refs = []
    for h, w in pyramid.shapes:
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        refs.append(np.stack([cols.ravel() / w, rows.ravel() / h], axis=1))
    return np.concatenate(refs)


def ddca(dq: FeaturePyramid, dm: FeaturePyramid, layer: DecoderLayerParams,
         residual: bool = True) -> FeaturePyramid:
    """One detection cross-attention layer over every dense query cell."""
    out = decoder_layer(dq.flatten(), cell_reference_points(dq), dm, layer, residual=residual)
    return dq.with_flat(out)


def tdca(tq: np.ndarray | FeaturePyramid, tm: FeaturePyramid, layer: DecoderLayerParams,
         track_refs: np.ndarray | None = None, use_self_attn: bool = False,
         residual: bool = True) -> np.ndarray | FeaturePyramid:
    """One tracking layer (optional TQSA, then cross-attention to ``tm``)."""
    if isinstance(tq, FeaturePyramid):
        out = decoder_layer(tq.flatten(), cell_reference_points(tq), tm, layer,
                            use_self_attn, residual)
        return tq.with_flat(out)
    if track_refs is None:
        raise ValueError("sparse tracking queries need reference points")
    return decoder_layer(np.asarray(tq, dtype=np.float64), track_refs, tm, layer,
                         use_self_attn, residual)


def decoder_forward(dq: FeaturePyramid, dm: FeaturePyramid,
                    tq: np.ndarray | FeaturePyramid, tm: FeaturePyramid,
                    cfg: DecoderConfig, params: DecoderParams,
                    track_refs: np.ndarray | None = None):
    """Run the decoder and return ``(detection_features, tracking_features)``.

    Single modes pass ``dq`` through untouched as the detection features;
    Dual modes stack ``n_dec`` DDCA layers. The tracking path always stacks
    ``n_dec`` TDCA layers, each preceded by TQSA in the TQSA- modes.
    """
    mode = DecoderMode(cfg.mode)
    if mode.dual:
        if len(params.det_layers) < cfg.n_dec:
            raise ValueError(f"need {cfg.n_dec} detection layers, got {len(params.det_layers)}")
        df = dq
        for layer in params.det_layers[:cfg.n_dec]:
            df = ddca(df, dm, layer, cfg.residual)
    else:
        df = dq
    if len(params.track_layers) < cfg.n_dec:
        raise ValueError(f"need {cfg.n_dec} tracking layers, got {len(params.track_layers)}")
    tf = tq
    for layer in params.track_layers[:cfg.n_dec]:
        tf = tdca(tf, tm, layer, track_refs, mode.has_tqsa, cfg.residual)
    return df, tf


@dataclass
class DeformConvParams:
    """k x k deformable convolution.

    ``offset_weight`` is a plain convolution ``(2 k^2, C_in, k, k)`` producing,
    for tap ``t = a * k + b``, the displacement ``(dy, dx)`` in channels
    ``(2t, 2t + 1)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    offset_weight: np.ndarray
    offset_bias: np.ndarray
    activation: bool = True

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.offset_weight = np.asarray(self.offset_weight, dtype=np.float64)
        self.offset_bias = np.asarray(self.offset_bias, dtype=np.float64)
        c_out, c_in, k, k2 = self.weight.shape
        if k != k2 or k % 2 == 0:
            raise ValueError("kernel must be square with odd size")
        if self.bias.shape != (c_out,):
            raise ValueError("bias shape mismatch")
        if self.offset_weight.shape != (2 * k * k, c_in, k, k) or self.offset_bias.shape != (2 * k * k,):
            raise ValueError("offset conv shape mismatch")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias,
                f"{prefix}.offset_weight": self.offset_weight,
                f"{prefix}.offset_bias": self.offset_bias,
                f"{prefix}.activation": np.array(1.0 if self.activation else 0.0)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "DeformConvParams":
        return cls(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"],
                   arrays[f"{prefix}.offset_weight"], arrays[f"{prefix}.offset_bias"],
                   bool(arrays[f"{prefix}.activation"]))


def init_deform_conv_params(rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                            offset_scale: float = 0.1, activation: bool = True) -> DeformConvParams:
    fan_in = c_in * k * k
    return DeformConvParams(
        weight=rng.normal(scale=1.0 / np.sqrt(fan_in), size=(c_out, c_in, k, k)),
        bias=rng.normal(scale=0.1, size=c_out),
        offset_weight=rng.normal(scale=offset_scale / np.sqrt(fan_in), size=(2 * k * k, c_in, k, k)),
        offset_bias=rng.normal(scale=offset_scale, size=2 * k * k),
        activation=activation,
    )


def conv2d_replicate(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size correlation of ``(H, W, C_in)`` with border-replicated padding."""
    k = weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    h, w = x.shape[:2]
    out = np.broadcast_to(bias, (h, w, weight.shape[0])).copy()
    for a in range(k):
        for b in range(k):
            out += xp[a:a + h, b:b + w] @ weight[:, :, a, b].T
    return out


def deform_conv2d(x: np.ndarray, params: DeformConvParams) -> np.ndarray:
    """Deformable convolution: each tap is bilinearly sampled at base + offset."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.weight.shape[1]:
        raise ValueError(f"input {x.shape} does not match {params.weight.shape[1]} input channels")
    k = params.kernel_size
    c = k // 2
    h, w = x.shape[:2]
    offsets = conv2d_replicate(x, params.offset_weight, params.offset_bias)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.broadcast_to(params.bias, (h, w, params.weight.shape[0])).copy()
    for a in range(k):
        for b in range(k):
            t = a * k + b
            ys = rows + (a - c) + offsets[..., 2 * t]
            xs = cols + (b - c) + offsets[..., 2 * t + 1]
            out += bilinear_sample_many(x, xs, ys) @ params.weight[:, :, a, b].T
    return relu(out) if params.activation else out


def deform_conv_merge(pyramid: FeaturePyramid, stages: Sequence[DeformConvParams]) -> np.ndarray:
    """Merge a coarse-to-fine pyramid into one map at the finest level.

    For each level: deformable conv, then (except after the finest level)
    bilinear x2 upscaling and addition of the next finer level.
    """
    if len(stages) != len(pyramid.levels):
        raise ValueError(f"{len(pyramid.levels)} levels but {len(stages)} conv stages")
    x = pyramid.levels[0]
    for i, stage in enumerate(stages):
        x = deform_conv2d(x, stage)
        if i + 1 < len(pyramid.levels):
            finer = pyramid.levels[i + 1]
            up = upscale_bilinear(x, 2)
            if up.shape != finer.shape:
                raise ValueError(f"upscaled level {i} has shape {up.shape}, next level {finer.shape}")
            x = up + finer
    return x


def identity_deform_attn(hidden_dim: int, num_heads: int = DEFAULT_HEADS,
                         num_points: int = DEFAULT_POINTS, num_levels: int = NUM_LEVELS) -> DeformAttnParams:
    """Zero offsets, uniform weights and identity projections."""
    n = num_heads * num_levels * num_points
    return DeformAttnParams(
        hidden_dim=hidden_dim,
        offset_net=[(np.zeros((2 * n, hidden_dim)), np.zeros(2 * n))],
        weight_net=[(np.zeros((n, hidden_dim)), np.zeros(n))],
        value_proj=identity_layers(hidden_dim),
        output_proj=identity_layers(hidden_dim),
        num_heads=num_heads, num_points=num_points, num_levels=num_levels,
    )
