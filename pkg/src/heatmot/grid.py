"""Dense-grid primitives shared by the rest of the package.

Coordinate convention: cell ``(i, j)`` (row, column) has its sampling center at
continuous coordinate ``(x=j, y=i)``. A coordinate at a finer resolution is the
coarse coordinate times the scale factor, so a heatmap cell ``(i, j)`` maps to
input pixel ``(4 j, 4 i)``.

Maps are plain ``numpy`` arrays of shape ``(H, W)`` (single channel) or
``(H, W, C)``, always float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DOWN_RATIO = 4
PYRAMID_STRIDES = (32, 16, 8, 4)
UPSCALE_FACTORS = (2, 4, 8)

Layer = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class GridGeometry:
    """Input image size and the fixed 1/4 output resolution."""

    input_height: int
    input_width: int
    down_ratio: int = DOWN_RATIO

    def __post_init__(self) -> None:
        if self.input_height <= 0 or self.input_width <= 0:
            raise ValueError("input size must be positive")
        if self.input_height % 32 or self.input_width % 32:
            raise ValueError(
                f"input size {self.input_height}x{self.input_width} must be divisible by 32"
            )
        if self.down_ratio != DOWN_RATIO:
            raise ValueError("down_ratio must be 4")

    @property
    def output_shape(self) -> tuple[int, int]:
        return self.input_height // self.down_ratio, self.input_width // self.down_ratio

    def level_shapes(self, strides: Sequence[int] = PYRAMID_STRIDES) -> list[tuple[int, int]]:
        return [(self.input_height // s, self.input_width // s) for s in strides]


@dataclass
class OutputMaps:
    """Network outputs for one frame at 1/4 resolution.

    Attributes:
        center: ``(H/4, W/4)`` heatmap with values in [0, 1].
        size: ``(H/4, W/4, 2)`` box width/height in input pixels.
        displacement: ``(H/4, W/4, 2)`` center motion from t-1 to t, in grid cells.
    """

    center: np.ndarray
    size: np.ndarray
    displacement: np.ndarray

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.displacement = np.asarray(self.displacement, dtype=np.float64)
        if self.center.ndim != 2:
            raise ValueError("center map must be 2-D")
        hw = self.center.shape
        for name, arr in (("size", self.size), ("displacement", self.displacement)):
            if arr.shape != (*hw, 2):
                raise ValueError(f"{name} map has shape {arr.shape}, expected {(*hw, 2)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.center.shape


@dataclass
class FeaturePyramid:
    """Multi-scale feature maps ordered coarse to fine.

    ``strides[l]`` is the input-pixel size of one cell of ``levels[l]``; a
    point at input pixel ``p`` sits at level coordinate ``p / strides[l]``.
    """

    levels: list[np.ndarray]
    strides: tuple[int, ...] = field(default=PYRAMID_STRIDES)

    def __post_init__(self) -> None:
        self.levels = [np.asarray(lv, dtype=np.float64) for lv in self.levels]
        self.strides = tuple(int(s) for s in self.strides)
        if not self.levels:
            raise ValueError("pyramid has no levels")
        if len(self.strides) != len(self.levels):
            raise ValueError(
                f"{len(self.levels)} levels but {len(self.strides)} strides"
            )
        channels = {lv.shape[-1] if lv.ndim == 3 else -1 for lv in self.levels}
        if -1 in channels or len(channels) != 1:
            raise ValueError("all levels must be (H, W, h) with a shared channel count")
        if any(lv.size == 0 for lv in self.levels):
            raise ValueError("pyramid level is empty")

    @classmethod
    def zeros(cls, geom: GridGeometry, hidden_dim: int,
              strides: Sequence[int] = PYRAMID_STRIDES) -> "FeaturePyramid":
        return cls([np.zeros((h, w, hidden_dim)) for h, w in geom.level_shapes(strides)],
                   tuple(strides))

    @property
    def hidden_dim(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lv.shape[:2] for lv in self.levels]

    @property
    def num_cells(self) -> int:
        return sum(h * w for h, w in self.shapes)

    def check_geometry(self, geom: GridGeometry) -> None:
        expected = geom.level_shapes(self.strides)
        if self.shapes != expected:
            raise ValueError(f"pyramid shapes {self.shapes} do not match {expected}")

    def flatten(self) -> np.ndarray:
        """All cells stacked level by level, row-major: ``(num_cells, h)``."""
        return np.concatenate([lv.reshape(-1, self.hidden_dim) for lv in self.levels])

    def with_flat(self, flat: np.ndarray) -> "FeaturePyramid":
        """Pyramid with this geometry holding ``flat`` (inverse of :meth:`flatten`)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape[0] != self.num_cells:
            raise ValueError(f"expected {self.num_cells} rows, got {flat.shape[0]}")
        out, start = [], 0
        for h, w in self.shapes:
            out.append(flat[start:start + h * w].reshape(h, w, flat.shape[1]))
            start += h * w
        return FeaturePyramid(out, self.strides)

    def map_cells(self, fn) -> "FeaturePyramid":
        return self.with_flat(fn(self.flatten()))


def _as_map(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim not in (2, 3) or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W[, C]) map, got shape {m.shape}")
    return m


def _bilinear_weights(x: float, y: float, h: int, w: int):
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_sample(m: np.ndarray, x: float, y: float) -> np.ndarray | float:
    """Interpolate ``m`` at continuous ``(x, y)``, clamping to the border cells.

    Returns a float for a 2-D map and a channel vector for a 3-D map.
    """
    m = _as_map(m)
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("sample point must be finite")
    x0, x1, y0, y1, fx, fy = _bilinear_weights(x, y, m.shape[0], m.shape[1])
    top = (1 - fx) * m[y0, x0] + fx * m[y0, x1]
    bottom = (1 - fx) * m[y1, x0] + fx * m[y1, x1]
    out = (1 - fy) * top + fy * bottom
    return float(out) if m.ndim == 2 else out


def bilinear_sample_many(m: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized :func:`bilinear_sample` over arrays of points."""
    m = _as_map(m)
    h, w = m.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    if m.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = (1 - fx) * m[y0, x0] + fx * m[y0, x1]
    bottom = (1 - fx) * m[y1, x0] + fx * m[y1, x1]
    return (1 - fy) * top + fy * bottom


def max_pool_3x3(m: np.ndarray) -> np.ndarray:
    """3x3 neighbourhood max with the window shrunk at the borders."""
    m = _as_map(m)
    if m.ndim != 2:
        raise ValueError("max_pool_3x3 takes a single-channel map")
    padded = np.pad(m, 1, mode="constant", constant_values=-np.inf)
    h, w = m.shape
    out = np.full_like(m, -np.inf)
    for di in range(3):
        for dj in range(3):
            np.maximum(out, padded[di:di + h, dj:dj + w], out=out)
    return out


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def upscale_bilinear(m: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling by 2, 4 or 8.

    Output cell ``J`` sits at input coordinate ``J / factor`` so that every
    input cell center coincides with an output cell center; cells past the
    last input center take the border value.
    """
    if factor not in UPSCALE_FACTORS:
        raise ValueError(f"unsupported upscale factor {factor}; use one of {UPSCALE_FACTORS}")
    m = _as_map(m)
    h, w = m.shape[:2]
    ys = np.arange(h * factor) / factor
    xs = np.arange(w * factor) / factor
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample_many(m, gx, gy)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def ffn_forward(x: np.ndarray, layers: Sequence[Layer]) -> np.ndarray:
    """Affine layers ``(W, b)`` with ``W`` of shape ``(out, in)``, ReLU between them.

    ``x`` may be a single vector or a batch of row vectors.
    """
    out = np.asarray(x, dtype=np.float64)
    if not layers:
        raise ValueError("ffn needs at least one layer")
    for idx, (weight, bias) in enumerate(layers):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[1] != out.shape[-1] or bias.shape != (weight.shape[0],):
            raise ValueError(
                f"layer {idx}: weight {weight.shape} / bias {bias.shape} "
                f"incompatible with input width {out.shape[-1]}"
            )
        out = out @ weight.T + bias
        if idx < len(layers) - 1:
            out = relu(out)
    return out


def identity_layers(dim: int) -> list[Layer]:
    return [(np.eye(dim), np.zeros(dim))]


def random_ffn(rng: np.random.Generator, dims: Sequence[int], scale: float = 0.5) -> list[Layer]:
    """Seeded random layers for ``dims = (in, hidden, ..., out)``."""
    return [
        (rng.normal(scale=scale / np.sqrt(d_in), size=(d_out, d_in)), rng.normal(scale=0.1, size=d_out))
        for d_in, d_out in zip(dims[:-1], dims[1:])
    ]
