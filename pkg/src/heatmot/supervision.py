"""Ground-truth heatmaps and the training losses with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import GridGeometry, OutputMaps

PRED_CLAMP = 1e-4
PEAK_EPS = 1e-9
MIN_OVERLAP = 0.7


@dataclass
class GroundTruthObjects:
    """Objects of one frame in output-grid units.

    Attributes:
        centers: ``(K, 2)`` array of ``(x, y)`` centers.
        sizes: ``(K, 2)`` array of ``(width, height)``.
        displacements: optional ``(K, 2)`` targets for the tracking map, read
            at each object's center cell. ``None`` leaves the tracking loss
            unsupervised.
    """

    centers: np.ndarray
    sizes: np.ndarray
    displacements: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(-1, 2)
        if len(self.centers) == 0:
            raise ValueError("need at least one object")
        if len(self.centers) != len(self.sizes):
            raise ValueError("centers and sizes differ in length")
        if np.any(self.sizes <= 0):
            raise ValueError("object sizes must be positive")
        if self.displacements is not None:
            self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 2)
            if len(self.displacements) != len(self.centers):
                raise ValueError("displacements and centers differ in length")

    @property
    def count(self) -> int:
        return len(self.centers)

    def center_cells(self) -> list[tuple[int, int]]:
        """Rounded ``(row, col)`` cell of each center."""
        cells = np.floor(self.centers + 0.5).astype(int)
        return [(int(r), int(c)) for c, r in cells]


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self) -> None:
        if self.alpha < 1 or self.beta < 1:
            raise ValueError("focal exponents must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.1
    lambda_t: float = 1.0
    lambda_r: float = 0.5

    def __post_init__(self) -> None:
        if min(self.lambda_s, self.lambda_t, self.lambda_r) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Loss components; ``grad_*`` are gradients of ``total`` w.r.t. each map."""

    total: float
    l_c: float
    l_s: float
    l_t: float
    l_r: float
    grad_c: np.ndarray
    grad_s: np.ndarray
    grad_t: np.ndarray
    weights: LossWeights = field(default_factory=LossWeights)


def gaussian_radius(height: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest corner shift keeping IoU >= ``min_overlap`` with the true box.

    Minimum over the three CornerNet cases: one corner in and one out, both
    corners inside, both corners outside. Each is the relevant root of a
    quadratic in the shift ``r``.
    """
    s, p, o = height + width, height * width, min_overlap
    # (w - r)(h - r) = 2o wh / (1 + o)
    r1 = (s - math.sqrt(s ** 2 - 4 * p * (1 - o) / (1 + o))) / 2
    # (w - 2r)(h - 2r) = o wh
    r2 = (2 * s - math.sqrt(4 * s ** 2 - 16 * (1 - o) * p)) / 8
    # wh = o (w + 2r)(h + 2r)
    r3 = (-2 * o * s + math.sqrt(4 * o ** 2 * s ** 2 + 16 * o * (1 - o) * p)) / (8 * o)
    return min(r1, r2, r3)


def object_sigma(width: float, height: float) -> float:
    return gaussian_radius(height, width) / 3.0


def render_gaussian(shape: tuple[int, int], cell: tuple[int, int], sigma: float) -> np.ndarray:
    """Full-grid Gaussian kernel with peak exactly 1 at ``cell = (row, col)``."""
    rows = np.arange(shape[0])[:, None] - cell[0]
    cols = np.arange(shape[1])[None, :] - cell[1]
    return np.exp(-(rows ** 2 + cols ** 2) / (2.0 * sigma ** 2))


def build_gt_heatmap(objects: GroundTruthObjects, geom: GridGeometry) -> np.ndarray:
    """Pointwise max of per-object Gaussians centered at the rounded center cells."""
    shape = geom.output_shape
    heat = np.zeros(shape)
    for (row, col), (w, h) in zip(objects.center_cells(), objects.sizes):
        if not (0 <= row < shape[0] and 0 <= col < shape[1]):
            raise ValueError(f"object center cell {(row, col)} outside grid {shape}")
        np.maximum(heat, render_gaussian(shape, (row, col), object_sigma(w, h)), out=heat)
    return heat


def center_focal_loss(pred: np.ndarray, gt: np.ndarray, k: int,
                      params: FocalParams = FocalParams()) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss over the center heatmap, normalized by ``k``.

    Returned with a positive sign. Predictions are clamped to
    ``[1e-4, 1 - 1e-4]``; the gradient is zero where the clamp is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    a, b = params.alpha, params.beta
    p = np.clip(pred, PRED_CLAMP, 1 - PRED_CLAMP)
    pos = gt > 1 - PEAK_EPS
    neg_w = (1 - gt) ** b

    pos_term = (1 - p) ** a * np.log(p)
    neg_term = neg_w * p ** a * np.log(1 - p)
    loss = -(pos_term[pos].sum() + neg_term[~pos].sum()) / k

    d_pos = -a * (1 - p) ** (a - 1) * np.log(p) + (1 - p) ** a / p
    d_neg = neg_w * (a * p ** (a - 1) * np.log(1 - p) - p ** a / (1 - p))
    grad = -np.where(pos, d_pos, d_neg) / k
    grad[(pred < PRED_CLAMP) | (pred > 1 - PRED_CLAMP)] = 0.0
    return float(loss), grad


def _check_cells(cells: Sequence[tuple[int, int]], shape: tuple[int, int]) -> None:
    if len(set(map(tuple, cells))) != len(cells):
        raise ValueError("duplicate center cells in sparse supervision")
    for r, c in cells:
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise ValueError(f"center cell {(r, c)} outside grid {shape}")


def sparse_l1_loss(pred: np.ndarray, targets: np.ndarray, cells: Sequence[tuple[int, int]],
                   k: int) -> tuple[float, np.ndarray]:
    """L1 regression supervised only at object center cells.

    Args:
        pred: ``(H, W, C)`` prediction map.
        targets: ``(K, C)`` target vector per object.
        cells: ``(row, col)`` of each object, distinct.
        k: normalizer.
    """
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(cells), -1)
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_cells(cells, pred.shape[:2])
    grad = np.zeros_like(pred)
    if not cells:
        return 0.0, grad
    rows, cols = np.array(cells).T
    diff = pred[rows, cols] - targets
    grad[rows, cols] = np.sign(diff) / k
    return float(np.abs(diff).sum() / k), grad


def boxes_from_sizes(centers: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """``(x1, y1, x2, y2)`` boxes around ``centers`` with ``sizes = (w, h)``."""
    half = sizes / 2.0
    return np.concatenate([centers - half, centers + half], axis=-1)


def box_l1_loss(pred_size: np.ndarray, gt_centers: np.ndarray, gt_sizes: np.ndarray,
                cells: Sequence[tuple[int, int]], k: int) -> tuple[float, np.ndarray]:
    """L1 between corner boxes built from predicted sizes and from ground truth.

    Both boxes share the ground-truth center, so only the size read at each
    center cell of ``pred_size`` receives gradient.
    """
    pred_size = np.asarray(pred_size, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_cells(cells, pred_size.shape[:2])
    grad = np.zeros_like(pred_size)
    if not cells:
        return 0.0, grad
    rows, cols = np.array(cells).T
    pred_boxes = boxes_from_sizes(gt_centers, pred_size[rows, cols])
    gt_boxes = boxes_from_sizes(gt_centers, gt_sizes)
    sign = np.sign(pred_boxes - gt_boxes)
    # d(x1)/dw = -1/2, d(x2)/dw = +1/2; same for y and h
    grad[rows, cols] = (0.5 * (sign[:, 2:] - sign[:, :2])) / k
    return float(np.abs(pred_boxes - gt_boxes).sum() / k), grad


def total_loss(pred: OutputMaps, gt: GroundTruthObjects, geom: GridGeometry,
               weights: LossWeights = LossWeights(),
               params: FocalParams = FocalParams()) -> LossReport:
    """Weighted sum of center, size, tracking and box losses with all gradients."""
    if pred.shape != geom.output_shape:
        raise ValueError(f"maps have shape {pred.shape}, geometry expects {geom.output_shape}")
    k = gt.count
    cells = gt.center_cells()
    heat = build_gt_heatmap(gt, geom)

    l_c, grad_c = center_focal_loss(pred.center, heat, k, params)
    l_s, grad_s = sparse_l1_loss(pred.size, gt.sizes, cells, k)
    l_r, grad_r = box_l1_loss(pred.size, gt.centers, gt.sizes, cells, k)
    if gt.displacements is None:
        l_t, grad_t = 0.0, np.zeros_like(pred.displacement)
    else:
        l_t, grad_t = sparse_l1_loss(pred.displacement, gt.displacements, cells, k)

    total = l_c + weights.lambda_s * l_s + weights.lambda_t * l_t + weights.lambda_r * l_r
    return LossReport(
        total=total, l_c=l_c, l_s=l_s, l_t=l_t, l_r=l_r,
        grad_c=grad_c,
        grad_s=weights.lambda_s * grad_s + weights.lambda_r * grad_r,
        grad_t=weights.lambda_t * grad_t,
        weights=weights,
    )
