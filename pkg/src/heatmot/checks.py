"""Self-check suites behind ``heatmot losscheck`` and ``heatmot attncheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    deformable_pre_projection,
    init_deform_attn_params,
    init_mha_params,
    scaled_dot_attention,
    sra_attention,
    tqsa,
)
from .grid import FeaturePyramid
from .supervision import (
    FocalParams,
    box_l1_loss,
    center_focal_loss,
    sparse_l1_loss,
)

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` in the Euclidean norm (0 when both vanish)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def _random_focal_case(rng: np.random.Generator, n: int = 8):
    gt = rng.uniform(0.0, 0.95, size=(n, n))
    peaks = rng.choice(n * n, size=rng.integers(1, 4), replace=False)
    gt.reshape(-1)[peaks] = 1.0
    pred = rng.uniform(0.05, 0.95, size=(n, n))
    return pred, gt, len(peaks)


def _random_sparse_case(rng: np.random.Generator, n: int = 8, channels: int = 2, k: int = 5):
    cells = [divmod(int(c), n) for c in rng.choice(n * n, size=k, replace=False)]
    pred = rng.normal(size=(n, n, channels)) * 3
    targets = rng.normal(size=(k, channels)) * 3
    # keep every supervised residual away from the |.| kink
    rows, cols = np.array(cells).T
    diff = pred[rows, cols] - targets
    targets -= np.where(np.abs(diff) < 0.1, 0.5 * np.sign(diff + 1e-12), 0.0)
    return pred, targets, cells


def gradient_suite(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    params = FocalParams()
    worst = {"center_focal": 0.0, "sparse_l1_size": 0.0, "sparse_l1_tracking": 0.0, "box_l1": 0.0}
    for _ in range(instances):
        pred, gt, k = _random_focal_case(rng)
        _, grad = center_focal_loss(pred, gt, k, params)
        num = numeric_gradient(lambda p: center_focal_loss(p, gt, k, params)[0], pred)
        worst["center_focal"] = max(worst["center_focal"], relative_error(grad, num))

        for name in ("sparse_l1_size", "sparse_l1_tracking"):
            pred, targets, cells = _random_sparse_case(rng)
            _, grad = sparse_l1_loss(pred, targets, cells, len(cells))
            num = numeric_gradient(lambda p: sparse_l1_loss(p, targets, cells, len(cells))[0], pred)
            worst[name] = max(worst[name], relative_error(grad, num))

        pred, sizes, cells = _random_sparse_case(rng)
        pred = np.abs(pred) + 1.0
        sizes = np.abs(sizes) + 1.0
        centers = np.array([(c, r) for r, c in cells], dtype=np.float64)
        _, grad = box_l1_loss(pred, centers, sizes, cells, len(cells))
        num = numeric_gradient(lambda p: box_l1_loss(p, centers, sizes, cells, len(cells))[0], pred)
        worst["box_l1"] = max(worst["box_l1"], relative_error(grad, num))

    return [CheckResult(name, err < GRAD_RTOL, err, f"max relative error {err:.3e} over {instances} instances")
            for name, err in worst.items()]


def _naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.zeros((q.shape[0], v.shape[1]))
    scale = np.sqrt(q.shape[1])
    for i in range(q.shape[0]):
        scores = [sum(q[i, d] * k[j, d] for d in range(q.shape[1])) / scale for j in range(k.shape[0])]
        top = max(scores)
        e = [np.exp(s - top) for s in scores]
        z = sum(e)
        for j in range(k.shape[0]):
            for d in range(v.shape[1]):
                out[i, d] += e[j] / z * v[j, d]
    return out


def attention_suite(seed: int = 0, cases: int = 50) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(cases):
        nq, nk, h = rng.integers(1, 7), rng.integers(1, 9), rng.integers(1, 9)
        q, k, v = rng.normal(size=(nq, h)), rng.normal(size=(nk, h)), rng.normal(size=(nk, h))
        worst = max(worst, float(np.abs(scaled_dot_attention(q, k, v) - _naive_attention(q, k, v)).max()))
    results.append(CheckResult("eq1_parity", worst <= 1e-12, worst, f"max abs diff {worst:.2e}"))

    same = True
    for _ in range(cases):
        q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        same &= np.array_equal(sra_attention(q, k, v, 1), scaled_dot_attention(q, k, v))
    results.append(CheckResult("sra_r1_identity", bool(same), 0.0 if same else 1.0))

    h = 16
    memory = FeaturePyramid([rng.normal(size=(s, s, h)) for s in (2, 4, 8, 16)], (32, 16, 8, 4))
    const = FeaturePyramid([np.full((s, s, h), 0.7) for s in (2, 4, 8, 16)], (32, 16, 8, 4))
    sum_err = const_err = 0.0
    for _ in range(cases // 5):
        params = init_deform_attn_params(rng, h, num_heads=4, num_points=3)
        params.value_proj = None
        queries = rng.normal(size=(5, h))
        refs = rng.uniform(size=(5, 2))
        _, weights = deformable_pre_projection(queries, refs, memory, params)
        sum_err = max(sum_err, float(np.abs(weights.sum(axis=(2, 3)) - 1).max()))
        pre, _ = deformable_pre_projection(queries, refs, const, params)
        const_err = max(const_err, float(np.abs(pre - 0.7).max()))
    results.append(CheckResult("deform_weights_sum", sum_err <= 1e-9, sum_err, f"max |sum-1| {sum_err:.2e}"))
    results.append(CheckResult("deform_constant_memory", const_err <= 1e-9, const_err,
                               f"max deviation {const_err:.2e}"))

    mha = init_mha_params(rng, 8, num_heads=2)
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    err = float(np.abs(tqsa(x, mha)[perm] - tqsa(x[perm], mha)).max())
    results.append(CheckResult("tqsa_permutation", err <= 1e-12, err, f"max abs diff {err:.2e}"))
    return results
