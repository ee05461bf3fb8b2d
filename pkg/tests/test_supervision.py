import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatmot.grid import GridGeometry, OutputMaps
from heatmot.supervision import (
    GroundTruthObjects,
    LossWeights,
    box_l1_loss,
    build_gt_heatmap,
    center_focal_loss,
    gaussian_radius,
    object_sigma,
    render_gaussian,
    sparse_l1_loss,
    total_loss,
)

GEOM = GridGeometry(128, 128)  # 32x32 output grid


def fd_grad(fn, x, step=1e-6):
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        out[idx] = (fn(up) - fn(down)) / (2 * step)
    return out


def bisect_radius(w, h, o=0.7):
    """Smallest corner shift at which any of the three IoU cases drops to ``o``."""
    cases = [
        lambda r: (w - r) * (h - r) / (2 * w * h - (w - r) * (h - r)),
        lambda r: (w - 2 * r) * (h - 2 * r) / (w * h),
        lambda r: w * h / ((w + 2 * r) * (h + 2 * r)),
    ]
    radii = []
    for f in cases:
        lo, hi = 0.0, min(w, h) / 2
        for _ in range(200):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if f(mid) > o else (lo, mid)
        radii.append(lo)
    return min(radii)


@pytest.mark.parametrize("w,h", [(10, 10), (5, 12), (3.5, 8.25), (40, 90)])
def test_radius_matches_bisection(w, h):
    assert gaussian_radius(h, w) == pytest.approx(bisect_radius(w, h), rel=1e-9)
    assert object_sigma(w, h) == pytest.approx(gaussian_radius(h, w) / 3)


def test_heatmap_single_object_peak():
    heat = build_gt_heatmap(GroundTruthObjects([(10, 10)], [(6, 12)]), GEOM)
    assert heat[10, 10] == 1.0
    assert heat.min() >= 0 and heat.max() == 1.0
    assert np.argmax(heat) == 10 * 32 + 10


def test_heatmap_identical_objects_idempotent():
    one = build_gt_heatmap(GroundTruthObjects([(7, 9)], [(5, 8)]), GEOM)
    two = build_gt_heatmap(GroundTruthObjects([(7, 9), (7, 9)], [(5, 8), (5, 8)]), GEOM)
    np.testing.assert_array_equal(one, two)


def test_heatmap_pointwise_max_of_independent_kernels():
    centers, sizes = [(10, 10), (13, 10)], [(30, 60), (24, 50)]
    heat = build_gt_heatmap(GroundTruthObjects(centers, sizes), GEOM)
    for y in range(32):
        for x in range(32):
            expected = 0.0
            for (cx, cy), (w, h) in zip(centers, sizes):
                s = bisect_radius(w, h) / 3
                expected = max(expected, math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)))
            assert heat[y, x] == pytest.approx(expected, rel=1e-8, abs=1e-300)
    # the kernels overlap: between the centers both are well above zero
    k1 = render_gaussian(GEOM.output_shape, (10, 10), object_sigma(30, 60))
    k2 = render_gaussian(GEOM.output_shape, (10, 13), object_sigma(24, 50))
    assert k1[10, 12] > 0.05 and k2[10, 11] > 0.05


def test_heatmap_rounds_fractional_center():
    heat = build_gt_heatmap(GroundTruthObjects([(4.4, 5.6)], [(5, 5)]), GEOM)
    assert heat[6, 4] == 1.0


def test_heatmap_rejects_outside_center():
    with pytest.raises(ValueError):
        build_gt_heatmap(GroundTruthObjects([(40, 3)], [(2, 2)]), GEOM)


def test_gt_objects_validation():
    with pytest.raises(ValueError):
        GroundTruthObjects(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        GroundTruthObjects([(1, 1)], [(0, 3)])
    with pytest.raises(ValueError):
        GroundTruthObjects([(1, 1), (2, 2)], [(3, 3)])


def test_render_gaussian_monotone_along_rays():
    g = render_gaussian((21, 21), (10, 10), 2.0)
    assert g[10, 10] == 1.0
    for dr, dc in [(0, 1), (1, 0), (1, 1), (-1, 1)]:
        vals = [g[10 + s * dr, 10 + s * dc] for s in range(11)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_focal_loss_perfect_prediction_is_zero():
    gt = np.zeros((8, 8))
    gt[3, 4] = 1.0
    loss, grad = center_focal_loss(gt.copy(), gt, 1)
    # the clamp leaves a residue of about 1e-12 per cell
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_focal_loss_hand_value():
    gt = np.zeros((8, 8))
    gt[3, 4] = 1.0
    pred = np.zeros((8, 8))
    pred[3, 4] = 0.5
    loss, _ = center_focal_loss(pred, gt, 1)
    assert loss == pytest.approx(0.25 * math.log(2), abs=1e-9)
    assert loss == pytest.approx(0.17329, abs=1e-5)


def test_focal_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        gt = rng.uniform(0, 0.9, size=(8, 8))
        gt[rng.integers(8), rng.integers(8)] = 1.0
        pred = rng.uniform(0.05, 0.95, size=(8, 8))
        _, grad = center_focal_loss(pred, gt, 2)
        num = fd_grad(lambda p: center_focal_loss(p, gt, 2)[0], pred)
        assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-6


def test_focal_gradient_zero_in_clamped_region():
    gt = np.zeros((4, 4))
    gt[1, 1] = 1.0
    pred = np.full((4, 4), 0.3)
    pred[2, 2] = 0.0
    pred[1, 1] = 1.0
    _, grad = center_focal_loss(pred, gt, 1)
    assert grad[2, 2] == 0.0 and grad[1, 1] == 0.0
    assert grad[0, 0] != 0.0


def test_focal_loss_errors():
    with pytest.raises(ValueError):
        center_focal_loss(np.zeros((2, 2)), np.zeros((3, 3)), 1)
    with pytest.raises(ValueError):
        center_focal_loss(np.zeros((2, 2)), np.zeros((2, 2)), 0)


def test_sparse_l1_exact_and_hand_value():
    pred = np.zeros((6, 6, 2))
    pred[2, 3] = (4.0, 7.0)
    assert sparse_l1_loss(pred, [(4.0, 7.0)], [(2, 3)], 1)[0] == 0.0
    assert sparse_l1_loss(pred, [(3.0, 5.0)], [(2, 3)], 1)[0] == pytest.approx(3.0)


def test_sparse_l1_naive_loop_and_gradient():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(8, 8, 2)) * 3
    cells = [divmod(int(c), 8) for c in rng.choice(64, size=5, replace=False)]
    targets = rng.normal(size=(5, 2)) * 3
    loss, grad = sparse_l1_loss(pred, targets, cells, 5)
    naive = 0.0
    for (r, c), t in zip(cells, targets):
        for ch in range(2):
            naive += abs(pred[r, c, ch] - t[ch])
    assert loss == pytest.approx(naive / 5, rel=1e-14)
    num = fd_grad(lambda p: sparse_l1_loss(p, targets, cells, 5)[0], pred)
    assert np.linalg.norm(grad - num) / np.linalg.norm(num) < 1e-6


def test_sparse_l1_ignores_non_center_cells():
    rng = np.random.default_rng(2)
    pred = rng.normal(size=(8, 8, 2))
    cells, targets = [(1, 1), (5, 6)], rng.normal(size=(2, 2))
    base = sparse_l1_loss(pred, targets, cells, 2)[0]
    pred[0, 0] += 100.0
    pred[7, 7] -= 50.0
    assert sparse_l1_loss(pred, targets, cells, 2)[0] == base


def test_sparse_l1_duplicate_cells_rejected():
    with pytest.raises(ValueError):
        sparse_l1_loss(np.zeros((4, 4, 2)), np.zeros((2, 2)), [(1, 1), (1, 1)], 2)


def test_box_l1_equals_size_difference_with_shared_center():
    pred = np.zeros((8, 8, 2))
    pred[3, 2] = (5.0, 9.0)
    loss, grad = box_l1_loss(pred, np.array([[2.0, 3.0]]), np.array([[4.0, 6.0]]), [(3, 2)], 1)
    assert loss == pytest.approx(abs(5 - 4) + abs(9 - 6))
    np.testing.assert_array_equal(grad[3, 2], [1.0, 1.0])


def _scene(rng, k=3, n=32):
    cells = [divmod(int(c), n) for c in rng.choice(n * n, size=k, replace=False)]
    centers = np.array([(c, r) for r, c in cells], dtype=np.float64)
    sizes = rng.uniform(2, 10, size=(k, 2))
    disp = rng.normal(size=(k, 2))
    gt = GroundTruthObjects(centers, sizes, disp)
    maps = OutputMaps(rng.uniform(0.05, 0.95, size=(n, n)), rng.uniform(1, 12, size=(n, n, 2)),
                      rng.normal(size=(n, n, 2)))
    return gt, maps


def test_total_loss_component_recomposition():
    rng = np.random.default_rng(3)
    gt, maps = _scene(rng)
    w = LossWeights()
    rep = total_loss(maps, gt, GEOM, w)
    cells = gt.center_cells()
    l_c = center_focal_loss(maps.center, build_gt_heatmap(gt, GEOM), 3)[0]
    l_s = sum(np.abs(maps.size[r, c] - s).sum() for (r, c), s in zip(cells, gt.sizes)) / 3
    l_t = sum(np.abs(maps.displacement[r, c] - d).sum() for (r, c), d in zip(cells, gt.displacements)) / 3
    l_r = box_l1_loss(maps.size, gt.centers, gt.sizes, cells, 3)[0]
    assert (rep.l_c, rep.l_s, rep.l_t, rep.l_r) == pytest.approx((l_c, l_s, l_t, l_r), rel=1e-12)
    assert rep.total == pytest.approx(l_c + 0.1 * l_s + 1.0 * l_t + 0.5 * l_r, abs=1e-9)


def test_total_loss_default_weights():
    assert LossWeights() == LossWeights(0.1, 1.0, 0.5)


def test_total_loss_only_center_weight():
    rng = np.random.default_rng(4)
    gt, maps = _scene(rng)
    rep = total_loss(maps, gt, GEOM, LossWeights(0.0, 0.0, 0.0))
    assert rep.total == rep.l_c


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 5), st.integers(0, 10_000))
def test_total_loss_linear_in_size_weight(lam, seed):
    gt, maps = _scene(np.random.default_rng(seed))
    base = total_loss(maps, gt, GEOM, LossWeights(0.0, 1.0, 0.5))
    rep = total_loss(maps, gt, GEOM, LossWeights(lam, 1.0, 0.5))
    assert rep.total == pytest.approx(base.total + lam * base.l_s, rel=1e-12, abs=1e-12)


def test_total_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    geom = GridGeometry(32, 32)
    gt, _ = _scene(rng, k=2, n=8)
    maps = OutputMaps(rng.uniform(0.05, 0.95, size=(8, 8)), rng.uniform(1, 12, size=(8, 8, 2)),
                      rng.normal(size=(8, 8, 2)))
    rep = total_loss(maps, gt, geom)

    def total_with(center=maps.center, size=maps.size, disp=maps.displacement):
        return total_loss(OutputMaps(center, size, disp), gt, geom).total

    for grad, num in [
        (rep.grad_c, fd_grad(lambda c: total_with(center=c), maps.center)),
        (rep.grad_s, fd_grad(lambda s: total_with(size=s), maps.size)),
        (rep.grad_t, fd_grad(lambda d: total_with(disp=d), maps.displacement)),
    ]:
        assert np.linalg.norm(grad - num) <= 1e-6 * np.linalg.norm(num)


def test_total_loss_without_displacements():
    gt = GroundTruthObjects([(4, 4)], [(3, 3)])
    maps = OutputMaps(np.full((32, 32), 0.5), np.ones((32, 32, 2)), np.ones((32, 32, 2)))
    rep = total_loss(maps, gt, GEOM)
    assert rep.l_t == 0.0 and not rep.grad_t.any()
    with pytest.raises(ValueError):
        total_loss(maps, gt, GridGeometry(64, 64))
