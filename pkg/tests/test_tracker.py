import numpy as np
import pytest

from heatmot.assignment import hungarian_match
from heatmot.grid import GridGeometry, OutputMaps
from heatmot.metrics import FrameAnnotations, evaluate
from heatmot.synth import SyntheticScenario, generate_oracle_sequence, public_detections
from heatmot.tracker import (
    Detection,
    Track,
    TrackerConfig,
    Tracker,
    TrackState,
    clip_box,
    cosine_similarity,
    decode_detections,
    gate_births_public,
    gate_births_public_pairs,
    propagate_tracks,
    reid_recover,
)

from oracles import box_iou, brute_force_assignment, direct_bilinear

GEOM = GridGeometry(128, 192)  # 32 x 48 output grid


def blank_maps(geom=GEOM):
    h, w = geom.output_shape
    return OutputMaps(np.zeros((h, w)), np.zeros((h, w, 2)), np.zeros((h, w, 2)))


def run_tracker(frames, cfg=None, public=None):
    h, w = frames[0].maps.shape
    tracker = Tracker(GridGeometry(h * 4, w * 4), cfg)
    hyp = []
    for fr in frames:
        boxes = public.get(fr.frame, []) if public is not None else None
        res = tracker.step(fr.frame, fr.maps, fr.features, boxes)
        hyp.append(FrameAnnotations(fr.frame, [o.track_id for o in res.outputs],
                                    [o.box for o in res.outputs]))
    return tracker, hyp


def test_decode_single_peak():
    maps = blank_maps()
    maps.center[10, 12] = 0.9
    maps.size[10, 12] = (40, 80)
    dets = decode_detections(maps, 0.3)
    assert len(dets) == 1
    assert dets[0].center == (48.0, 40.0)
    assert dets[0].size == (40.0, 80.0)
    assert dets[0].score == pytest.approx(0.9)


def test_decode_below_threshold():
    maps = blank_maps()
    maps.center[5, 5] = 0.2
    maps.size[5, 5] = (4, 4)
    assert decode_detections(maps, 0.3) == []


def test_decode_adjacent_peaks_keep_larger():
    maps = blank_maps()
    maps.center[10, 12], maps.center[10, 13] = 0.9, 0.8
    maps.size[10, 12] = maps.size[10, 13] = (8, 8)
    dets = decode_detections(maps, 0.3)
    assert [d.center for d in dets] == [(48.0, 40.0)]


def test_decode_matches_brute_force_local_max():
    rng = np.random.default_rng(0)
    maps = blank_maps()
    maps.center[:] = rng.random(maps.center.shape)
    maps.size[:] = rng.uniform(1, 30, size=maps.size.shape)
    h, w = maps.shape
    expected = set()
    for i in range(h):
        for j in range(w):
            window = maps.center[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            if maps.center[i, j] >= 0.3 and maps.center[i, j] == window.max():
                expected.add((4.0 * j, 4.0 * i))
    dets = decode_detections(maps, 0.3)
    assert {d.center for d in dets} == expected
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)


def test_clip_box():
    assert clip_box((5, 5), (20, 10), 100, 100) == ((7.5, 5.0), (15.0, 10.0))
    assert clip_box((50, 50), (10, 10), 100, 100) == ((50, 50), (10, 10))


def test_propagate_zero_and_uniform():
    tracks = [Track(1, (40.0, 60.0), (10.0, 20.0)), Track(2, (100.0, 30.0), (8.0, 8.0))]
    maps = blank_maps()
    assert [p.center for p in propagate_tracks(tracks, maps.displacement, GEOM)] == \
        [(40.0, 60.0), (100.0, 30.0)]
    maps.displacement[..., 0] = 2.0  # cells, i.e. 8 pixels
    moved = propagate_tracks(tracks, maps.displacement, GEOM)
    assert [p.center for p in moved] == [(48.0, 60.0), (108.0, 30.0)]


def test_propagate_smooth_field_matches_bilinear_read():
    rng = np.random.default_rng(1)
    h, w = GEOM.output_shape
    yy, xx = np.mgrid[0:h, 0:w]
    field = np.stack([np.sin(xx / 7.0) + 0.1 * yy / h, np.cos(yy / 5.0)], axis=-1)
    tracks = [Track(i, tuple(rng.uniform(30, 90, size=2)), (10.0, 12.0)) for i in range(6)]
    for tr, pos in zip(tracks, propagate_tracks(tracks, field, GEOM)):
        dx, dy = direct_bilinear(field, tr.center[0] / 4, tr.center[1] / 4)
        assert pos.center == pytest.approx((tr.center[0] + 4 * dx, tr.center[1] + 4 * dy), abs=1e-12)
        assert pos.size == tr.size


def test_hungarian_small_cases():
    res = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert set(res.pairs) == {(0, 0), (1, 1)} and res.total_cost == 2.0
    assert hungarian_match(np.array([[3.5]])).pairs == [(0, 0)]
    res = hungarian_match(np.array([[np.inf, 1.0], [np.inf, 0.5]]))
    assert len(res.pairs) == 1 and res.unmatched_cols == [0]
    empty = hungarian_match(np.full((2, 3), np.inf))
    assert empty.pairs == [] and empty.unmatched_rows == [0, 1]
    with pytest.raises(ValueError):
        hungarian_match(np.zeros(3))


def test_hungarian_prefers_more_pairs_over_lower_cost():
    # one pair of cost 0 vs two pairs of cost 10 each: cardinality wins
    cost = np.array([[0.0, 10.0], [10.0, np.inf]])
    res = hungarian_match(cost)
    assert len(res.pairs) == 2 and res.total_cost == 20.0


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        cost = rng.uniform(-1, 5, size=(n, m))
        cost[rng.random((n, m)) < 0.25] = np.inf
        res = hungarian_match(cost)
        card, total = brute_force_assignment(cost)
        assert len(res.pairs) == card
        assert res.total_cost == pytest.approx(total, abs=1e-9)
        assert len({r for r, _ in res.pairs}) == len({c for _, c in res.pairs}) == card


def test_public_gating_basic():
    cand = [Detection((50.0, 50.0), (10.0, 20.0), 0.9)]
    assert gate_births_public(cand, []) == []
    assert gate_births_public(cand, [(50.0, 50.0, 10.0, 20.0)]) == cand
    assert gate_births_public(cand, [(150.0, 150.0, 10.0, 20.0)]) == []


def test_public_gating_exhaustive_greedy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cand = [Detection(tuple(rng.uniform(20, 80, size=2)), tuple(rng.uniform(10, 30, size=2)),
                          float(rng.random())) for _ in range(5)]
        public = [tuple(rng.uniform(20, 80, size=2)) + tuple(rng.uniform(10, 30, size=2)) for _ in range(2)]
        pairs = gate_births_public_pairs(cand, public)
        assert len(pairs) <= 2
        free_c, free_p = set(range(5)), set(range(2))
        for c, p, v in pairs:
            # each selection is the best remaining pair over all free combinations
            best = max(box_iou(cand[i].box, public[j]) for i in free_c for j in free_p)
            assert v == pytest.approx(best, abs=1e-12) and v > 0
            free_c.discard(c)
            free_p.discard(p)
        # nothing with positive overlap is left unpaired
        assert all(box_iou(cand[i].box, public[j]) == 0 for i in free_c for j in free_p)


def test_cosine_and_reid_trivial():
    f = np.array([1.0, 2.0, 3.0])
    assert cosine_similarity(f, f) == pytest.approx(1.0)
    assert cosine_similarity(f, np.zeros(3)) == 0.0
    tr = Track(7, (10.0, 10.0), (5.0, 5.0), feature=f, state=TrackState.SLEEPING, age=3)
    det = Detection((90.0, 90.0), (5.0, 5.0), 0.8, feature=2 * f)
    assert reid_recover([tr], [det], 0.3) == [(tr, det)]
    ortho = Detection((90.0, 90.0), (5.0, 5.0), 0.8, feature=np.array([2.0, -1.0, 0.0]))
    assert reid_recover([tr], [ortho], 0.3) == []


def test_reid_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(100):
        feats = rng.normal(size=(6, 5))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        tracks = [Track(i, (0.0, 0.0), (1.0, 1.0), feature=feats[i]) for i in range(3)]
        dets = [Detection((0.0, 0.0), (1.0, 1.0), 0.5, feature=feats[3 + j]) for j in range(3)]
        sims = feats[:3] @ feats[3:].T
        cost = np.where(sims >= 0.3, 1 - sims, np.inf)
        card, total = brute_force_assignment(cost)
        got = reid_recover(tracks, dets, 0.3)
        assert len(got) == card
        got_cost = sum(1 - cosine_similarity(t.feature, d.feature) for t, d in got)
        assert got_cost == pytest.approx(total, abs=1e-12)


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(tau=1.5)
    with pytest.raises(ValueError):
        TrackerConfig(sleep_max=0)


def test_tracker_rejects_out_of_order_frames():
    tracker = Tracker(GEOM)
    tracker.step(2, blank_maps())
    with pytest.raises(ValueError):
        tracker.step(2, blank_maps())
    with pytest.raises(ValueError):
        tracker.step(3, blank_maps(GridGeometry(64, 64)))


def test_noise_free_sequence_perfect():
    frames = generate_oracle_sequence(SyntheticScenario(seed=1, num_objects=8, num_frames=30))
    tracker, hyp = run_tracker(frames)
    m = evaluate([f.gt for f in frames], hyp)
    assert (m.mota, m.idf1, m.ids, m.fp, m.fn) == (1.0, 1.0, 0, 0, 0)
    assert tracker.next_id == 9


def _single_object_ids(gap_len):
    start = 6
    sc = SyntheticScenario(seed=5, num_objects=1, num_frames=start + gap_len + 5,
                           occlusions={0: [(start, start + gap_len - 1)]})
    frames = generate_oracle_sequence(sc)
    _, hyp = run_tracker(frames)
    return {i for h in hyp for i in h.ids}, hyp


def test_sleep_boundary_sixty_frames_recovered():
    ids, _ = _single_object_ids(60)
    assert ids == {1}


def test_sleep_boundary_sixty_one_frames_new_id():
    ids, hyp = _single_object_ids(61)
    assert ids == {1, 2}
    assert hyp[-1].ids == [2]


def test_short_occlusion_recovered_among_others():
    sc = SyntheticScenario(seed=2, num_objects=6, num_frames=40, occlusions={3: [(10, 19)]})
    frames = generate_oracle_sequence(sc)
    _, hyp = run_tracker(frames)
    m = evaluate([f.gt for f in frames], hyp)
    assert m.ids == 0 and m.fp == 0 and m.fn == 10
    assert {i for h in hyp for i in h.ids} == set(range(1, 7))


def test_tracker_deterministic():
    frames = generate_oracle_sequence(SyntheticScenario(seed=3, num_objects=5, num_frames=20,
                                                        heatmap_noise=0.05, dropout_prob=0.1))
    runs = [run_tracker(frames)[1] for _ in range(2)]
    for a, b in zip(*runs):
        assert a.ids == b.ids
        np.testing.assert_array_equal(a.boxes, b.boxes)


def test_public_mode_births_bounded():
    frames = generate_oracle_sequence(SyntheticScenario(seed=4, num_objects=6, num_frames=15))
    public = public_detections(frames, seed=4, jitter=2.0, drop_prob=0.3)
    tracker = Tracker(GridGeometry(320, 576), TrackerConfig(public_mode=True))
    for fr in frames:
        res = tracker.step(fr.frame, fr.maps, fr.features, public[fr.frame])
        assert len(res.births) <= len(public[fr.frame])
        born = [o for o in res.outputs if o.track_id in res.births]
        for o in born:
            assert max(box_iou(o.box, p) for p in public[fr.frame]) > 0


def test_public_mode_without_boxes_no_births():
    frames = generate_oracle_sequence(SyntheticScenario(seed=4, num_objects=3, num_frames=5))
    tracker = Tracker(GridGeometry(320, 576), TrackerConfig(public_mode=True))
    for fr in frames:
        assert tracker.step(fr.frame, fr.maps, fr.features, None).births == []
