"""Online tracking from center/size/displacement maps.

Per frame: decode peaks into detections, move every active track by the
displacement map, match tracks to detections by IoU, revive sleeping tracks
by feature similarity, give birth to what is left and put unmatched tracks
to sleep.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assignment import Assignment, hungarian_match
from .grid import DOWN_RATIO, FeaturePyramid, GridGeometry, OutputMaps, bilinear_sample, max_pool_3x3
from .metrics import iou_matrix
from .qln import feature_sample_tracks

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.3
DEFAULT_TAU_CROWDED = 0.4
DEFAULT_SLEEP_MAX = 60
DEFAULT_MATCH_MIN_IOU = 0.3
DEFAULT_REID_MIN_SIM = 0.3


@dataclass
class Detection:
    """A decoded object candidate, in input pixels."""

    center: tuple[float, float]
    size: tuple[float, float]
    score: float
    feature: np.ndarray | None = None

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (*self.center, *self.size)


@dataclass
class TrackedPosition:
    track_id: int
    center: tuple[float, float]
    size: tuple[float, float]

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (*self.center, *self.size)


class TrackState(enum.Enum):
    ACTIVE = "active"
    SLEEPING = "sleeping"


@dataclass
class Track:
    id: int
    center: tuple[float, float]
    size: tuple[float, float]
    feature: np.ndarray | None = None
    state: TrackState = TrackState.ACTIVE
    age: int = 0
    score: float = 0.0
    history: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (*self.center, *self.size)

    def snap_to(self, det: Detection, frame: int, blend: float = 0.0) -> None:
        self.center = tuple(det.center)
        self.size = tuple(det.size)
        self.score = det.score
        if det.feature is not None:
            if self.feature is None or blend <= 0.0:
                self.feature = np.array(det.feature, dtype=np.float64)
            else:
                self.feature = blend * self.feature + (1.0 - blend) * det.feature
        self.state = TrackState.ACTIVE
        self.age = 0
        self.history.append((frame, self.box))


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker thresholds.

    Attributes:
        tau: minimum heatmap peak value for a detection.
        sleep_max: frames a lost track may sleep before it is dropped.
        match_min_iou: propagated-track/detection pairs below this IoU are
            never matched.
        reid_min_sim: minimum cosine similarity to revive a sleeping track.
        public_mode: gate births by public detections.
        feature_blend: weight of the old feature on update (0 replaces it).
    """

    tau: float = DEFAULT_TAU
    sleep_max: int = DEFAULT_SLEEP_MAX
    match_min_iou: float = DEFAULT_MATCH_MIN_IOU
    reid_min_sim: float = DEFAULT_REID_MIN_SIM
    public_mode: bool = False
    feature_blend: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.sleep_max < 1:
            raise ValueError("sleep_max must be >= 1")
        if not 0.0 <= self.feature_blend < 1.0:
            raise ValueError("feature_blend must be in [0, 1)")


def decode_detections(maps: OutputMaps, tau: float, down_ratio: int = DOWN_RATIO) -> list[Detection]:
    """Heatmap peaks (equal to their 3x3 max) scoring at least ``tau``.

    Centers are cell coordinates times ``down_ratio``; sizes are read as is
    from the size map. Sorted by descending score, then row, then column.
    """
    heat = maps.center
    peaks = (heat == max_pool_3x3(heat)) & (heat >= tau)
    rows, cols = np.nonzero(peaks)
    scores = heat[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    dets = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        w, h = maps.size[r, c]
        if w <= 0 or h <= 0:
            logger.debug("dropping peak at (%d, %d) with non-positive size", r, c)
            continue
        dets.append(Detection((float(c * down_ratio), float(r * down_ratio)),
                              (float(w), float(h)), float(scores[i])))
    return dets


def clip_box(center: Sequence[float], size: Sequence[float],
             width: float, height: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Clip a center-size box to the image; degenerate results keep their size."""
    cx, cy = center
    w, h = size
    if 0.0 <= cx - w / 2 and cx + w / 2 <= width and 0.0 <= cy - h / 2 and cy + h / 2 <= height:
        return (cx, cy), (w, h)
    x1, x2 = max(0.0, cx - w / 2), min(width, cx + w / 2)
    y1, y2 = max(0.0, cy - h / 2), min(height, cy + h / 2)
    if x2 <= x1 or y2 <= y1:
        return (min(max(cx, 0.0), width), min(max(cy, 0.0), height)), (w, h)
    return ((x1 + x2) / 2, (y1 + y2) / 2), (x2 - x1, y2 - y1)


def propagate_tracks(tracks: Sequence[Track], t_map: np.ndarray,
                     geom: GridGeometry) -> list[TrackedPosition]:
    """Move each track by the displacement read at its previous center."""
    out = []
    r = geom.down_ratio
    for tr in tracks:
        cx, cy = tr.center
        dx, dy = bilinear_sample(t_map, cx / r, cy / r)
        center, size = clip_box((cx + dx * r, cy + dy * r), tr.size,
                                geom.input_width, geom.input_height)
        out.append(TrackedPosition(tr.id, center, size))
    return out


def match_tracks(positions: Sequence[TrackedPosition], dets: Sequence[Detection],
                 min_iou: float) -> Assignment:
    """Hungarian matching on ``1 - IoU``; pairs below ``min_iou`` are infeasible."""
    if not positions or not dets:
        return Assignment([], list(range(len(positions))), list(range(len(dets))))
    ious = iou_matrix([p.box for p in positions], [d.box for d in dets])
    cost = 1.0 - ious
    cost[ious < min_iou] = np.inf
    return hungarian_match(cost)


def gate_births_public_pairs(candidates: Sequence[Detection],
                             public_boxes: Sequence[Sequence[float]]) -> list[tuple[int, int, float]]:
    """Greedy one-to-one pairing by descending IoU, keeping IoU > 0.

    Ties go to the higher-scoring candidate, then the lower candidate index.
    Returns ``(candidate_index, public_index, iou)`` in selection order.
    """
    if not candidates or not len(public_boxes):
        return []
    ious = iou_matrix([c.box for c in candidates], np.asarray(public_boxes, dtype=np.float64))
    ci, pj = np.nonzero(ious > 0)
    keys = sorted(zip(ci.tolist(), pj.tolist()),
                  key=lambda cp: (-ious[cp], -candidates[cp[0]].score, cp[0], cp[1]))
    used_c, used_p, out = set(), set(), []
    for c, p in keys:
        if c in used_c or p in used_p:
            continue
        used_c.add(c)
        used_p.add(p)
        out.append((c, p, float(ious[c, p])))
    return out


def gate_births_public(candidates: Sequence[Detection],
                       public_boxes: Sequence[Sequence[float]]) -> list[Detection]:
    return [candidates[c] for c, _, _ in gate_births_public_pairs(candidates, public_boxes)]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def reid_recover(sleeping: Sequence[Track], dets: Sequence[Detection],
                 min_sim: float) -> list[tuple[Track, Detection]]:
    """Match sleeping tracks to detections on ``1 - cosine`` similarity.

    Pairs missing a feature or below ``min_sim`` are never matched.
    """
    if not sleeping or not dets:
        return []
    cost = np.full((len(sleeping), len(dets)), np.inf)
    for i, tr in enumerate(sleeping):
        if tr.feature is None:
            continue
        for j, det in enumerate(dets):
            if det.feature is None:
                continue
            sim = cosine_similarity(tr.feature, det.feature)
            if sim >= min_sim:
                cost[i, j] = 1.0 - sim
    return [(sleeping[i], dets[j]) for i, j in hungarian_match(cost).pairs]


@dataclass
class TrackOutput:
    frame: int
    track_id: int
    box: tuple[float, float, float, float]
    score: float


@dataclass
class FrameResult:
    frame: int
    outputs: list[TrackOutput]
    detections: list[Detection]
    births: list[int]
    recovered: list[int]


class Tracker:
    """Single-sequence tracker state; call :meth:`step` once per frame, in order."""

    def __init__(self, geom: GridGeometry, cfg: TrackerConfig | None = None) -> None:
        self.geom = geom
        self.cfg = cfg or TrackerConfig()
        self.tracks: list[Track] = []
        self.next_id = 1
        self.last_frame: int | None = None

    @property
    def active(self) -> list[Track]:
        return [t for t in self.tracks if t.state is TrackState.ACTIVE]

    @property
    def sleeping(self) -> list[Track]:
        return [t for t in self.tracks if t.state is TrackState.SLEEPING]

    def _attach_features(self, dets: list[Detection],
                         features: np.ndarray | FeaturePyramid | None) -> None:
        if features is None or not dets:
            return
        if isinstance(features, FeaturePyramid):
            sampled = feature_sample_tracks(features, [d.center for d in dets])
        else:
            r = self.geom.down_ratio
            sampled = [bilinear_sample(features, d.center[0] / r, d.center[1] / r) for d in dets]
        for det, feat in zip(dets, sampled):
            det.feature = np.asarray(feat, dtype=np.float64)

    def step(self, frame: int, maps: OutputMaps,
             features: np.ndarray | FeaturePyramid | None = None,
             public_boxes: Sequence[Sequence[float]] | None = None) -> FrameResult:
        if self.last_frame is not None and frame <= self.last_frame:
            raise ValueError(f"frame {frame} is not after frame {self.last_frame}")
        if maps.shape != self.geom.output_shape:
            raise ValueError(f"maps have shape {maps.shape}, expected {self.geom.output_shape}")
        self.last_frame = frame
        cfg = self.cfg

        dets = decode_detections(maps, cfg.tau, self.geom.down_ratio)
        self._attach_features(dets, features)

        active = self.active
        previously_sleeping = self.sleeping
        positions = propagate_tracks(active, maps.displacement, self.geom)
        assignment = match_tracks(positions, dets, cfg.match_min_iou)
        for ti, di in assignment.pairs:
            active[ti].snap_to(dets[di], frame, cfg.feature_blend)

        leftover = [dets[j] for j in assignment.unmatched_cols]
        recovered = []
        for tr, det in reid_recover(previously_sleeping, leftover, cfg.reid_min_sim):
            tr.snap_to(det, frame, cfg.feature_blend)
            recovered.append(tr.id)
            leftover = [d for d in leftover if d is not det]

        if cfg.public_mode:
            leftover = gate_births_public(leftover, public_boxes if public_boxes is not None else [])
        births = []
        for det in leftover:
            tr = Track(self.next_id, tuple(det.center), tuple(det.size))
            self.next_id += 1
            tr.snap_to(det, frame)
            self.tracks.append(tr)
            births.append(tr.id)

        for ti in assignment.unmatched_rows:
            active[ti].state = TrackState.SLEEPING
            active[ti].age = 1
        for tr in previously_sleeping:
            if tr.state is TrackState.SLEEPING:
                tr.age += 1
        self.tracks = [t for t in self.tracks
                       if t.state is TrackState.ACTIVE or t.age <= cfg.sleep_max]

        outputs = [TrackOutput(frame, tr.id, tr.box, tr.score) for tr in self.active]
        logger.debug("frame %d: %d dets, %d matched, %d recovered, %d births, %d sleeping",
                     frame, len(dets), len(assignment.pairs), len(recovered), len(births),
                     len(self.sleeping))
        return FrameResult(frame, outputs, dets, births, recovered)
