"""CLEAR MOT metrics, identity F1 and trajectory coverage counts.

Boxes throughout are ``(cx, cy, w, h)`` in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assignment import hungarian_match

MT_RATIO = 0.8
ML_RATIO = 0.2
DEFAULT_IOU = 0.5


def _check_box(box: Sequence[float]) -> None:
    if len(box) != 4:
        raise ValueError(f"box must be (cx, cy, w, h), got {box!r}")
    if box[2] <= 0 or box[3] <= 0:
        raise ValueError(f"box size must be positive, got {box!r}")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    _check_box(box_a)
    _check_box(box_b)
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` center-size boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0):
        raise ValueError("box sizes must be positive")
    a_lo, a_hi = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b_lo, b_hi = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)


@dataclass
class FrameAnnotations:
    """Identified boxes of one frame: ``ids[i]`` labels ``boxes[i]``."""

    frame: int
    ids: list[int] = field(default_factory=list)
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self) -> None:
        self.ids = [int(i) for i in self.ids]
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.ids) != len(self.boxes):
            raise ValueError("ids and boxes differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate ids in frame {self.frame}")

    @classmethod
    def from_entries(cls, frame: int, entries: Iterable[tuple[int, Sequence[float], Sequence[float]]]):
        """Build from ``(id, (cx, cy), (w, h))`` tuples."""
        ids, boxes = [], []
        for obj_id, center, size in entries:
            ids.append(obj_id)
            boxes.append((*center, *size))
        return cls(frame, ids, np.array(boxes, dtype=np.float64).reshape(-1, 4))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class FrameStats:
    frame: int
    num_gt: int
    num_hyp: int
    matches: int
    fp: int
    fn: int
    ids: int


@dataclass
class MOTMetrics:
    mota: float
    motp: float
    idf1: float
    idp: float
    idr: float
    mt: int
    pt: int
    ml: int
    num_gt_tracks: int
    fp: int
    fn: int
    ids: int
    num_gt: int
    num_hyp: int
    num_matches: int
    idtp: int
    frames: list[FrameStats] = field(default_factory=list, repr=False)

    @property
    def mt_ratio(self) -> float:
        return self.mt / self.num_gt_tracks

    @property
    def ml_ratio(self) -> float:
        return self.ml / self.num_gt_tracks

    def summary(self) -> dict[str, float]:
        return {
            "MOTA": self.mota, "MOTP": self.motp, "IDF1": self.idf1,
            "IDP": self.idp, "IDR": self.idr,
            "MT": self.mt, "PT": self.pt, "ML": self.ml,
            "FP": self.fp, "FN": self.fn, "IDS": self.ids,
            "GT": self.num_gt, "HYP": self.num_hyp, "MATCHES": self.num_matches,
        }


def _by_frame(seq: Iterable[FrameAnnotations]) -> dict[int, FrameAnnotations]:
    out: dict[int, FrameAnnotations] = {}
    for fa in seq:
        if fa.frame in out:
            raise ValueError(f"frame {fa.frame} listed twice")
        out[fa.frame] = fa
    return out


def evaluate(gt: Iterable[FrameAnnotations], hyp: Iterable[FrameAnnotations],
             iou_thresh: float = DEFAULT_IOU) -> MOTMetrics:
    """Score ``hyp`` against ``gt``; frames are aligned by their index.

    Each frame first keeps the last known gt->hyp correspondence of every
    ground-truth id if that pair is still present with IoU >= ``iou_thresh``,
    then matches the rest by Hungarian assignment on ``1 - IoU``. An identity
    switch is counted when a ground-truth id is matched to a different
    hypothesis id than at its previous match.
    """
    gt_frames = _by_frame(gt)
    hyp_frames = _by_frame(hyp)
    num_gt = sum(len(f) for f in gt_frames.values())
    if num_gt == 0:
        raise ValueError("ground truth is empty; MOTA is undefined")

    last_match: dict[int, int] = {}
    tracked: dict[int, int] = {}
    present: dict[int, int] = {}
    pair_tp: dict[tuple[int, int], int] = {}
    hyp_counts: dict[int, int] = {}
    fp = fn = switches = matches = 0
    iou_sum = 0.0
    frames: list[FrameStats] = []

    for t in sorted(set(gt_frames) | set(hyp_frames)):
        g = gt_frames.get(t, FrameAnnotations(t))
        h = hyp_frames.get(t, FrameAnnotations(t))
        ious = iou_matrix(g.boxes, h.boxes) if len(g) and len(h) else np.zeros((len(g), len(h)))
        valid = ious >= iou_thresh
        for gid in g.ids:
            present[gid] = present.get(gid, 0) + 1
        for hid in h.ids:
            hyp_counts[hid] = hyp_counts.get(hid, 0) + 1
        for gi, gid in enumerate(g.ids):
            for hi, hid in enumerate(h.ids):
                if valid[gi, hi]:
                    pair_tp[gid, hid] = pair_tp.get((gid, hid), 0) + 1

        frame_pairs: list[tuple[int, int]] = []
        hyp_index = {hid: i for i, hid in enumerate(h.ids)}
        used_g, used_h = set(), set()
        for gi, gid in enumerate(g.ids):
            hid = last_match.get(gid)
            hi = hyp_index.get(hid) if hid is not None else None
            if hi is not None and hi not in used_h and valid[gi, hi]:
                frame_pairs.append((gi, hi))
                used_g.add(gi)
                used_h.add(hi)

        rest_g = [i for i in range(len(g)) if i not in used_g]
        rest_h = [j for j in range(len(h)) if j not in used_h]
        if rest_g and rest_h:
            sub = 1.0 - ious[np.ix_(rest_g, rest_h)]
            sub[~valid[np.ix_(rest_g, rest_h)]] = np.inf
            for r, c in hungarian_match(sub).pairs:
                frame_pairs.append((rest_g[r], rest_h[c]))

        frame_ids = 0
        for gi, hi in frame_pairs:
            gid, hid = g.ids[gi], h.ids[hi]
            if gid in last_match and last_match[gid] != hid:
                frame_ids += 1
            last_match[gid] = hid
            tracked[gid] = tracked.get(gid, 0) + 1
            iou_sum += ious[gi, hi]

        m = len(frame_pairs)
        frames.append(FrameStats(t, len(g), len(h), m, len(h) - m, len(g) - m, frame_ids))
        matches += m
        fp += len(h) - m
        fn += len(g) - m
        switches += frame_ids

    mt = pt = ml = 0
    for gid, life in present.items():
        cover = tracked.get(gid, 0) / life
        if cover > MT_RATIO:
            mt += 1
        elif cover < ML_RATIO:
            ml += 1
        else:
            pt += 1

    idtp = _identity_true_positives(pair_tp, list(present), list(hyp_counts))
    num_hyp = sum(hyp_counts.values())
    return MOTMetrics(
        mota=1.0 - (fp + fn + switches) / num_gt,
        motp=float(iou_sum / matches) if matches else 0.0,
        idf1=2.0 * idtp / (num_gt + num_hyp),
        idp=idtp / num_hyp if num_hyp else 0.0,
        idr=idtp / num_gt,
        mt=mt, pt=pt, ml=ml, num_gt_tracks=len(present),
        fp=fp, fn=fn, ids=switches,
        num_gt=num_gt, num_hyp=num_hyp, num_matches=matches, idtp=idtp,
        frames=frames,
    )


def _identity_true_positives(pair_tp: dict[tuple[int, int], int],
                             gt_ids: list[int], hyp_ids: list[int]) -> int:
    """Best one-to-one gt/hyp identity mapping by co-detected frame count."""
    if not gt_ids or not hyp_ids or not pair_tp:
        return 0
    gi = {g: i for i, g in enumerate(gt_ids)}
    hi = {h: j for j, h in enumerate(hyp_ids)}
    score = np.zeros((len(gt_ids), len(hyp_ids)))
    for (g, h), n in pair_tp.items():
        score[gi[g], hi[h]] = n
    rows, cols = linear_sum_assignment(score, maximize=True)
    return int(score[rows, cols].sum())
