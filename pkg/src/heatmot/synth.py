"""Synthetic sequences that stand in for a trained network.

Objects move with constant velocity plus seeded jitter and bounce off the
image borders. Their centers are observed on the 1/4 output grid, so the
ground-truth boxes are exactly what a perfect decoder would read back from
the rendered maps when no corruption is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridGeometry, OutputMaps
from .metrics import FrameAnnotations
from .supervision import GroundTruthObjects, build_gt_heatmap


@dataclass
class SyntheticScenario:
    """Everything needed to reproduce a sequence.

    Attributes:
        occlusions: object index (0-based) -> list of inclusive 1-based frame
            ranges during which the object is absent from the maps.
        min_separation: minimum Chebyshev distance, in output cells, between
            any two object centers in any frame.
    """

    seed: int = 0
    num_objects: int = 12
    num_frames: int = 50
    image_height: int = 320
    image_width: int = 576
    speed_range: tuple[float, float] = (1.0, 6.0)
    width_range: tuple[int, int] = (20, 44)
    aspect_range: tuple[float, float] = (1.5, 2.5)
    jitter: float = 0.5
    occlusions: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    heatmap_noise: float = 0.0
    dropout_prob: float = 0.0
    displacement_noise: float = 0.0
    feature_dim: int = 16
    min_separation: int = 3
    max_attempts: int = 2000

    def __post_init__(self) -> None:
        if self.num_objects < 1 or self.num_frames < 1:
            raise ValueError("scenario needs at least one object and one frame")
        GridGeometry(self.image_height, self.image_width)
        for k, windows in self.occlusions.items():
            if not 0 <= k < self.num_objects:
                raise ValueError(f"occlusion for unknown object {k}")
            for f1, f2 in windows:
                if f1 > f2:
                    raise ValueError(f"bad occlusion window {(f1, f2)}")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.image_height, self.image_width)

    def occluded(self, k: int, frame: int) -> bool:
        return any(f1 <= frame <= f2 for f1, f2 in self.occlusions.get(k, ()))


@dataclass
class OracleFrame:
    frame: int
    maps: OutputMaps
    features: np.ndarray
    gt: FrameAnnotations
    visible: list[int]


def _trajectory(rng: np.random.Generator, sc: SyntheticScenario, w: int, h: int) -> np.ndarray:
    """Quantized cell ``(col, row)`` per frame for one object."""
    lo = np.array([w / 2 + 4, h / 2 + 4])
    hi = np.array([sc.image_width - w / 2 - 4, sc.image_height - h / 2 - 4])
    if np.any(hi <= lo):
        raise ValueError("object does not fit in the image")
    pos = rng.uniform(lo, hi)
    speed = rng.uniform(*sc.speed_range)
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    cells = np.empty((sc.num_frames, 2), dtype=int)
    for t in range(sc.num_frames):
        if t:
            pos = pos + vel + sc.jitter * rng.normal(size=2)
            for axis in range(2):
                if pos[axis] < lo[axis]:
                    pos[axis] = 2 * lo[axis] - pos[axis]
                    vel[axis] = -vel[axis]
                elif pos[axis] > hi[axis]:
                    pos[axis] = 2 * hi[axis] - pos[axis]
                    vel[axis] = -vel[axis]
                pos[axis] = min(max(pos[axis], lo[axis]), hi[axis])
        cell = np.floor(pos / 4 + 0.5).astype(int)
        # keep the quantized box inside the image
        cell = np.clip(cell, np.ceil(lo / 4).astype(int), np.floor(hi / 4).astype(int))
        cells[t] = cell
    return cells


def _objects(rng: np.random.Generator, sc: SyntheticScenario):
    sizes, paths = [], []
    for k in range(sc.num_objects):
        for _ in range(sc.max_attempts):
            w = int(rng.integers(sc.width_range[0], sc.width_range[1] + 1))
            h = int(round(w * rng.uniform(*sc.aspect_range)))
            path = _trajectory(rng, sc, w, h)
            if all(np.abs(path - other).max(axis=1).min() >= sc.min_separation for other in paths):
                sizes.append((w, h))
                paths.append(path)
                break
        else:
            raise ValueError(f"could not place object {k} with separation {sc.min_separation}")
    return np.array(sizes, dtype=np.float64), np.stack(paths)


def generate_oracle_sequence(sc: SyntheticScenario) -> list[OracleFrame]:
    """Render per-frame maps, identity features and ground truth for ``sc``."""
    rng = np.random.default_rng(sc.seed)
    geom = sc.geometry
    gh, gw = geom.output_shape
    sizes, paths = _objects(rng, sc)
    feats = rng.normal(size=(sc.num_objects, sc.feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    # drawn up front so the corruption stream does not depend on visibility
    dropped = rng.random((sc.num_frames, sc.num_objects)) < sc.dropout_prob
    heat_noise = rng.normal(scale=sc.heatmap_noise, size=(sc.num_frames, gh, gw)) if sc.heatmap_noise else None
    disp_noise = rng.normal(scale=sc.displacement_noise, size=(sc.num_frames, sc.num_objects, 2)) \
        if sc.displacement_noise else None

    frames = []
    for t in range(sc.num_frames):
        frame = t + 1
        visible = [k for k in range(sc.num_objects)
                   if not sc.occluded(k, frame) and not dropped[t, k]]
        heat = np.zeros((gh, gw))
        if visible:
            objs = GroundTruthObjects(paths[visible, t], sizes[visible] / geom.down_ratio)
            heat = build_gt_heatmap(objs, geom)
        if heat_noise is not None:
            heat = np.clip(heat + heat_noise[t], 0.0, 1.0)

        size_map = np.zeros((gh, gw, 2))
        feat_map = np.zeros((gh, gw, sc.feature_dim))
        for k in visible:
            col, row = paths[k, t]
            size_map[row, col] = sizes[k]
            feat_map[row, col] = feats[k]

        disp = np.zeros((gh, gw, 2))
        if t:
            for k in range(sc.num_objects):
                col, row = paths[k, t - 1]
                disp[row, col] = paths[k, t] - paths[k, t - 1]
                if disp_noise is not None:
                    disp[row, col] += disp_noise[t, k]

        gt = FrameAnnotations(
            frame,
            [k + 1 for k in range(sc.num_objects)],
            [(*(paths[k, t] * geom.down_ratio), *sizes[k]) for k in range(sc.num_objects)],
        )
        frames.append(OracleFrame(frame, OutputMaps(heat, size_map, disp), feat_map, gt,
                                  [k + 1 for k in visible]))
    return frames


def public_detections(frames: list[OracleFrame], seed: int = 0, jitter: float = 0.0,
                      drop_prob: float = 0.0) -> dict[int, np.ndarray]:
    """Per-frame ``(n, 4)`` center-size boxes of the visible objects, optionally perturbed."""
    rng = np.random.default_rng(seed)
    out = {}
    for fr in frames:
        idx = [fr.gt.ids.index(i) for i in fr.visible]
        boxes = fr.gt.boxes[idx].copy()
        keep = rng.random(len(boxes)) >= drop_prob
        boxes = boxes[keep]
        if jitter:
            boxes[:, :2] += rng.normal(scale=jitter, size=(len(boxes), 2))
        out[fr.frame] = boxes
    return out
