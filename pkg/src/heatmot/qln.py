"""Query learning networks: turn two frame memories into decoder inputs."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import FeaturePyramid, Layer, bilinear_sample_many, ffn_forward, random_ffn


class QLNVariant(str, enum.Enum):
    SPARSE_PREV = "S-"
    SPARSE_PREV_EMBED = "SE-"
    DENSE_PREV = "D-"
    DENSE_CURRENT = "Mt"
    DENSE_FROM_DQ = "DQ"
    EMBED = "E"

    @property
    def sparse(self) -> bool:
        return self in (QLNVariant.SPARSE_PREV, QLNVariant.SPARSE_PREV_EMBED)


# Where each output comes from, before any FFN. "M_t" / "M_t-1" are the two
# memories, "sampler" is M_t-1 read at track positions, "DQ" the detection
# queries, "embed" a fixed noise-initialized embedding.
WIRING: dict[QLNVariant, dict[str, str]] = {
    QLNVariant.SPARSE_PREV: {"dq": "M_t", "dm": "M_t", "tq": "sampler", "tm": "M_t"},
    QLNVariant.SPARSE_PREV_EMBED: {"dq": "embed", "dm": "M_t", "tq": "sampler", "tm": "M_t"},
    QLNVariant.DENSE_PREV: {"dq": "M_t", "dm": "M_t", "tq": "M_t-1", "tm": "M_t"},
    QLNVariant.DENSE_CURRENT: {"dq": "M_t", "dm": "M_t", "tq": "M_t", "tm": "M_t-1"},
    QLNVariant.DENSE_FROM_DQ: {"dq": "M_t", "dm": "M_t", "tq": "DQ", "tm": "M_t-1"},
    QLNVariant.EMBED: {"dq": "M_t", "dm": "M_t", "tq": "embed", "tm": "M_t-1"},
}


@dataclass
class QLNParams:
    """Independent FFNs for each path plus the fixed embeddings.

    ``det_embed`` (SE-) and ``track_embed`` (E) are pyramids with the memory
    geometry; they are only required by the variants that use them.
    """

    ffn_dq: list[Layer]
    ffn_tq: list[Layer]
    ffn_tm: list[Layer]
    det_embed: FeaturePyramid | None = None
    track_embed: FeaturePyramid | None = None


def init_qln_params(rng: np.random.Generator, template: FeaturePyramid) -> QLNParams:
    h = template.hidden_dim

    def embed() -> FeaturePyramid:
        return FeaturePyramid([rng.normal(size=lv.shape) for lv in template.levels], template.strides)

    return QLNParams(
        ffn_dq=random_ffn(rng, (h, h, h)),
        ffn_tq=random_ffn(rng, (h, h, h)),
        ffn_tm=random_ffn(rng, (h, h, h)),
        det_embed=embed(),
        track_embed=embed(),
    )


@dataclass
class QueryBundle:
    dq: FeaturePyramid
    dm: FeaturePyramid
    tq: np.ndarray | FeaturePyramid
    tm: FeaturePyramid
    sources: dict[str, str]


def feature_sample_tracks(memory: FeaturePyramid,
                          positions: Sequence[tuple[float, float]] | np.ndarray) -> np.ndarray:
    """Per-position features averaged over all levels.

    ``positions`` are ``(x, y)`` in input pixels; level ``l`` is read at
    ``position / strides[l]``.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pos)):
        raise ValueError("track positions must be finite")
    if len(pos) == 0:
        return np.zeros((0, memory.hidden_dim))
    acc = np.zeros((len(pos), memory.hidden_dim))
    for level, stride in zip(memory.levels, memory.strides):
        acc += bilinear_sample_many(level, pos[:, 0] / stride, pos[:, 1] / stride)
    return acc / len(memory.levels)


def _check_same_geometry(a: FeaturePyramid, b: FeaturePyramid) -> None:
    if a.shapes != b.shapes or a.strides != b.strides or a.hidden_dim != b.hidden_dim:
        raise ValueError("memories at t and t-1 must share geometry")


def build_queries(m_t: FeaturePyramid, m_prev: FeaturePyramid,
                  prev_positions: Sequence[tuple[float, float]] | np.ndarray | None,
                  variant: QLNVariant | str, params: QLNParams) -> QueryBundle:
    """Assemble ``(DQ, DM, TQ, TM)`` for one frame pair.

    The detection memory is ``m_t`` itself (same object), never a copy.
    """
    variant = QLNVariant(variant)
    _check_same_geometry(m_t, m_prev)
    wiring = WIRING[variant]

    def ffn(pyr: FeaturePyramid, layers: list[Layer]) -> FeaturePyramid:
        return pyr.map_cells(lambda x: ffn_forward(x, layers))

    def embedding(name: str) -> FeaturePyramid:
        emb = getattr(params, name)
        if emb is None:
            raise ValueError(f"variant {variant.value} needs params.{name}")
        _check_same_geometry(m_t, emb)
        return emb

    if wiring["dq"] == "embed":
        dq = embedding("det_embed")
    else:
        dq = ffn(m_t, params.ffn_dq)

    memories = {"M_t": m_t, "M_t-1": m_prev}
    tm = ffn(memories[wiring["tm"]], params.ffn_tm)

    source = wiring["tq"]
    if source == "sampler":
        if prev_positions is None:
            raise ValueError(f"variant {variant.value} needs track positions at t-1")
        sampled = feature_sample_tracks(m_prev, prev_positions)
        tq = ffn_forward(sampled, params.ffn_tq) if len(sampled) else sampled
    elif source == "embed":
        tq = embedding("track_embed")
    elif source == "DQ":
        tq = ffn(dq, params.ffn_tq)
    else:
        tq = ffn(memories[source], params.ffn_tq)

    return QueryBundle(dq=dq, dm=m_t, tq=tq, tm=tm, sources=dict(wiring))
