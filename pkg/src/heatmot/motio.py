"""MOTChallenge CSV files and the serialized output-map container."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, TextIO

import numpy as np

from .grid import OutputMaps
from .metrics import FrameAnnotations


class MotParseError(ValueError):
    def __init__(self, source: str, line_no: int, message: str) -> None:
        super().__init__(f"{source}:{line_no}: {message}")
        self.source = source
        self.line_no = line_no


@dataclass(frozen=True)
class MotRecord:
    """One line of a MOTChallenge det/gt/result file."""

    frame: int
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    @property
    def box(self) -> tuple[float, float, float, float]:
        """Center-size box ``(cx, cy, w, h)``."""
        return (self.bb_left + self.bb_width / 2, self.bb_top + self.bb_height / 2,
                self.bb_width, self.bb_height)

    @classmethod
    def from_box(cls, frame: int, obj_id: int, box, conf: float = 1.0) -> "MotRecord":
        cx, cy, w, h = (float(v) for v in box)
        return cls(frame, obj_id, cx - w / 2, cy - h / 2, w, h, conf)


def _parse_line(fields: list[str], source: str, line_no: int) -> MotRecord:
    if len(fields) < 7:
        raise MotParseError(source, line_no, f"expected at least 7 fields, got {len(fields)}")
    try:
        frame = int(float(fields[0]))
        obj_id = int(float(fields[1]))
        nums = [float(f) for f in fields[2:10]]
    except ValueError as exc:
        raise MotParseError(source, line_no, f"malformed number ({exc})") from None
    nums += [-1.0] * (8 - len(nums))
    if frame < 1:
        raise MotParseError(source, line_no, f"frame index {frame} < 1")
    return MotRecord(frame, obj_id, *nums)


def parse_mot_file(source: str | Path | TextIO) -> dict[int, list[MotRecord]]:
    """Read records grouped by frame, preserving file order within a frame."""
    if isinstance(source, (str, Path)):
        name = str(source)
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        name = getattr(source, "name", "<stream>")
        text = source.read()
    out: dict[int, list[MotRecord]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        rec = _parse_line([f.strip() for f in line.split(",")], name, line_no)
        out.setdefault(rec.frame, []).append(rec)
    return out


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def format_record(rec: MotRecord) -> str:
    return ",".join([
        str(rec.frame), str(rec.id),
        _fmt(rec.bb_left), _fmt(rec.bb_top), _fmt(rec.bb_width), _fmt(rec.bb_height),
        _fmt(rec.conf),
        _fmt(rec.x), _fmt(rec.y), _fmt(rec.z),
    ])


def write_mot_file(records: Iterable[MotRecord], dest: str | Path | TextIO | None = None) -> str:
    """Write records sorted by (frame, id); returns the text written.

    Every numeric field is written in its shortest exact form, so parsing
    the text back yields bit-identical values.
    """
    lines = [format_record(r) for r in sorted(records, key=lambda r: (r.frame, r.id))]
    text = "".join(line + "\n" for line in lines)
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)
    elif dest is not None:
        dest.write(text)
    return text


def records_to_annotations(frames: dict[int, list[MotRecord]]) -> list[FrameAnnotations]:
    return [FrameAnnotations(f, [r.id for r in recs], [r.box for r in recs])
            for f, recs in sorted(frames.items())]


def annotations_to_records(annotations: Iterable[FrameAnnotations]) -> list[MotRecord]:
    return [MotRecord.from_box(fa.frame, obj_id, box)
            for fa in annotations for obj_id, box in zip(fa.ids, fa.boxes)]


# Output-map container. All little-endian:
#   magic b"HMOM", version uint32, frame_count uint32
#   per frame: frame int32, height uint32, width uint32,
#              c_center uint32 (1), c_size uint32 (2), c_disp uint32 (2), c_feat uint32,
#              then float64 row-major (row, col, channel) arrays:
#              center, size, displacement, features (omitted when c_feat == 0)
MAPS_MAGIC = b"HMOM"
MAPS_VERSION = 1
_FRAME_HEADER = struct.Struct("<iIIIIII")


@dataclass
class MapFrame:
    frame: int
    maps: OutputMaps
    features: np.ndarray | None = None


def write_maps(frames: Iterable[MapFrame], dest: str | Path | BinaryIO) -> None:
    frames = list(frames)
    buf = io.BytesIO()
    buf.write(MAPS_MAGIC)
    buf.write(struct.pack("<II", MAPS_VERSION, len(frames)))
    for fr in frames:
        h, w = fr.maps.shape
        feats = fr.features
        c_feat = 0 if feats is None else feats.shape[2]
        if feats is not None and feats.shape[:2] != (h, w):
            raise ValueError("feature map shape differs from the output maps")
        buf.write(_FRAME_HEADER.pack(fr.frame, h, w, 1, 2, 2, c_feat))
        for arr in (fr.maps.center, fr.maps.size, fr.maps.displacement):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if feats is not None:
            buf.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
    data = buf.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(data)
    else:
        dest.write(data)


def _take(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError("truncated map container")
    return data


def _read_array(stream: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    return np.frombuffer(_take(stream, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def read_maps(source: str | Path | BinaryIO) -> list[MapFrame]:
    if isinstance(source, (str, Path)):
        stream: BinaryIO = io.BytesIO(Path(source).read_bytes())
    else:
        stream = source
    if _take(stream, 4) != MAPS_MAGIC:
        raise ValueError("not a map container (bad magic)")
    version, count = struct.unpack("<II", _take(stream, 8))
    if version != MAPS_VERSION:
        raise ValueError(f"unsupported map container version {version}")
    frames = []
    for _ in range(count):
        frame, h, w, c_c, c_s, c_d, c_f = _FRAME_HEADER.unpack(_take(stream, _FRAME_HEADER.size))
        if (c_c, c_s, c_d) != (1, 2, 2):
            raise ValueError(f"unexpected channel counts {(c_c, c_s, c_d)}")
        center = _read_array(stream, (h, w))
        size = _read_array(stream, (h, w, 2))
        disp = _read_array(stream, (h, w, 2))
        feats = _read_array(stream, (h, w, c_f)) if c_f else None
        frames.append(MapFrame(frame, OutputMaps(center, size, disp), feats))
    return frames
