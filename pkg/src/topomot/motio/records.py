"""MOTChallenge text files and the descriptor sidecar."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class MotFormatError(ValueError):
    """A line in a MOT or sidecar file could not be parsed."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame numbers start at 1, got {self.frame}")

    @property
    def tlwh(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)

    @property
    def is_valid(self) -> bool:
        return self.width > 0 and self.height > 0


@dataclass(frozen=True)
class GroundTruthFilter:
    """MOTChallenge convention: keep active rows of the pedestrian class.

    In ground-truth files the seventh column is the "consider" flag, the
    eighth the class and the ninth the visibility ratio.
    """

    require_active: bool = True
    classes: Optional[tuple[int, ...]] = (1,)
    min_visibility: float = 0.0

    def keep(self, r: MotRecord) -> bool:
        if self.require_active and r.conf == 0:
            return False
        if self.classes is not None and r.x != -1 and int(r.x) not in self.classes:
            return False
        if r.y != -1 and r.y < self.min_visibility:
            return False
        return True


KINDS = ("detections", "groundtruth", "tracks")


def _number(tok: str) -> float:
    v = float(tok)
    if not np.isfinite(v):
        raise ValueError(f"non-finite value {tok!r}")
    return v


def parse_line(line: str) -> MotRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 7:
        raise ValueError(f"expected at least 7 fields, found {len(parts)}")
    vals = [_number(p) for p in parts[:10]]
    frame, tid = vals[0], vals[1]
    if frame != int(frame) or tid != int(tid):
        raise ValueError("frame and id must be integers")
    return MotRecord(int(frame), int(tid), *vals[2:])


def read_mot(path, kind: str = "detections", gt_filter: GroundTruthFilter = GroundTruthFilter()) -> list[MotRecord]:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    path = Path(path)
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_line(line)
            except ValueError as exc:
                raise MotFormatError(path, lineno, str(exc)) from None
            if kind == "groundtruth" and not gt_filter.keep(rec):
                continue
            out.append(rec)
    return out


def _fmt(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def format_record(r: MotRecord) -> str:
    fields = [str(r.frame), str(r.id), *(_fmt(v) for v in (r.left, r.top, r.width, r.height, r.conf, r.x, r.y, r.z))]
    return ",".join(fields)


def write_records(path, records: Iterable[MotRecord], sort: bool = True) -> Path:
    records = list(records)
    if sort:
        records.sort(key=lambda r: (r.frame, r.id))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")
    return path


def track_records(tracks) -> list[MotRecord]:
    """Tracker output ``(frame, id, box)`` rows as MOT records with conf 1."""
    return [MotRecord(int(t.frame), int(t.track_id), *t.box.tlwh(), 1.0) for t in tracks]


def write_mot(path, tracks) -> Path:
    """Write tracker output; one line per (frame, id), sorted by frame then id."""
    seen = set()
    for t in tracks:
        key = (int(t.frame), int(t.track_id))
        if key in seen:
            raise ValueError(f"duplicate record for frame {key[0]}, id {key[1]}")
        seen.add(key)
    return write_records(path, track_records(tracks))


def write_descriptors(path, entries: Iterable[tuple[int, int, np.ndarray]]) -> Path:
    """Sidecar rows ``frame,index,v1,...,vF``; ``index`` is the detection's position within its frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for frame, idx, vec in entries:
            vals = ",".join(f"{v:.6f}" for v in np.asarray(vec, dtype=np.float64).ravel())
            fh.write(f"{int(frame)},{int(idx)},{vals}\n")
    return path


def read_descriptors(path) -> dict[tuple[int, int], np.ndarray]:
    path = Path(path)
    out: dict[tuple[int, int], np.ndarray] = {}
    dim = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            try:
                if len(parts) < 3:
                    raise ValueError("expected frame, index and at least one value")
                key = (int(parts[0]), int(parts[1]))
                vec = np.array([_number(p) for p in parts[2:]])
            except ValueError as exc:
                raise MotFormatError(path, lineno, str(exc)) from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise MotFormatError(path, lineno, f"descriptor has {vec.size} values, expected {dim}")
            if key in out:
                raise MotFormatError(path, lineno, f"duplicate descriptor for frame {key[0]}, index {key[1]}")
            out[key] = vec
    return out


def group_by_frame(records: Sequence[MotRecord]) -> dict[int, list[MotRecord]]:
    """Records per frame, preserving file order inside each frame."""
    frames: dict[int, list[MotRecord]] = {}
    for r in records:
        frames.setdefault(r.frame, []).append(r)
    return frames
