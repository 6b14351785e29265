"""CLEAR-MOT counts and identity F1 for MOT records.

HOTA is not computed here; use the official TrackEval tooling for it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..assoc import hungarian_match
from .records import MotRecord, group_by_frame


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between rows of two (k x 4) tlwh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class Counts:
    GT: int = 0
    FP: int = 0
    FN: int = 0
    IDSW: int = 0
    IDTP: int = 0
    IDFP: int = 0
    IDFN: int = 0
    matches: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(**{k: getattr(self, k) + getattr(other, k) for k in asdict(self)})

    @property
    def mota(self) -> float:
        return 1.0 - (self.FP + self.FN + self.IDSW) / self.GT

    @property
    def idf1(self) -> float:
        denom = 2 * self.IDTP + self.IDFP + self.IDFN
        return 2 * self.IDTP / denom if denom else 0.0


@dataclass
class EvalReport:
    IDF1: float
    MOTA: float
    IDTP: int
    IDFP: int
    IDFN: int
    FP: int
    FN: int
    IDSW: int
    GT: int
    sequences: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, c: Counts, sequences=None) -> "EvalReport":
        return cls(c.idf1, c.mota, c.IDTP, c.IDFP, c.IDFN, c.FP, c.FN, c.IDSW, c.GT, dict(sequences or {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'sequence':<16}{'IDF1':>8}{'MOTA':>8}{'IDSW':>6}{'FP':>7}{'FN':>7}{'GT':>7}"
        rows = [head]
        for name, s in sorted(self.sequences.items()):
            rows.append(f"{name:<16}{100 * s['IDF1']:>8.2f}{100 * s['MOTA']:>8.2f}"
                        f"{s['IDSW']:>6}{s['FP']:>7}{s['FN']:>7}{s['GT']:>7}")
        rows.append(f"{'OVERALL':<16}{100 * self.IDF1:>8.2f}{100 * self.MOTA:>8.2f}"
                    f"{self.IDSW:>6}{self.FP:>7}{self.FN:>7}{self.GT:>7}")
        return "\n".join(rows)


def _boxes(recs: Sequence[MotRecord]) -> np.ndarray:
    return np.array([r.tlwh for r in recs], dtype=np.float64).reshape(-1, 4)


def _frame_counts(gt_frames, pred_frames, iou_threshold: float) -> Counts:
    c = Counts()
    last_match: dict[int, int] = {}
    for frame in sorted(set(gt_frames) | set(pred_frames)):
        g = gt_frames.get(frame, [])
        p = pred_frames.get(frame, [])
        c.GT += len(g)
        if not g or not p:
            c.FN += len(g)
            c.FP += len(p)
            continue
        iou = iou_matrix(_boxes(g), _boxes(p))
        res = hungarian_match(iou, iou_threshold)
        c.matches += len(res.matches)
        c.FN += len(g) - len(res.matches)
        c.FP += len(p) - len(res.matches)
        for m in res.matches:
            gid, pid = g[m.detection].id, p[m.track_id].id
            prev = last_match.get(gid)
            if prev is not None and prev != pid:
                c.IDSW += 1
            last_match[gid] = pid
    return c


def identity_overlap(gt_frames, pred_frames, iou_threshold: float):
    """Per (gt id, pred id) number of frames where the two boxes overlap enough.

    Returns (gt ids, pred ids, count matrix, gt lengths, pred lengths).
    """
    gt_ids = sorted({r.id for rs in gt_frames.values() for r in rs})
    pr_ids = sorted({r.id for rs in pred_frames.values() for r in rs})
    gi = {k: i for i, k in enumerate(gt_ids)}
    pi = {k: i for i, k in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    for frame, g in gt_frames.items():
        p = pred_frames.get(frame)
        if not p:
            continue
        hit = iou_matrix(_boxes(g), _boxes(p)) >= iou_threshold
        for a, b in zip(*np.nonzero(hit)):
            overlap[gi[g[a].id], pi[p[b].id]] += 1
    gt_len = np.zeros(len(gt_ids), dtype=np.int64)
    pr_len = np.zeros(len(pr_ids), dtype=np.int64)
    for rs in gt_frames.values():
        for r in rs:
            gt_len[gi[r.id]] += 1
    for rs in pred_frames.values():
        for r in rs:
            pr_len[pi[r.id]] += 1
    return gt_ids, pr_ids, overlap, gt_len, pr_len


def _identity_counts(gt_frames, pred_frames, iou_threshold: float) -> tuple[int, int, int]:
    _, _, overlap, gt_len, pr_len = identity_overlap(gt_frames, pred_frames, iou_threshold)
    idtp = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        idtp = int(overlap[rows, cols].sum())
    return idtp, int(pr_len.sum()) - idtp, int(gt_len.sum()) - idtp


def _check_unique(frames, what: str) -> None:
    for frame, rs in frames.items():
        ids = [r.id for r in rs]
        if len(ids) != len(set(ids)):
            raise ValueError(f"{what} frame {frame} repeats an id")


def sequence_counts(gt: Sequence[MotRecord], pred: Sequence[MotRecord], iou_threshold: float = 0.5) -> Counts:
    if not gt:
        raise ValueError("ground truth is empty")
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    gt_frames, pred_frames = group_by_frame(gt), group_by_frame(pred)
    _check_unique(gt_frames, "ground truth")
    _check_unique(pred_frames, "prediction")
    c = _frame_counts(gt_frames, pred_frames, iou_threshold)
    c.IDTP, c.IDFP, c.IDFN = _identity_counts(gt_frames, pred_frames, iou_threshold)
    return c


def evaluate(gt: Sequence[MotRecord], pred: Sequence[MotRecord], iou_threshold: float = 0.5,
             name: str = "seq") -> EvalReport:
    c = sequence_counts(gt, pred, iou_threshold)
    return evaluate_many({name: (gt, pred)}, iou_threshold)


def evaluate_many(pairs: Mapping[str, tuple[Sequence[MotRecord], Sequence[MotRecord]]],
                  iou_threshold: float = 0.5) -> EvalReport:
    """Evaluate several sequences; overall numbers come from summed counts."""
    if not pairs:
        raise ValueError("no sequences to evaluate")
    total = Counts()
    per = {}
    for name, (gt, pred) in pairs.items():
        c = sequence_counts(gt, pred, iou_threshold)
        total = total + c
        d = EvalReport.from_counts(c).to_dict()
        d.pop("sequences")
        per[name] = d
    return EvalReport.from_counts(total, per)
