"""Affinity fusion, assignment and the online tracker."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graphcon import BoundingBox, Detection, DistanceThreshold, FrameGraph, GraphStrategy, build_graph
from .numkit import DimensionError, FeedForwardLayer, cosine_matrix
from .providers import Providers, ScoreMatrix, normalize
from .topognn import GcnStack, gcn_forward


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 0.7
    betas: tuple[float, ...] = (0.2, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.alpha < 0 or any(b < 0 for b in self.betas):
            raise ValueError(f"fusion weights must be nonnegative (alpha={self.alpha}, betas={self.betas})")
        total = self.alpha + sum(self.betas)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"alpha + sum(betas) must equal 1, got alpha={self.alpha} + betas={list(self.betas)} = {total}"
            )

    @property
    def num_layers(self) -> int:
        return len(self.betas)


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, ScoreMatrix) else np.asarray(s, dtype=np.float64)


@dataclass
class SimilarityBundle:
    appearance: np.ndarray
    motion: np.ndarray
    topology: list[np.ndarray] = field(default_factory=list)
    # per-column flag: tracklet has stored embeddings to compare against
    topology_mask: Optional[np.ndarray] = None
    fused: Optional[np.ndarray] = None

    def __post_init__(self):
        self.appearance = _values(self.appearance)
        self.motion = _values(self.motion)
        self.topology = [np.asarray(t, dtype=np.float64) for t in self.topology]
        shapes = {self.appearance.shape, self.motion.shape} | {t.shape for t in self.topology}
        if len(shapes) != 1:
            raise DimensionError(f"similarity matrices disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.appearance.shape


def fuse(bundle: SimilarityBundle, w: FusionWeights) -> np.ndarray:
    """alpha * min(S_A, S_M) + sum_l beta_l * S_G_l.

    Columns without topology (and every column when no topology is given)
    fall back to min(S_A, S_M) alone.
    """
    base = np.minimum(bundle.appearance, bundle.motion)
    if not bundle.topology or w.alpha == 1.0:
        return base
    if len(bundle.topology) != w.num_layers:
        raise DimensionError(f"{len(bundle.topology)} topology layers but {w.num_layers} beta weights")
    fused = w.alpha * base
    for beta, s in zip(w.betas, bundle.topology):
        fused = fused + beta * s
    if bundle.topology_mask is not None:
        fused = np.where(np.asarray(bundle.topology_mask, dtype=bool)[None, :], fused, base)
    return fused


class Match(NamedTuple):
    detection: int
    track_id: int
    score: float


@dataclass
class AssociationResult:
    matches: list[Match]
    unmatched_detections: list[int]
    unmatched_tracklets: list[int]

    @property
    def total(self) -> float:
        return math.fsum(m.score for m in self.matches)


def _result(pairs, s: np.ndarray, ids: Sequence[int]) -> AssociationResult:
    n, m = s.shape
    matches = [Match(int(i), int(ids[j]), float(s[i, j])) for i, j in pairs]
    used_rows = {i for i, _ in pairs}
    used_cols = {j for _, j in pairs}
    return AssociationResult(
        matches,
        [i for i in range(n) if i not in used_rows],
        [int(ids[j]) for j in range(m) if j not in used_cols],
    )


def greedy_match(s, tau: float = 0.0, track_ids: Optional[Sequence[int]] = None) -> AssociationResult:
    """Accept pairs by descending score (ties: lower row, then lower column)."""
    s = np.asarray(s, dtype=np.float64).reshape(np.shape(s) if np.ndim(s) == 2 else (0, 0))
    n, m = s.shape
    ids = list(range(m)) if track_ids is None else list(track_ids)
    rows, cols = np.nonzero(s >= tau)
    order = np.lexsort((cols, rows, -s[rows, cols]))
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(m, dtype=bool)
    pairs = []
    for k in order:
        i, j = rows[k], cols[k]
        if not row_used[i] and not col_used[j]:
            row_used[i] = col_used[j] = True
            pairs.append((int(i), int(j)))
    return _result(pairs, s, ids)


def hungarian_match(s, tau: float = 0.0, track_ids: Optional[Sequence[int]] = None) -> AssociationResult:
    """Maximum-total assignment over pairs with score >= tau (nonpositive pairs never help)."""
    s = np.asarray(s, dtype=np.float64).reshape(np.shape(s) if np.ndim(s) == 2 else (0, 0))
    n, m = s.shape
    ids = list(range(m)) if track_ids is None else list(track_ids)
    if n == 0 or m == 0:
        return _result([], s, ids)
    allowed = s >= tau
    gain = np.where(allowed, np.maximum(s, 0.0), 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if allowed[i, j] and s[i, j] > 0]
    return _result(pairs, s, ids)


# -- tracker ---------------------------------------------------------------

@dataclass
class Observation:
    box: np.ndarray
    descriptor: np.ndarray
    embeddings: Optional[list[np.ndarray]]


@dataclass
class Tracklet:
    track_id: int
    box: BoundingBox
    hidden: np.ndarray
    buffer: deque
    embeddings: Optional[list[np.ndarray]] = None
    frames_since_seen: int = 0
    history: list[tuple[int, BoundingBox]] = field(default_factory=list)


@dataclass
class Models:
    providers: Optional[Providers]
    gnn: Optional[GcnStack] = None
    edge_layer: Optional[FeedForwardLayer] = None


@dataclass(frozen=True)
class TrackerConfig:
    weights: FusionWeights = FusionWeights()
    strategy: GraphStrategy = DistanceThreshold(0.1)
    tau_match: float = 0.05
    tau_det: float = 0.4
    max_age: int = 30
    history: int = 6
    solver: str = "greedy"

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must keep at least one observation")
        if self.solver not in ("greedy", "hungarian"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def uses_topology(self) -> bool:
        return self.weights.alpha < 1.0 and self.weights.num_layers > 0


def averaged_family_scores(matcher, det_desc: np.ndarray, det_emb: Optional[list[np.ndarray]],
                           tracklets: Sequence[Tracklet], num_layers: int):
    """Raw appearance and per-layer cosine scores averaged over each tracklet's stored observations.

    Returns (raw appearance n x m, list of n x m topology matrices, column mask of
    tracklets that had at least one stored embedding).
    """
    n, m = det_desc.shape[0], len(tracklets)
    owners, descs = [], []
    for j, t in enumerate(tracklets):
        for obs in t.buffer:
            owners.append(j)
            descs.append(obs.descriptor)
    owners = np.asarray(owners, dtype=int)
    counts = np.bincount(owners, minlength=m).astype(np.float64)
    raw_all = matcher.raw_scores(det_desc, np.stack(descs))
    app = np.zeros((n, m))
    np.add.at(app.T, owners, raw_all.T)
    app /= counts[None, :]

    topo: list[np.ndarray] = []
    mask = np.zeros(m, dtype=bool)
    if det_emb is None or num_layers == 0:
        return app, topo, mask
    emb_owner, emb_rows = [], [[] for _ in range(num_layers)]
    for j, t in enumerate(tracklets):
        for obs in t.buffer:
            if obs.embeddings is None:
                continue
            emb_owner.append(j)
            for l in range(num_layers):
                emb_rows[l].append(obs.embeddings[l])
    if not emb_owner:
        return app, [np.zeros((n, m)) for _ in range(num_layers)], mask
    emb_owner = np.asarray(emb_owner, dtype=int)
    emb_counts = np.bincount(emb_owner, minlength=m).astype(np.float64)
    mask = emb_counts > 0
    for l in range(num_layers):
        cos_all = cosine_matrix(det_emb[l], np.stack(emb_rows[l]))
        acc = np.zeros((n, m))
        np.add.at(acc.T, emb_owner, cos_all.T)
        topo.append(acc / np.where(mask, emb_counts, 1.0)[None, :])
    return app, topo, mask


def averaged_scores(tracklet: Tracklet, detection: Detection, matcher,
                    det_embeddings: Optional[list[np.ndarray]] = None) -> dict:
    """Single-pair view of :func:`averaged_family_scores`."""
    num_layers = len(det_embeddings) if det_embeddings is not None else 0
    emb = [np.atleast_2d(e) for e in det_embeddings] if det_embeddings is not None else None
    app, topo, mask = averaged_family_scores(matcher, detection.descriptor[None, :], emb, [tracklet], num_layers)
    return {
        "appearance": float(app[0, 0]),
        "topology": [float(t[0, 0]) for t in topo] if mask.any() else [],
    }


class TrackRecord(NamedTuple):
    frame: int
    track_id: int
    box: BoundingBox


class Tracker:
    """Stateful frame-by-frame association."""

    def __init__(self, models: Models, config: TrackerConfig = TrackerConfig(), record_scores: bool = False):
        if config.uses_topology:
            if models.gnn is None or models.edge_layer is None:
                raise ValueError("topology weights are set but no GNN / edge layer was provided")
            if models.gnn.num_layers != config.weights.num_layers:
                raise DimensionError(
                    f"GNN has {models.gnn.num_layers} layers but {config.weights.num_layers} beta weights"
                )
        self.models = models
        self.config = config
        self.tracklets: list[Tracklet] = []
        self.next_id = 1
        self.last_frame: Optional[int] = None
        self.record_scores = record_scores
        self.score_log: list[dict] = []

    def _embed(self, dets: Sequence[Detection]) -> Optional[list[np.ndarray]]:
        if not self.config.uses_topology or len(dets) <= 1:
            return None
        graph: FrameGraph = build_graph(dets, self.config.strategy, self.models.edge_layer)
        return [h.copy() for h in gcn_forward(self.models.gnn, graph).layers]

    def _similarities(self, dets, det_desc, det_boxes, det_emb):
        tracks = self.tracklets
        providers = self.models.providers
        raw_app, topo, mask = averaged_family_scores(
            providers.matcher, det_desc, det_emb, tracks, self.config.weights.num_layers if det_emb else 0
        )
        trk_boxes = np.array([t.box.normalized() for t in tracks])
        trk_hidden = np.stack([t.hidden for t in tracks])
        raw_mot, states, _ = providers.scorer.pair_scores(det_boxes, trk_boxes, trk_hidden)
        bundle = SimilarityBundle(normalize(raw_app), normalize(raw_mot), topo, mask if topo else None)
        bundle.fused = fuse(bundle, self.config.weights)
        if not np.all(np.isfinite(bundle.fused)):
            raise FloatingPointError(f"non-finite affinity at frame {self.last_frame}")
        return bundle, states

    def step(self, frame: int, dets: Sequence[Detection]) -> tuple[AssociationResult, list[TrackRecord]]:
        if self.last_frame is not None and frame <= self.last_frame:
            raise ValueError(f"frame {frame} arrives after frame {self.last_frame}")
        self.last_frame = frame
        cfg = self.config
        n = len(dets)
        det_desc = np.stack([d.descriptor for d in dets]) if n else np.zeros((0, 0))
        det_boxes = np.array([d.box.normalized() for d in dets]) if n else np.zeros((0, 4))
        det_emb = self._embed(dets) if n else None

        if n and self.tracklets:
            bundle, states = self._similarities(dets, det_desc, det_boxes, det_emb)
            solve = greedy_match if cfg.solver == "greedy" else hungarian_match
            ids = [t.track_id for t in self.tracklets]
            result = solve(bundle.fused, cfg.tau_match, ids)
            if self.record_scores:
                self.score_log.append({"frame": frame, "track_ids": ids, "fused": bundle.fused.copy()})
        else:
            states = None
            result = AssociationResult([], list(range(n)), [t.track_id for t in self.tracklets])

        by_id = {t.track_id: (col, t) for col, t in enumerate(self.tracklets)}
        records = []
        for mt in result.matches:
            col, t = by_id[mt.track_id]
            d = dets[mt.detection]
            emb = [h[mt.detection].copy() for h in det_emb] if det_emb is not None else None
            t.box = d.box
            t.hidden = states[mt.detection, col].copy()
            t.embeddings = emb
            t.buffer.append(Observation(det_boxes[mt.detection], d.descriptor, emb))
            t.frames_since_seen = 0
            t.history.append((frame, d.box))
            records.append(TrackRecord(frame, t.track_id, d.box))

        matched = {mt.track_id for mt in result.matches}
        survivors = []
        for t in self.tracklets:
            if t.track_id not in matched:
                t.frames_since_seen += 1
                if t.frames_since_seen > cfg.max_age:
                    continue
            survivors.append(t)
        self.tracklets = survivors

        scorer = self.models.providers.scorer
        for i in result.unmatched_detections:
            d = dets[i]
            if d.confidence < cfg.tau_det:
                continue
            emb = [h[i].copy() for h in det_emb] if det_emb is not None else None
            buf = deque([Observation(det_boxes[i], d.descriptor, emb)], maxlen=cfg.history)
            t = Tracklet(self.next_id, d.box, scorer.initial_state(), buf, emb, 0, [(frame, d.box)])
            self.next_id += 1
            self.tracklets.append(t)
            records.append(TrackRecord(frame, t.track_id, d.box))
        records.sort(key=lambda r: r.track_id)
        return result, records


def track_step(tracker: Tracker, frame: int, dets: Sequence[Detection]):
    return tracker.step(frame, dets)


def track_sequence(frames: Sequence[Sequence[Detection]], models: Models, config: TrackerConfig = TrackerConfig(),
                   first_frame: int = 1, tracker: Optional[Tracker] = None) -> list[TrackRecord]:
    """Run the tracker over consecutive frames; ``frames[k]`` is frame ``first_frame + k``."""
    tracker = tracker or Tracker(models, config)
    out: list[TrackRecord] = []
    for k, dets in enumerate(frames):
        _, records = tracker.step(first_frame + k, dets)
        out.extend(records)
    return out
