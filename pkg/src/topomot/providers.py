"""Appearance and motion affinity providers and their consistency training.

Both providers score every (detection, tracklet) pair and the raw score
matrices are normalized with the elementwise minimum of a row and a column
softmax. They are trained jointly without identity labels by making the two
cues agree on N-frame windows, restricted to physically reachable pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .numkit import (
    LOG_CLAMP,
    Adam,
    DimensionError,
    FeedForwardLayer,
    ff_backward,
    ff_forward,
    softmax_cols,
    softmax_cols_backward,
    softmax_rows,
    softmax_rows_backward,
)


@dataclass
class ScoreMatrix:
    raw: np.ndarray
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @property
    def is_empty(self) -> bool:
        return self.raw.size == 0

    @classmethod
    def empty(cls, n: int = 0, m: int = 0) -> "ScoreMatrix":
        return cls(np.zeros((n, m)), np.zeros((n, m)))


def normalize(raw) -> ScoreMatrix:
    """min(softmax over each column, softmax over each row), elementwise."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise DimensionError("cannot normalize an empty score matrix")
    return ScoreMatrix(raw, np.minimum(softmax_cols(raw), softmax_rows(raw)))


def normalize_backward(raw: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through :func:`normalize`; ties route to the column branch."""
    pc = softmax_cols(raw)
    pr = softmax_rows(raw)
    use_col = pc <= pr
    return (softmax_cols_backward(pc, np.where(use_col, upstream, 0.0))
            + softmax_rows_backward(pr, np.where(use_col, 0.0, upstream)))


# -- appearance ------------------------------------------------------------

@dataclass
class AppearanceMatcher:
    hidden: FeedForwardLayer
    out: FeedForwardLayer

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator, hidden_dim: int = 64) -> "AppearanceMatcher":
        return cls(
            FeedForwardLayer.init(2 * feature_dim, hidden_dim, rng, activation="relu"),
            FeedForwardLayer.init(hidden_dim, 1, rng),
        )

    @property
    def feature_dim(self) -> int:
        return self.hidden.n_in // 2

    def params(self, prefix: str = "app") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.hidden.weight": self.hidden.weight,
            f"{prefix}.hidden.bias": self.hidden.bias,
            f"{prefix}.out.weight": self.out.weight,
            f"{prefix}.out.bias": self.out.bias,
        }

    def _pairs(self, det_desc: np.ndarray, trk_desc: np.ndarray) -> np.ndarray:
        n, m = det_desc.shape[0], trk_desc.shape[0]
        if det_desc.shape[1] != self.feature_dim or trk_desc.shape[1] != self.feature_dim:
            raise DimensionError(
                f"matcher expects {self.feature_dim}-dim descriptors, got {det_desc.shape[1]} and {trk_desc.shape[1]}"
            )
        left = np.repeat(det_desc, m, axis=0)
        right = np.tile(trk_desc, (n, 1))
        return np.concatenate([left, right], axis=1)

    def raw_scores(self, det_desc, trk_desc) -> np.ndarray:
        det_desc = np.atleast_2d(np.asarray(det_desc, dtype=np.float64))
        trk_desc = np.atleast_2d(np.asarray(trk_desc, dtype=np.float64))
        n, m = det_desc.shape[0], trk_desc.shape[0]
        if n == 0 or m == 0:
            return np.zeros((n, m))
        x = self._pairs(det_desc, trk_desc)
        return ff_forward(self.out, ff_forward(self.hidden, x))[:, 0].reshape(n, m)

    def backward(self, det_desc, trk_desc, d_raw: np.ndarray, prefix: str = "app") -> dict[str, np.ndarray]:
        x = self._pairs(np.asarray(det_desc, dtype=np.float64), np.asarray(trk_desc, dtype=np.float64))
        a = ff_forward(self.hidden, x)
        g_out, d_a = ff_backward(self.out, a, d_raw.reshape(-1, 1))
        g_hid, _ = ff_backward(self.hidden, x, d_a)
        return {
            f"{prefix}.hidden.weight": g_hid["weight"],
            f"{prefix}.hidden.bias": g_hid["bias"],
            f"{prefix}.out.weight": g_out["weight"],
            f"{prefix}.out.bias": g_out["bias"],
        }


def appearance_scores(matcher: AppearanceMatcher, det_desc, trk_desc) -> ScoreMatrix:
    raw = matcher.raw_scores(det_desc, trk_desc)
    if raw.size == 0:
        return ScoreMatrix.empty(*raw.shape)
    return normalize(raw)


# -- motion -------------------------------------------------------------------

def motion_features(det_boxes: np.ndarray, trk_boxes: np.ndarray, position_scale: float) -> np.ndarray:
    """Encode every (detection, tracklet) box pair as 8 numbers, shape (n, m, 8).

    The pair is expressed in the tracklet's frame of reference: scaled
    center offset, log size ratio, then the tracklet box itself. This is an
    invertible re-coding of the concatenated pair.
    """
    d = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)[:, None, :]
    t = np.asarray(trk_boxes, dtype=np.float64).reshape(-1, 4)[None, :, :]
    d, t = np.broadcast_arrays(d, t)
    return np.concatenate([
        (d[..., :2] - t[..., :2]) * position_scale,
        np.log(d[..., 2:] / t[..., 2:]),
        t,
    ], axis=-1)


@dataclass
class _StepCache:
    inputs: list[np.ndarray]
    trunk_out: np.ndarray
    hidden_in_dim: int


@dataclass
class MotionScorer:
    """Recurrent cell over box pairs with a score head and a state head."""

    trunk: list[FeedForwardLayer]
    score_head: FeedForwardLayer
    state_head: FeedForwardLayer
    position_scale: float = 25.0

    @classmethod
    def init(cls, rng: np.random.Generator, hidden_dim: int = 64, depth: int = 1,
             position_scale: float = 25.0) -> "MotionScorer":
        trunk = [FeedForwardLayer.init(8 + hidden_dim, hidden_dim, rng, activation="relu")]
        for _ in range(depth - 1):
            trunk.append(FeedForwardLayer.init(hidden_dim, hidden_dim, rng, activation="relu"))
        return cls(
            trunk,
            FeedForwardLayer.init(hidden_dim, 1, rng),
            FeedForwardLayer.init(hidden_dim, hidden_dim, rng, activation="sigmoid"),
            position_scale,
        )

    @property
    def hidden_dim(self) -> int:
        return self.state_head.n_out

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.hidden_dim)

    def _layers(self) -> list[tuple[str, FeedForwardLayer]]:
        named = [(f"trunk{i}", layer) for i, layer in enumerate(self.trunk)]
        return named + [("score", self.score_head), ("state", self.state_head)]

    def params(self, prefix: str = "mot") -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out[f"{prefix}.{name}.weight"] = layer.weight
            out[f"{prefix}.{name}.bias"] = layer.bias
        return out

    def step(self, feats: np.ndarray, hidden: np.ndarray):
        """One cell application on a batch; returns (scores, new states, cache)."""
        x = np.concatenate([feats, hidden], axis=1)
        inputs = []
        for layer in self.trunk:
            inputs.append(x)
            x = ff_forward(layer, x)
        scores = ff_forward(self.score_head, x)[:, 0]
        states = ff_forward(self.state_head, x)
        return scores, states, _StepCache(inputs, x, hidden.shape[1])

    def step_backward(self, cache: _StepCache, d_scores: np.ndarray, d_states: Optional[np.ndarray],
                      prefix: str = "mot") -> tuple[dict[str, np.ndarray], np.ndarray]:
        grads = {}
        g, d_x = ff_backward(self.score_head, cache.trunk_out, d_scores.reshape(-1, 1))
        grads[f"{prefix}.score.weight"], grads[f"{prefix}.score.bias"] = g["weight"], g["bias"]
        if d_states is not None:
            g, d_x2 = ff_backward(self.state_head, cache.trunk_out, d_states)
            d_x = d_x + d_x2
            grads[f"{prefix}.state.weight"], grads[f"{prefix}.state.bias"] = g["weight"], g["bias"]
        else:
            grads[f"{prefix}.state.weight"] = np.zeros_like(self.state_head.weight)
            grads[f"{prefix}.state.bias"] = np.zeros_like(self.state_head.bias)
        for i in range(len(self.trunk) - 1, -1, -1):
            g, d_x = ff_backward(self.trunk[i], cache.inputs[i], d_x)
            grads[f"{prefix}.trunk{i}.weight"], grads[f"{prefix}.trunk{i}.bias"] = g["weight"], g["bias"]
        return grads, d_x[:, -cache.hidden_in_dim:]

    def pair_scores(self, det_boxes, trk_boxes, trk_hidden):
        """Raw scores (n x m) and candidate states (n x m x H) for all pairs."""
        det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
        trk_boxes = np.asarray(trk_boxes, dtype=np.float64).reshape(-1, 4)
        n, m = det_boxes.shape[0], trk_boxes.shape[0]
        if n == 0 or m == 0:
            return np.zeros((n, m)), np.zeros((n, m, self.hidden_dim)), None
        trk_hidden = np.asarray(trk_hidden, dtype=np.float64).reshape(m, self.hidden_dim)
        feats = motion_features(det_boxes, trk_boxes, self.position_scale).reshape(n * m, 8)
        hidden = np.tile(trk_hidden, (n, 1))
        scores, states, cache = self.step(feats, hidden)
        return scores.reshape(n, m), states.reshape(n, m, self.hidden_dim), cache


def motion_scores(scorer: MotionScorer, det_boxes, trk_boxes, trk_hidden) -> tuple[ScoreMatrix, np.ndarray]:
    raw, states, _ = scorer.pair_scores(det_boxes, trk_boxes, trk_hidden)
    if raw.size == 0:
        return ScoreMatrix.empty(*raw.shape), states
    return normalize(raw), states


# -- consistency training ---------------------------------------------------

def _centers(boxes) -> np.ndarray:
    if len(boxes) and hasattr(boxes[0], "center"):
        return np.array([b.center for b in boxes], dtype=np.float64)
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1] if arr.size else 4)[:, :2]


def feasibility_mask(boxes_a, boxes_b, v_max: float, delta: int = 1) -> np.ndarray:
    """1 where a normalized center could travel between the two boxes in ``delta`` frames."""
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    delta = abs(int(delta))
    if delta < 1:
        raise ValueError("frame gap must be at least 1")
    ca, cb = _centers(boxes_a), _centers(boxes_b)
    dist = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1))
    return (dist <= v_max * delta).astype(np.float64)


class ConsistencyResult(NamedTuple):
    loss: float
    grad_o1: np.ndarray
    grad_o2: np.ndarray
    clamped_rows: int


def consistency_loss(o1, o2, mask) -> ConsistencyResult:
    """-sum_i log sum_j o1_ij o2_ij c_ij on already-normalized score matrices."""
    o1 = np.asarray(o1, dtype=np.float64)
    o2 = np.asarray(o2, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (o1.shape == o2.shape == mask.shape):
        raise DimensionError(f"shape mismatch: {o1.shape}, {o2.shape}, {mask.shape}")
    inner = (o1 * o2 * mask).sum(axis=1)
    clamped = inner < LOG_CLAMP
    loss = float(-np.log(np.maximum(inner, LOG_CLAMP)).sum())
    coef = np.where(clamped, 0.0, -1.0 / np.where(clamped, 1.0, inner))[:, None]
    return ConsistencyResult(loss, coef * o2 * mask, coef * o1 * mask, int(clamped.sum()))


def consistency_loss_raw(raw1, raw2, mask) -> ConsistencyResult:
    """As :func:`consistency_loss` but from raw scores, with gradients w.r.t. the raw scores."""
    s1, s2 = normalize(raw1), normalize(raw2)
    res = consistency_loss(s1.values, s2.values, mask)
    return ConsistencyResult(
        res.loss,
        normalize_backward(s1.raw, res.grad_o1),
        normalize_backward(s2.raw, res.grad_o2),
        res.clamped_rows,
    )


@dataclass
class FrameObservations:
    """Detections of one frame as arrays: normalized (cx, cy, w, h) boxes and descriptors."""

    boxes: np.ndarray
    descriptors: np.ndarray
    ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class Providers:
    matcher: AppearanceMatcher
    scorer: MotionScorer

    def params(self) -> dict[str, np.ndarray]:
        return {**self.matcher.params(), **self.scorer.params()}


@dataclass
class _Roll:
    boxes: np.ndarray
    hidden: np.ndarray
    # per intermediate frame: (object indices updated, cache)
    trail: list = field(default_factory=list)


def roll_motion(scorer: MotionScorer, window: Sequence[FrameObservations], v_max: float) -> _Roll:
    """Carry first-frame objects through the window's inner frames.

    At each inner frame an object takes the highest-scoring reachable
    detection; objects without a reachable detection coast.
    """
    first = window[0]
    k = len(first)
    boxes = first.boxes.copy()
    hidden = np.zeros((k, scorer.hidden_dim))
    gap = np.ones(k)
    roll = _Roll(boxes, hidden)
    for frame in window[1:-1]:
        if len(frame) == 0:
            gap += 1
            continue
        raw, states, _ = scorer.pair_scores(frame.boxes, roll.boxes, roll.hidden)
        dist = np.sqrt(((frame.boxes[:, None, :2] - roll.boxes[None, :, :2]) ** 2).sum(-1))
        reach = dist <= v_max * gap[None, :]
        masked = np.where(reach, raw, -np.inf)
        best = np.argmax(masked, axis=0)
        moved = np.flatnonzero(reach.any(axis=0))
        if moved.size:
            chosen = best[moved]
            feats = motion_features(frame.boxes[chosen], roll.boxes[moved], scorer.position_scale)
            feats = feats[np.arange(moved.size), np.arange(moved.size)]
            _, new_states, cache = scorer.step(feats, roll.hidden[moved])
            roll.trail.append((moved, cache))
            roll.hidden = roll.hidden.copy()
            roll.hidden[moved] = new_states
            roll.boxes = roll.boxes.copy()
            roll.boxes[moved] = frame.boxes[chosen]
        gap += 1
        gap[moved] = 1
    return roll


def window_loss(providers: Providers, window: Sequence[FrameObservations], v_max: float,
                with_grads: bool = True):
    """J1 on one window plus parameter gradients for both providers."""
    first, last = window[0], window[-1]
    if len(first) == 0 or len(last) == 0:
        return 0.0, {}, 0
    matcher, scorer = providers.matcher, providers.scorer
    raw1 = matcher.raw_scores(first.descriptors, last.descriptors)
    roll = roll_motion(scorer, window, v_max)
    # rows: first-frame objects, columns: last-frame detections
    feats = motion_features(last.boxes, roll.boxes, scorer.position_scale)  # (n_last, k, 8)
    n_last, k = feats.shape[:2]
    hidden_rep = np.tile(roll.hidden, (n_last, 1))
    raw2_t, _, cache = scorer.step(feats.reshape(-1, 8), hidden_rep)
    raw2 = raw2_t.reshape(n_last, k).T
    mask = feasibility_mask(first.boxes, last.boxes, v_max, len(window) - 1)
    res = consistency_loss_raw(raw1, raw2, mask)
    if not with_grads:
        return res.loss, {}, res.clamped_rows
    grads = matcher.backward(first.descriptors, last.descriptors, res.grad_o1)
    g_final, d_h = scorer.step_backward(cache, res.grad_o2.T.reshape(-1), None)
    d_hidden = d_h.reshape(n_last, k, -1).sum(axis=0)
    mot_grads = g_final
    for moved, step_cache in reversed(roll.trail):
        g_step, d_in = scorer.step_backward(step_cache, np.zeros(moved.size), d_hidden[moved])
        mot_grads = {key: mot_grads[key] + g_step[key] for key in mot_grads}
        d_hidden = d_hidden.copy()
        d_hidden[moved] = d_in
    grads.update(mot_grads)
    return res.loss, grads, res.clamped_rows


def sample_window(sequences: Sequence[Sequence[FrameObservations]], length: int,
                  rng: np.random.Generator) -> list[FrameObservations]:
    usable = [s for s in sequences if len(s) >= length]
    if not usable:
        raise ValueError(f"window of {length} frames is longer than every sequence")
    seq = usable[rng.integers(len(usable))]
    start = rng.integers(len(seq) - length + 1)
    return list(seq[start:start + length])


def train_providers(providers: Providers, sequences: Sequence[Sequence[FrameObservations]], window: int,
                    optimizer: Adam, steps: int, rng: np.random.Generator,
                    v_max: float = 0.02) -> tuple[Providers, list[dict]]:
    """Minimize J1 over randomly sampled windows; identities in the data are never read."""
    if window < 2:
        raise ValueError("window must span at least two frames")
    if not any(len(s) >= window for s in sequences):
        raise ValueError(f"window of {window} frames is longer than every sequence")
    params = providers.params()
    trace = []
    for step in range(steps):
        win = sample_window(sequences, window, rng)
        loss, grads, clamped = window_loss(providers, win, v_max)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite consistency loss at step {step}")
        if grads:
            optimizer.step(params, grads)
        trace.append({"step": step, "j1": loss, "rows": len(win[0]), "clamped_rows": clamped})
    return providers, trace


def window_correspondence(providers: Providers, window: Sequence[FrameObservations], v_max: float) -> np.ndarray:
    """Row-argmax of O1 * O2 for each first-frame object."""
    first, last = window[0], window[-1]
    raw1 = providers.matcher.raw_scores(first.descriptors, last.descriptors)
    roll = roll_motion(providers.scorer, window, v_max)
    raw2, _, _ = providers.scorer.pair_scores(last.boxes, roll.boxes, roll.hidden)
    prod = normalize(raw1).values * normalize(raw2.T).values
    return np.argmax(prod, axis=1)


def correspondence_accuracy(providers: Providers, windows: Sequence[Sequence[FrameObservations]],
                            v_max: float) -> float:
    """Fraction of windows whose first-to-last correspondence is recovered for every object."""
    hits = 0
    counted = 0
    for win in windows:
        first, last = win[0], win[-1]
        if first.ids is None or last.ids is None or len(first) == 0 or len(last) == 0:
            continue
        pred = window_correspondence(providers, win, v_max)
        truth = {int(i): j for j, i in enumerate(last.ids)}
        ok = all(truth.get(int(oid)) == pred[r] for r, oid in enumerate(first.ids) if int(oid) in truth)
        hits += ok
        counted += 1
    return hits / counted if counted else 0.0
