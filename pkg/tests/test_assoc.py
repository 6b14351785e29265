from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_assignment

from topomot.assoc import (AssociationResult, FusionWeights, Models, Observation, SimilarityBundle, Tracker,
                           TrackerConfig, Tracklet, averaged_scores, fuse, greedy_match, hungarian_match,
                           track_sequence)
from topomot.graphcon import BoundingBox, Detection
from topomot.numkit import DimensionError, make_rng
from topomot.pipeline import init_providers
from topomot.topognn import GcnStack

scores = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 1)))


def test_fusion_weights_validation():
    FusionWeights(0.5, (0.5,))
    with pytest.raises(ValueError, match="alpha"):
        FusionWeights(0.5, (0.6,))
    with pytest.raises(ValueError):
        FusionWeights(1.2, (-0.2,))


def test_fuse_examples():
    a, m = np.array([[0.9]]), np.array([[0.5]])
    g1, g2 = np.array([[0.8]]), np.array([[0.6]])
    assert fuse(SimilarityBundle(a, m, [g1, g2]), FusionWeights()) == pytest.approx(0.57)
    assert fuse(SimilarityBundle(a, m), FusionWeights(1.0, ())) == 0.5
    c = np.full((2, 3), 0.37)
    np.testing.assert_allclose(fuse(SimilarityBundle(c, c, [c, c]), FusionWeights()), c)


def test_fuse_falls_back_without_topology():
    a, m = np.array([[0.9, 0.2]]), np.array([[0.5, 0.4]])
    g = [np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]])]
    assert fuse(SimilarityBundle(a, m), FusionWeights()).tolist() == [[0.5, 0.2]]
    out = fuse(SimilarityBundle(a, m, g, np.array([True, False])), FusionWeights())
    assert out[0, 0] == pytest.approx(0.7 * 0.5 + 0.3)
    assert out[0, 1] == 0.2


def test_fuse_shape_errors():
    with pytest.raises(DimensionError):
        SimilarityBundle(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        fuse(SimilarityBundle(np.zeros((1, 1)), np.zeros((1, 1)), [np.zeros((1, 1))]), FusionWeights())


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
def test_fuse_monotone(sa, sm, g1, g2, bump):
    w = FusionWeights()
    base = fuse(SimilarityBundle([[sa]], [[sm]], [[[g1]], [[g2]]]), w)[0, 0]
    for k in range(4):
        vals = [sa, sm, g1, g2]
        vals[k] += bump
        cur = fuse(SimilarityBundle([[vals[0]]], [[vals[1]]], [[[vals[2]]], [[vals[3]]]]), w)[0, 0]
        assert cur >= base - 1e-15


def test_greedy_examples():
    s = np.array([[0.9, 0.1], [0.8, 0.7]])
    res = greedy_match(s, 0.0)
    assert [(m.detection, m.track_id, m.score) for m in res.matches] == [(0, 0, 0.9), (1, 1, 0.7)]
    assert hungarian_match(s, 0.0).total == pytest.approx(1.6)
    diag = np.eye(4) + 0.01
    assert sorted((m.detection, m.track_id) for m in greedy_match(diag).matches) == [(i, i) for i in range(4)]
    none = greedy_match(s, 0.95)
    assert none.matches == [] and none.unmatched_detections == [0, 1] and none.unmatched_tracklets == [0, 1]


def test_hungarian_examples():
    s = np.array([[0.5, 0.4], [0.6, 0.1]])
    h, g = hungarian_match(s), greedy_match(s)
    assert h.total == pytest.approx(1.0) and g.total == pytest.approx(1.0)
    assert h.total == pytest.approx(brute_force_assignment(s))
    one = hungarian_match(np.array([[0.3]]), 0.1)
    assert [(m.detection, m.track_id) for m in one.matches] == [(0, 0)]
    assert hungarian_match(np.zeros((0, 3))).unmatched_tracklets == [0, 1, 2]


def test_greedy_ties_are_lexicographic():
    res = greedy_match(np.full((2, 2), 0.5))
    assert [(m.detection, m.track_id) for m in res.matches] == [(0, 0), (1, 1)]


def test_track_ids_are_reported():
    res = greedy_match(np.array([[0.2, 0.9]]), 0.0, track_ids=[17, 4])
    assert res.matches[0].track_id == 4 and res.unmatched_tracklets == [17]


@given(scores, st.floats(0.01, 100))
def test_greedy_scale_invariance(s, c):
    a = {(m.detection, m.track_id) for m in greedy_match(s, 0.0).matches}
    b = {(m.detection, m.track_id) for m in greedy_match(c * s, 0.0).matches}
    if len(np.unique(s)) == s.size:
        assert a == b


@settings(max_examples=200)
@given(scores)
def test_greedy_half_of_optimum(s):
    opt = brute_force_assignment(s)
    assert greedy_match(s).total >= 0.5 * opt - 1e-12
    assert hungarian_match(s).total == pytest.approx(opt, abs=1e-12)


def _tracklet(desc_list, emb_list=None):
    buf = deque(maxlen=6)
    for i, d in enumerate(desc_list):
        emb = [np.asarray(emb_list[i])] if emb_list is not None else None
        buf.append(Observation(np.zeros(4), np.asarray(d, dtype=float), emb))
    return Tracklet(1, BoundingBox(0, 0, 10, 10), np.zeros(4), buf)


class LinearMatcher:
    """Raw score is the first descriptor entry of the stored observation."""

    def raw_scores(self, det, trk):
        return np.repeat(np.asarray(trk)[:, 0][None, :], det.shape[0], axis=0)


def test_averaged_scores_examples():
    det = Detection(BoundingBox(0, 0, 10, 10), np.array([1.0, 0.0]))
    t = _tracklet([[0.2, 0.0], [0.4, 0.0], [0.6, 0.0]])
    assert averaged_scores(t, det, LinearMatcher())["appearance"] == pytest.approx(0.4)
    one = _tracklet([[0.3, 0.0]])
    assert averaged_scores(one, det, LinearMatcher())["appearance"] == pytest.approx(0.3)
    same = _tracklet([[1.0, 2.0]] * 4, [[1.0, 0.0]] * 4)
    single = _tracklet([[1.0, 2.0]], [[1.0, 0.0]])
    rng = make_rng(0)
    matcher = init_providers(2, rng).matcher
    emb = [np.array([0.6, 0.8])]
    a = averaged_scores(same, det, matcher, emb)
    b = averaged_scores(single, det, matcher, emb)
    assert a["appearance"] == pytest.approx(b["appearance"])
    assert a["topology"] == pytest.approx(b["topology"])
    assert a["topology"] == pytest.approx([0.6])


def _dets(frame, centers, descs, conf=0.9):
    out = []
    for (cx, cy), d in zip(centers, descs):
        out.append(Detection(BoundingBox.from_normalized(cx, cy, 0.02, 0.05), np.asarray(d, float), conf, frame))
    return out


@pytest.fixture(scope="module")
def providers():
    return init_providers(3, make_rng(1))


def test_tracker_first_frame_and_empty_frame(providers):
    tracker = Tracker(Models(providers), TrackerConfig(weights=FusionWeights(1.0, ())))
    res, recs = tracker.step(1, _dets(1, [(0.2, 0.2), (0.5, 0.5)], np.eye(3)[:2]))
    assert res.matches == [] and [r.track_id for r in recs] == [1, 2]
    res, recs = tracker.step(2, [])
    assert res.matches == [] and recs == []
    assert [t.frames_since_seen for t in tracker.tracklets] == [1, 1]
    with pytest.raises(ValueError):
        tracker.step(2, [])


def test_tracker_gates_low_confidence_and_retires(providers):
    cfg = TrackerConfig(weights=FusionWeights(1.0, ()), max_age=2)
    tracker = Tracker(Models(providers), cfg)
    tracker.step(1, _dets(1, [(0.2, 0.2)], [np.ones(3)], conf=0.2))
    assert tracker.tracklets == []
    tracker.step(2, _dets(2, [(0.2, 0.2)], [np.ones(3)]))
    for f in (3, 4, 5):
        tracker.step(f, [])
    assert tracker.tracklets == []
    _, recs = tracker.step(6, _dets(6, [(0.2, 0.2)], [np.ones(3)]))
    assert recs[0].track_id == 2


def test_tracker_requires_gnn_for_topology(providers):
    with pytest.raises(ValueError):
        Tracker(Models(providers), TrackerConfig())
    stack = GcnStack.init(3, [4], make_rng(0))
    from topomot.graphcon import default_edge_layer
    with pytest.raises(DimensionError):
        Tracker(Models(providers, stack, default_edge_layer(3, make_rng(0))), TrackerConfig())


def test_track_sequence_examples(providers):
    cfg = TrackerConfig(weights=FusionWeights(1.0, ()))
    assert track_sequence([], Models(providers), cfg) == []
    recs = track_sequence([_dets(1, [(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)], np.eye(3))], Models(providers), cfg)
    assert [(r.frame, r.track_id) for r in recs] == [(1, 1), (1, 2), (1, 3)]


def test_track_sequence_deterministic_and_ids_unique(providers):
    rng = make_rng(3)
    frames = []
    pos = rng.random((4, 2)) * 0.6 + 0.2
    for f in range(1, 30):
        pos = pos + rng.normal(scale=0.003, size=pos.shape)
        keep = rng.random(4) > 0.2
        frames.append(_dets(f, pos[keep], np.eye(3)[np.arange(4)[keep] % 3]))
    cfg = TrackerConfig(weights=FusionWeights(1.0, ()))
    a = track_sequence(frames, Models(providers), cfg)
    b = track_sequence(frames, Models(providers), cfg)
    assert a == b
    seen = {(r.frame, r.track_id) for r in a}
    assert len(seen) == len(a)


def test_hungarian_solver_option(providers):
    cfg = TrackerConfig(weights=FusionWeights(1.0, ()), solver="hungarian")
    recs = track_sequence([_dets(1, [(0.1, 0.1)], [np.ones(3)]), _dets(2, [(0.1, 0.1)], [np.ones(3)])],
                          Models(providers), cfg)
    assert [r.track_id for r in recs] == [1, 1]
    with pytest.raises(ValueError):
        TrackerConfig(solver="auction")
