"""Glue between the simulator, training loops, tracker and evaluation."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .assoc import Models, TrackerConfig, TrackRecord, track_sequence
from .graphcon import Detection, FrameGraph, GraphStrategy, build_graph, default_edge_layer
from .numkit import Adam
from .providers import AppearanceMatcher, FrameObservations, MotionScorer, Providers, train_providers
from .simgen import Scenario, to_observations
from .topognn import AugmentConfig, GcnStack, GnnLossConfig, train_gnn


def init_providers(feature_dim: int, rng: np.random.Generator, hidden_dim: int = 64) -> Providers:
    return Providers(AppearanceMatcher.init(feature_dim, rng, hidden_dim), MotionScorer.init(rng, hidden_dim))


def observations(frames: Sequence[Sequence[Detection]], feature_dim: int) -> list[FrameObservations]:
    """Array view of unlabeled detection frames."""
    out = []
    for dets in frames:
        if dets:
            out.append(FrameObservations(np.array([d.box.normalized() for d in dets]),
                                         np.stack([d.descriptor for d in dets])))
        else:
            out.append(FrameObservations(np.zeros((0, 4)), np.zeros((0, feature_dim))))
    return out


def fit_providers(providers: Providers, sequences, rng: np.random.Generator, steps: int,
                  lr: float, window: int = 8, v_max: float = 0.02):
    """Train on scenarios or on plain lists of detection frames (identities are never used)."""
    F = providers.matcher.feature_dim
    seqs = [to_observations(s) if isinstance(s, Scenario) else observations(s, F) for s in sequences]
    return train_providers(providers, seqs, window, Adam(lr=lr), steps, rng, v_max)


def frame_graphs(frames: Sequence[Sequence[Detection]], strategy: GraphStrategy, edge_layer) -> list[FrameGraph]:
    """Graphs of every frame with at least two detections."""
    return [build_graph(d, strategy, edge_layer) for d in frames if len(d) >= 2]


def fit_gnn(feature_dim: int, scenarios: Sequence[Sequence[Sequence[Detection]]] | Sequence[Scenario],
            dims: Sequence[int], strategy: GraphStrategy, rng: np.random.Generator, steps: int, lr: float,
            augment: AugmentConfig = AugmentConfig(), loss: GnnLossConfig = GnnLossConfig(),
            nonlinear: bool = False, edge_layer=None):
    """Initialize and train a GCN stack on the frame graphs of the given sequences."""
    edge_layer = edge_layer if edge_layer is not None else default_edge_layer(feature_dim, rng)
    stack = GcnStack.init(feature_dim, dims, rng, nonlinear)
    graphs = []
    for s in scenarios:
        frames = s.frames if isinstance(s, Scenario) else s
        graphs.extend(frame_graphs(frames, strategy, edge_layer))
    order = rng.permutation(len(graphs))
    graphs = [graphs[i] for i in order]
    stack, history = train_gnn(stack, graphs, augment, loss, Adam(lr=lr), steps, rng, edge_layer)
    return stack, edge_layer, history


def track_scenario(scenario: Scenario, models: Models, config: TrackerConfig = TrackerConfig()) -> list[TrackRecord]:
    return track_sequence(scenario.frames, models, config)


def scenario_eval(scenario: Scenario, tracks: Sequence[TrackRecord], iou_threshold: float = 0.5,
                  name: Optional[str] = None):
    from .motio.metrics import evaluate
    from .motio.records import MotRecord, track_records

    gt = [MotRecord(r.frame, r.track_id, *r.box.tlwh(), 1.0, 1, r.visibility) for r in scenario.ground_truth]
    return evaluate(gt, track_records(tracks), iou_threshold, name or f"SIM-{scenario.config.seed:04d}")
