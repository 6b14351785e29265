"""Per-frame object graphs.

A frame's detections become nodes; edges join spatially close boxes and carry
a weight in (0, 1) produced by a small learned layer. The GCN consumes the
self-looped, symmetrically normalized edge matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .numkit import DimensionError, FeedForwardLayer, ff_forward


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    width: float
    height: float
    frame_width: float = 1920.0
    frame_height: float = 1080.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"box must have positive size, got {self.width}x{self.height}")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError("frame dimensions must be positive")

    @property
    def center(self) -> tuple[float, float]:
        """Center in frame-normalized coordinates."""
        return (
            (self.left + self.width / 2) / self.frame_width,
            (self.top + self.height / 2) / self.frame_height,
        )

    def normalized(self) -> np.ndarray:
        """(cx, cy, w, h) in frame-normalized units."""
        cx, cy = self.center
        return np.array([cx, cy, self.width / self.frame_width, self.height / self.frame_height])

    def tlwh(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)

    @classmethod
    def from_normalized(cls, cx: float, cy: float, w: float, h: float,
                        frame_width: float = 1920.0, frame_height: float = 1080.0) -> "BoundingBox":
        return cls(
            (cx - w / 2) * frame_width,
            (cy - h / 2) * frame_height,
            w * frame_width,
            h * frame_height,
            frame_width,
            frame_height,
        )


@dataclass
class Detection:
    box: BoundingBox
    descriptor: np.ndarray
    confidence: float = 1.0
    frame: int = 1

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.descriptor)):
            raise ValueError("descriptor must be finite")


@dataclass(frozen=True)
class DistanceThreshold:
    t_box: float = 0.1

    def __post_init__(self):
        if self.t_box <= 0:
            raise ValueError("t_box must be positive")


@dataclass(frozen=True)
class KNearest:
    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True)
class FullyConnected:
    pass


GraphStrategy = Union[DistanceThreshold, KNearest, FullyConnected]


@dataclass
class FrameGraph:
    features: np.ndarray
    weights: np.ndarray
    boxes: list[BoundingBox] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n == 0

    @property
    def binary(self) -> np.ndarray:
        return (self.weights > 0).astype(np.float64)

    @classmethod
    def empty(cls, feature_dim: int = 0) -> "FrameGraph":
        return cls(np.zeros((0, feature_dim)), np.zeros((0, 0)), [])

    def permuted(self, perm: Sequence[int]) -> "FrameGraph":
        perm = np.asarray(perm, dtype=int)
        return FrameGraph(
            self.features[perm],
            self.weights[np.ix_(perm, perm)],
            [self.boxes[i] for i in perm] if self.boxes else [],
        )


def box_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between frame-normalized box centers."""
    if (a.frame_width, a.frame_height) != (b.frame_width, b.frame_height):
        raise DimensionError("boxes come from frames of different sizes")
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


def center_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    return np.array([b.center for b in boxes], dtype=np.float64).reshape(len(boxes), 2)


def pairwise_center_distances(boxes: Sequence[BoundingBox]) -> np.ndarray:
    c = center_array(boxes)
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def build_edges(boxes: Sequence[BoundingBox], strategy: GraphStrategy) -> np.ndarray:
    """Binary symmetric adjacency with zero diagonal."""
    n = len(boxes)
    adj = np.zeros((n, n))
    if n <= 1:
        return adj
    if isinstance(strategy, FullyConnected):
        adj[:] = 1.0
    else:
        dist = pairwise_center_distances(boxes)
        if isinstance(strategy, DistanceThreshold):
            adj[dist < strategy.t_box] = 1.0
        elif isinstance(strategy, KNearest):
            masked = dist.copy()
            np.fill_diagonal(masked, np.inf)
            k = min(strategy.k, n - 1)
            nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
            rows = np.repeat(np.arange(n), k)
            adj[rows, nearest.ravel()] = 1.0
            adj = np.maximum(adj, adj.T)
        else:
            raise TypeError(f"unknown graph strategy {strategy!r}")
    np.fill_diagonal(adj, 0.0)
    return adj


def edge_input_dim(feature_dim: int) -> int:
    return 2 * feature_dim + 8


def default_edge_layer(feature_dim: int, rng: np.random.Generator, scale: float = 0.1) -> FeedForwardLayer:
    return FeedForwardLayer.init(edge_input_dim(feature_dim), 1, rng, activation="sigmoid", scale=scale)


def _edge_inputs(xi: np.ndarray, xj: np.ndarray, bi: np.ndarray, bj: np.ndarray) -> np.ndarray:
    return np.concatenate([xi, xj, bi, bj], axis=-1)


def edge_weight(layer: FeedForwardLayer, xi, xj, bi: BoundingBox, bj: BoundingBox) -> float:
    """Weight for one ordered pair: sigmoid layer over [x_i, x_j, box_i, box_j]."""
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if layer.n_in != edge_input_dim(xi.size) or xi.size != xj.size:
        raise DimensionError(
            f"edge layer expects {layer.n_in} inputs, got descriptors of size {xi.size} and {xj.size}"
        )
    if layer.activation != "sigmoid":
        raise ValueError("edge layer must use a sigmoid output")
    return float(ff_forward(layer, _edge_inputs(xi, xj, bi.normalized(), bj.normalized()))[0])


def edge_weight_matrix(layer: FeedForwardLayer, features: np.ndarray, boxes: Sequence[BoundingBox],
                       binary: np.ndarray) -> np.ndarray:
    """Symmetrized weights on the edges of ``binary``; zero elsewhere."""
    n = features.shape[0]
    weights = np.zeros((n, n))
    rows, cols = np.nonzero(np.triu(binary, 1))
    if rows.size == 0:
        return weights
    if layer.n_in != edge_input_dim(features.shape[1]):
        raise DimensionError(f"edge layer expects {layer.n_in} inputs for {features.shape[1]}-dim features")
    nb = np.array([b.normalized() for b in boxes])
    fwd = ff_forward(layer, _edge_inputs(features[rows], features[cols], nb[rows], nb[cols]))[:, 0]
    bwd = ff_forward(layer, _edge_inputs(features[cols], features[rows], nb[cols], nb[rows]))[:, 0]
    # sigmoid can underflow to exactly 0, which would silently drop the edge
    w = np.maximum(0.5 * (fwd + bwd), 1e-12)
    weights[rows, cols] = w
    weights[cols, rows] = w
    return weights


def build_graph(dets: Sequence[Detection], strategy: GraphStrategy, weight_layer: FeedForwardLayer) -> FrameGraph:
    if len(dets) == 0:
        dim = max(0, (weight_layer.n_in - 8) // 2)
        return FrameGraph.empty(dim)
    dims = {d.descriptor.size for d in dets}
    if len(dims) != 1:
        raise DimensionError(f"descriptors of mixed dimension {sorted(dims)}")
    features = np.stack([d.descriptor for d in dets])
    boxes = [d.box for d in dets]
    binary = build_edges(boxes, strategy)
    return FrameGraph(features, edge_weight_matrix(weight_layer, features, boxes, binary), boxes)


def propagation_matrix(g: FrameGraph) -> np.ndarray:
    """D^-1/2 (E + I) D^-1/2 with D the degree of the binary self-looped graph."""
    e_hat = g.weights + np.eye(g.n)
    deg = 1.0 + g.binary.sum(axis=1)
    r = 1.0 / np.sqrt(deg)
    return e_hat * r[:, None] * r[None, :]


def power_sum_target(g: FrameGraph, l: int) -> np.ndarray:
    """Normalized sum of the first ``l`` powers of E + I."""
    if l < 1:
        raise ValueError("power count must be at least 1")
    e_hat = g.weights + np.eye(g.n)
    acc = np.zeros_like(e_hat)
    power = np.eye(g.n)
    for _ in range(l):
        power = power @ e_hat
        acc += power
    deg = acc.sum(axis=1)
    if np.any(deg <= 0):
        raise ArithmeticError("power-sum degree is not positive")
    r = 1.0 / np.sqrt(deg)
    return acc * r[:, None] * r[None, :]
