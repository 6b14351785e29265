"""Graph convolutional embedding of intra-frame topology.

The stack propagates node descriptors through ``L`` GCN layers and keeps every
layer's output. Training is unsupervised: a layer-wise reconstruction loss
ties the cosine Gram matrix of each layer to the normalized power sums of the
edge matrix, and an adaptivity loss keeps embeddings stable under random graph
augmentation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graphcon import BoundingBox, FrameGraph, edge_weight_matrix, power_sum_target, propagation_matrix
from .numkit import (
    Adam,
    DimensionError,
    FeedForwardLayer,
    cosine_matrix,
    normalize_rows,
    normalize_rows_backward,
    sigmoid,
)


@dataclass
class GcnStack:
    weights: list[np.ndarray]
    use_nonlinearity: bool = False

    def __post_init__(self):
        if not self.weights:
            raise ValueError("a GCN stack needs at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionError(f"layer dims do not chain: {a.shape} -> {b.shape}")

    @classmethod
    def init(cls, in_dim: int, dims: Sequence[int], rng: np.random.Generator,
             use_nonlinearity: bool = False) -> "GcnStack":
        weights = []
        prev = in_dim
        for d in dims:
            bound = np.sqrt(6.0 / (prev + d))
            weights.append(rng.uniform(-bound, bound, size=(prev, d)))
            prev = d
        return cls(weights, use_nonlinearity)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {f"W{i}": w for i, w in enumerate(self.weights)}

    def copy(self) -> "GcnStack":
        return GcnStack([w.copy() for w in self.weights], self.use_nonlinearity)


@dataclass
class EmbeddingSet:
    layers: list[np.ndarray]
    # cached forward intermediates, used by the loss gradients
    propagated: list[np.ndarray] = field(default_factory=list, repr=False)
    preact: list[np.ndarray] = field(default_factory=list, repr=False)
    adjacency: Optional[np.ndarray] = field(default=None, repr=False)

    def __getitem__(self, l: int) -> np.ndarray:
        """1-based layer access."""
        return self.layers[l - 1]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class AugmentConfig:
    p1: float = 0.1
    p2: float = 0.1
    p3: float = 0.1
    epsilon: float = 0.01

    def __post_init__(self):
        for name in ("p1", "p2", "p3"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass(frozen=True)
class GnnLossConfig:
    gamma: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def _relu_between(stack: GcnStack, l: int) -> bool:
    return stack.use_nonlinearity and l < stack.num_layers - 1


def gcn_forward(stack: GcnStack, g: FrameGraph) -> EmbeddingSet:
    if g.is_empty:
        raise ValueError("cannot embed an empty graph")
    if g.features.shape[1] != stack.in_dim:
        raise DimensionError(f"node features have dim {g.features.shape[1]}, stack expects {stack.in_dim}")
    adj = propagation_matrix(g)
    h = g.features
    layers, propagated, preact = [], [], []
    for l, w in enumerate(stack.weights):
        p = adj @ h
        z = p @ w
        h = np.maximum(z, 0.0) if _relu_between(stack, l) else z
        propagated.append(p)
        preact.append(z)
        layers.append(h)
    return EmbeddingSet(layers, propagated, preact, adj)


def _backprop(stack: GcnStack, emb: EmbeddingSet, d_layers: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Weight gradients given a loss gradient for each layer's output."""
    grads = {}
    carry = np.zeros_like(emb.layers[-1])
    for l in range(stack.num_layers - 1, -1, -1):
        dh = d_layers[l] + carry
        if _relu_between(stack, l):
            dh = dh * (emb.preact[l] > 0)
        grads[f"W{l}"] = emb.propagated[l].T @ dh
        carry = emb.adjacency.T @ (dh @ stack.weights[l].T)
    return grads


def _add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray], wa: float = 1.0, wb: float = 1.0):
    return {k: wa * a[k] + wb * b[k] for k in a}


def reconstruction_terms(emb: EmbeddingSet, g: FrameGraph) -> tuple[list[float], list[np.ndarray]]:
    """Per-layer Frobenius reconstruction error and its gradient w.r.t. each layer output."""
    values, d_layers = [], []
    for l, h in enumerate(emb.layers, start=1):
        unit, norms = normalize_rows(h)
        resid = unit @ unit.T - power_sum_target(g, l)
        val = float(np.linalg.norm(resid))
        values.append(val)
        if val == 0.0:
            d_layers.append(np.zeros_like(h))
            continue
        d_unit = 2.0 * (resid / val) @ unit
        d_layers.append(normalize_rows_backward(unit, norms, d_unit))
    return values, d_layers


def reconstruction_loss(stack: GcnStack, g: FrameGraph) -> tuple[float, dict[str, np.ndarray]]:
    """Sum over layers of ||target_l - U_l U_l^T||_F with U_l the row-normalized embeddings."""
    if g.is_empty:
        raise ValueError("reconstruction loss of an empty graph")
    emb = gcn_forward(stack, g)
    values, d_layers = reconstruction_terms(emb, g)
    return float(sum(values)), _backprop(stack, emb, d_layers)


def augment(g: FrameGraph, cfg: AugmentConfig, rng: np.random.Generator,
            edge_layer: Optional[FeedForwardLayer] = None) -> tuple[FrameGraph, np.ndarray]:
    """Random edge flips, node drops and feature/box jitter.

    Returns the augmented graph and ``corr`` where augmented node ``k``
    corresponds to original node ``corr[k]``. Added edges take their weight
    from ``edge_layer`` when given, otherwise the mean existing weight.
    """
    n = g.n
    if n == 0:
        raise ValueError("cannot augment an empty graph")
    binary = g.binary
    weights = g.weights.copy()
    iu, ju = np.triu_indices(n, 1)
    flip = rng.random(iu.size) < cfg.p1
    present = binary[iu, ju] > 0
    existing = weights[iu, ju][present]
    fill = float(existing.mean()) if existing.size else 0.5
    for a, b, was in zip(iu[flip], ju[flip], present[flip]):
        w = 0.0 if was else fill
        weights[a, b] = weights[b, a] = w

    keep = rng.random(n) >= cfg.p2
    if not keep.any():
        keep[rng.integers(n)] = True
    corr = np.flatnonzero(keep)

    features = g.features.copy()
    boxes = list(g.boxes)
    touched = rng.random(n) < cfg.p3
    for i in np.flatnonzero(touched):
        noise = rng.normal(size=features.shape[1])
        features[i] = features[i] + cfg.epsilon * (np.abs(features[i]) + 1.0) * noise
        if boxes:
            b = boxes[i]
            cx, cy = b.center
            dx, dy = cfg.epsilon * rng.normal(size=2)
            boxes[i] = BoundingBox.from_normalized(
                cx + dx, cy + dy, b.width / b.frame_width, b.height / b.frame_height,
                b.frame_width, b.frame_height,
            )

    features = features[corr]
    weights = weights[np.ix_(corr, corr)]
    boxes = [boxes[i] for i in corr] if boxes else []
    if edge_layer is not None and boxes:
        weights = edge_weight_matrix(edge_layer, features, boxes, (weights > 0).astype(np.float64))
    return FrameGraph(features, weights, boxes), corr


def adaptivity_terms(emb: EmbeddingSet, emb_aug: EmbeddingSet, corr: np.ndarray):
    """Sum of sigmoid(||u_i - u_bar_k||) over matched pairs and layers, with gradients."""
    total = 0.0
    d_orig, d_aug = [], []
    for h, hb in zip(emb.layers, emb_aug.layers):
        u, nu = normalize_rows(h)
        ub, nub = normalize_rows(hb)
        diff = u[corr] - ub
        dist = np.linalg.norm(diff, axis=1)
        s = sigmoid(dist)
        total += float(s.sum())
        coef = np.where(dist > 0, s * (1.0 - s) / np.where(dist > 0, dist, 1.0), 0.0)
        dd = coef[:, None] * diff
        du = np.zeros_like(u)
        np.add.at(du, corr, dd)
        d_orig.append(normalize_rows_backward(u, nu, du))
        d_aug.append(normalize_rows_backward(ub, nub, -dd))
    return total, d_orig, d_aug


def adaptivity_loss(stack: GcnStack, g: FrameGraph, g_aug: FrameGraph,
                    corr: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    corr = np.asarray(corr, dtype=int)
    if corr.size == 0:
        raise ValueError("adaptivity loss needs at least one corresponding node")
    if corr.size != g_aug.n:
        raise DimensionError("correspondence length must equal the augmented node count")
    emb = gcn_forward(stack, g)
    emb_aug = gcn_forward(stack, g_aug)
    total, d_orig, d_aug = adaptivity_terms(emb, emb_aug, corr)
    grads = _add_grads(_backprop(stack, emb, d_orig), _backprop(stack, emb_aug, d_aug))
    return total, grads


def combine_losses(recon: float, adapt: float, gamma: float) -> float:
    return gamma * recon + (1.0 - gamma) * adapt


def combined_loss(stack: GcnStack, g: FrameGraph, cfg_aug: AugmentConfig, cfg_loss: GnnLossConfig,
                  rng: np.random.Generator, edge_layer: Optional[FeedForwardLayer] = None):
    """J2 = gamma * J_r + (1 - gamma) * J_a on one graph and a fresh augmentation of it.

    Returns ``(j2, grads, parts)`` where ``parts`` holds the two loss values.
    """
    g_aug, corr = augment(g, cfg_aug, rng, edge_layer)
    jr, gr = reconstruction_loss(stack, g)
    ja, ga = adaptivity_loss(stack, g, g_aug, corr)
    gamma = cfg_loss.gamma
    j2 = combine_losses(jr, ja, gamma)
    return j2, _add_grads(gr, ga, gamma, 1.0 - gamma), {"recon": jr, "adapt": ja}


def train_gnn(stack: GcnStack, graphs: Sequence[FrameGraph], cfg_aug: AugmentConfig, cfg_loss: GnnLossConfig,
              optimizer: Adam, steps: int, rng: np.random.Generator,
              edge_layer: Optional[FeedForwardLayer] = None) -> tuple[GcnStack, list[dict]]:
    """Cycle over per-frame graphs, one optimizer step per graph."""
    usable = [g for g in graphs if not g.is_empty]
    if not usable:
        raise ValueError("training needs at least one nonempty graph")
    params = stack.params()
    history = []
    for step in range(steps):
        g = usable[step % len(usable)]
        j2, grads, parts = combined_loss(stack, g, cfg_aug, cfg_loss, rng, edge_layer)
        if not np.isfinite(j2):
            raise FloatingPointError(f"non-finite GNN loss at step {step}")
        optimizer.step(params, grads)
        history.append({"step": step, "j2": j2, **parts})
    return stack, history


def topo_similarity(det_emb, trk_emb, layer: int = 1) -> np.ndarray:
    """Cosine similarity between detection and stored tracklet embeddings at one layer.

    ``det_emb`` is an :class:`EmbeddingSet` or an (n x d) matrix; ``trk_emb`` is (m x d).
    """
    h = det_emb[layer] if isinstance(det_emb, EmbeddingSet) else np.asarray(det_emb, dtype=np.float64)
    t = np.asarray(trk_emb, dtype=np.float64)
    if t.size == 0:
        return np.zeros((h.shape[0], 0))
    return cosine_matrix(h, t.reshape(t.shape[0], -1))

