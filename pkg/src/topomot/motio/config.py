"""Run configuration as a single JSON document."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..assoc import FusionWeights, TrackerConfig
from ..graphcon import DistanceThreshold, FullyConnected, GraphStrategy, KNearest
from ..topognn import AugmentConfig, GnnLossConfig

SEED_ENV = "TOPOMOT_SEED"
STRATEGIES = ("threshold", "knn", "full")


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    alpha: float = 0.7
    betas: list[float] = field(default_factory=lambda: [0.2, 0.1])
    layers: Optional[int] = None
    strategy: str = "threshold"
    t_box: float = 0.1
    k: int = 3
    gamma: float = 0.8
    epsilon: float = 0.01
    p1: float = 0.1
    p2: float = 0.1
    p3: float = 0.1
    gnn_lr: float = 2e-6
    provider_lr: float = 1e-3
    gnn_dims: list[int] = field(default_factory=list)
    gnn_nonlinear: bool = False
    gnn_steps: int = 500
    provider_steps: int = 2000
    provider_hidden: int = 64
    window: int = 8
    v_max: float = 0.02
    tau_match: float = 0.05
    tau_det: float = 0.4
    max_age: int = 30
    history: int = 6
    solver: str = "greedy"
    iou_threshold: float = 0.5
    gt_classes: Optional[list[int]] = field(default_factory=lambda: [1])
    gt_require_active: bool = True
    gt_min_visibility: float = 0.0
    seed: Optional[int] = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        self.betas = [float(b) for b in self.betas]
        if self.layers is None:
            self.layers = len(self.betas)
        if self.layers != len(self.betas):
            raise ConfigError(f"layers={self.layers} but {len(self.betas)} beta weights were given")
        try:
            FusionWeights(float(self.alpha), tuple(self.betas))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.gnn_dims:
            self.gnn_dims = [16] * self.layers
        if len(self.gnn_dims) != self.layers:
            raise ConfigError(f"gnn_dims has {len(self.gnn_dims)} entries for {self.layers} layers")
        for name in ("gnn_lr", "provider_lr", "t_box", "v_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.window < 2:
            raise ConfigError("window must span at least 2 frames")
        if self.seed is None:
            self.seed = default_seed()
        try:
            self.augment
            self.loss
            self.tracker
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def weights(self) -> FusionWeights:
        return FusionWeights(float(self.alpha), tuple(self.betas))

    @property
    def graph_strategy(self) -> GraphStrategy:
        if self.strategy == "threshold":
            return DistanceThreshold(self.t_box)
        if self.strategy == "knn":
            return KNearest(self.k)
        return FullyConnected()

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.p1, self.p2, self.p3, self.epsilon)

    @property
    def loss(self) -> GnnLossConfig:
        return GnnLossConfig(self.gamma)

    @property
    def tracker(self) -> TrackerConfig:
        return TrackerConfig(self.weights, self.graph_strategy, self.tau_match, self.tau_det,
                             self.max_age, self.history, self.solver)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None) -> RunConfig:
    """Read a JSON config; ``None`` gives the defaults. Missing keys take defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
