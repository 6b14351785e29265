"""Deterministic synthetic crowd scenes with ground-truth identities.

Agents walk in small groups with piecewise-constant velocities and reflect
off the world borders. A panning camera moves the viewport; overlapping boxes
occlude each other, which both hides detections and bleeds the occluder's
appearance into the occluded descriptor.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .graphcon import BoundingBox, Detection
from .numkit import make_rng
from .providers import FrameObservations


@dataclass(frozen=True)
class ScenarioConfig:
    num_agents: int = 20
    num_frames: int = 300
    frame_width: float = 1920.0
    frame_height: float = 1080.0
    world_size: float = 1.0
    speed_min: float = 0.002
    speed_max: float = 0.008
    turn_prob: float = 0.02
    max_group_size: int = 3
    group_spread: float = 0.05
    box_width_min: float = 0.02
    box_width_max: float = 0.03
    box_aspect: float = 2.5
    descriptor_dim: int = 16
    descriptor_separation: float = 0.5
    descriptor_noise: float = 0.0
    occlusion_corruption: float = 1.0
    occlusion_threshold: float = 0.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    box_jitter: float = 0.0
    camera_pan_amplitude: float = 0.0
    camera_pan_period: float = 40.0
    seed: int = 0

    def __post_init__(self):
        rates = ("turn_prob", "occlusion_threshold", "miss_rate", "fp_rate")
        for name in rates:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_agents < 0 or self.num_frames < 0:
            raise ValueError("counts must be nonnegative")
        if self.max_group_size < 1:
            raise ValueError("max_group_size must be at least 1")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("speed range must satisfy 0 < min <= max")
        if not 0 < self.box_width_min <= self.box_width_max:
            raise ValueError("box width range must satisfy 0 < min <= max")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be positive")
        if not -1.0 < self.descriptor_separation <= 1.0:
            raise ValueError("descriptor_separation must lie in (-1, 1]")
        for name in ("descriptor_noise", "occlusion_corruption", "box_jitter", "camera_pan_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.camera_pan_period <= 0 or self.world_size <= 0:
            raise ValueError("camera_pan_period and world_size must be positive")

    def replace(self, **changes) -> "ScenarioConfig":
        return ScenarioConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class GroundTruthRecord:
    frame: int
    track_id: int
    box: BoundingBox
    visibility: float


@dataclass
class Scenario:
    config: ScenarioConfig
    frames: list[list[Detection]]
    # true agent id per detection, -1 for false positives
    truth: list[np.ndarray]
    ground_truth: list[GroundTruthRecord]
    base_descriptors: np.ndarray = field(repr=False, default=None)

    @property
    def num_detections(self) -> int:
        return sum(len(f) for f in self.frames)


def sample_descriptors(count: int, dim: int, separation: float, rng: np.random.Generator,
                       max_tries: int = 10000) -> np.ndarray:
    """Unit vectors whose pairwise cosine stays below ``separation``."""
    out = np.zeros((count, dim))
    for i in range(count):
        for _ in range(max_tries):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(out[:i] @ v) < separation:
                out[i] = v
                break
        else:
            raise ValueError(f"cannot place {count} descriptors in {dim} dims below cosine {separation}")
    return out


def _overlap_area(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection area of two (cx, cy, w, h) boxes."""
    ix = min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2)
    iy = min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2)
    return max(ix, 0.0) * max(iy, 0.0)


def occlusion_pairs(boxes) -> tuple[np.ndarray, np.ndarray]:
    """Visibility fraction per box and the index of its main occluder (-1 if none).

    A box can only be hidden by boxes of larger area; equal areas go to the
    lower index as occluder.
    """
    arr = np.asarray([b.normalized() if isinstance(b, BoundingBox) else b for b in boxes],
                     dtype=np.float64).reshape(-1, 4)
    n = arr.shape[0]
    vis = np.ones(n)
    occluder = np.full(n, -1)
    area = arr[:, 2] * arr[:, 3]
    for i in range(n):
        worst = 0.0
        for k in range(n):
            if k == i:
                continue
            if area[k] > area[i] or (area[k] == area[i] and k < i):
                frac = _overlap_area(arr[i], arr[k]) / area[i]
                if frac > worst:
                    worst, occluder[i] = frac, k
        vis[i] = float(np.clip(1.0 - worst, 0.0, 1.0))
    return vis, occluder


def _assign_groups(n: int, max_size: int, rng: np.random.Generator) -> np.ndarray:
    groups = np.zeros(n, dtype=int)
    i, g = 0, 0
    while i < n:
        size = int(rng.integers(1, max_size + 1))
        groups[i:i + size] = g
        i += size
        g += 1
    return groups


def _group_offsets(groups: np.ndarray, spread: float, min_gap: float, rng: np.random.Generator) -> np.ndarray:
    offsets = np.zeros((groups.size, 2))
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        placed = [np.zeros(2)]
        for _ in members[1:]:
            for _ in range(200):
                r = spread * np.sqrt(rng.uniform(0.25, 1.0))
                theta = rng.uniform(0, 2 * np.pi)
                cand = r * np.array([np.cos(theta), np.sin(theta)])
                if all(np.linalg.norm(cand - p) >= min_gap for p in placed):
                    break
            placed.append(cand)
        offsets[members] = placed
    return offsets


def _random_velocity(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    theta = rng.uniform(0, 2 * np.pi)
    return speed * np.array([np.cos(theta), np.sin(theta)])


def camera_offset(cfg: ScenarioConfig, t: int) -> np.ndarray:
    phase = 2 * np.pi * t / cfg.camera_pan_period
    return cfg.camera_pan_amplitude * np.array([np.sin(phase), 0.5 * np.sin(2 * phase)])


def agent_trajectories(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """World-space agent centers, shape (frames, agents, 2)."""
    n = cfg.num_agents
    pos = np.zeros((cfg.num_frames, n, 2))
    if n == 0:
        return pos
    groups = _assign_groups(n, cfg.max_group_size, rng)
    n_groups = groups.max() + 1
    offsets = _group_offsets(groups, cfg.group_spread, 1.2 * cfg.box_width_max, rng)
    margin = cfg.group_spread + cfg.box_width_max
    lo, hi = margin, cfg.world_size - margin
    anchors = rng.uniform(lo, hi, size=(n_groups, 2))
    vel = np.stack([_random_velocity(cfg, rng) for _ in range(n_groups)])
    for t in range(cfg.num_frames):
        pos[t] = anchors[groups] + offsets
        turns = rng.random(n_groups) < cfg.turn_prob
        for g in np.flatnonzero(turns):
            vel[g] = _random_velocity(cfg, rng)
        anchors = anchors + vel
        for axis in range(2):
            below = anchors[:, axis] < lo
            above = anchors[:, axis] > hi
            anchors[below, axis] = 2 * lo - anchors[below, axis]
            anchors[above, axis] = 2 * hi - anchors[above, axis]
            vel[below | above, axis] *= -1
    return pos


def generate(cfg: ScenarioConfig) -> Scenario:
    rng = make_rng(cfg.seed)
    n, F = cfg.num_agents, cfg.descriptor_dim
    bases = sample_descriptors(n, F, cfg.descriptor_separation, rng)
    widths = rng.uniform(cfg.box_width_min, cfg.box_width_max, size=n)
    heights = widths * cfg.box_aspect * cfg.frame_width / cfg.frame_height
    traj = agent_trajectories(cfg, rng)
    fw, fh = cfg.frame_width, cfg.frame_height

    frames: list[list[Detection]] = []
    truth: list[np.ndarray] = []
    gt: list[GroundTruthRecord] = []
    for t in range(cfg.num_frames):
        frame_no = t + 1
        centers = traj[t] - camera_offset(cfg, t)
        in_view = np.flatnonzero(np.all((centers >= 0.0) & (centers <= 1.0), axis=1)) if n else np.zeros(0, int)
        boxes = np.column_stack([centers[in_view], widths[in_view], heights[in_view]]) if in_view.size else np.zeros((0, 4))
        vis, occ = occlusion_pairs(boxes)
        dets, ids = [], []
        for slot, agent in enumerate(in_view):
            gt_box = BoundingBox.from_normalized(*boxes[slot], fw, fh)
            gt.append(GroundTruthRecord(frame_no, int(agent) + 1, gt_box, float(vis[slot])))
            dropped = rng.random() < cfg.miss_rate
            noise = rng.normal(size=F)
            jitter = rng.normal(size=4)
            if dropped or vis[slot] < cfg.occlusion_threshold:
                continue
            desc = bases[agent] + cfg.descriptor_noise * noise
            if occ[slot] >= 0:
                c = min(1.0, cfg.occlusion_corruption * (1.0 - vis[slot]))
                desc = (1.0 - c) * desc + c * bases[in_view[occ[slot]]]
            cx, cy, w, h = boxes[slot]
            if cfg.box_jitter > 0:
                cx += cfg.box_jitter * w * jitter[0]
                cy += cfg.box_jitter * h * jitter[1]
                w *= float(np.exp(cfg.box_jitter * jitter[2]))
                h *= float(np.exp(cfg.box_jitter * jitter[3]))
            conf = float(np.clip(0.55 + 0.45 * vis[slot] - 0.1 * rng.random(), 0.0, 1.0))
            dets.append(Detection(BoundingBox.from_normalized(cx, cy, w, h, fw, fh), desc, conf, frame_no))
            ids.append(int(agent) + 1)
        n_fp = int(rng.binomial(n, cfg.fp_rate)) if n and cfg.fp_rate > 0 else 0
        for _ in range(n_fp):
            w = rng.uniform(cfg.box_width_min, cfg.box_width_max)
            h = w * cfg.box_aspect * fw / fh
            cx, cy = rng.uniform(0.05, 0.95, size=2)
            v = rng.normal(size=F)
            desc = v / np.linalg.norm(v) + cfg.descriptor_noise * rng.normal(size=F)
            conf = float(rng.uniform(0.3, 0.8))
            dets.append(Detection(BoundingBox.from_normalized(cx, cy, w, h, fw, fh), desc, conf, frame_no))
            ids.append(-1)
        frames.append(dets)
        truth.append(np.array(ids, dtype=int))
    return Scenario(cfg, frames, truth, gt, bases)


def to_observations(scenario: Scenario) -> list[FrameObservations]:
    """Array view of a scenario's detections for provider training."""
    out = []
    F = scenario.config.descriptor_dim
    for dets, ids in zip(scenario.frames, scenario.truth):
        if dets:
            boxes = np.array([d.box.normalized() for d in dets])
            desc = np.stack([d.descriptor for d in dets])
        else:
            boxes, desc = np.zeros((0, 4)), np.zeros((0, F))
        out.append(FrameObservations(boxes, desc, ids.copy()))
    return out


def export_mot(scenario: Scenario, out_dir, name: Optional[str] = None) -> dict[str, Path]:
    """Write ground truth, detections and the descriptor sidecar in MOTChallenge layout.

    Files land in ``out_dir/<name>/{gt/gt.txt, det/det.txt, det/det.desc}``.
    """
    from .motio import MotRecord, write_descriptors, write_records

    root = Path(out_dir) / (name or f"SIM-{scenario.config.seed:04d}")
    (root / "gt").mkdir(parents=True, exist_ok=True)
    (root / "det").mkdir(parents=True, exist_ok=True)
    gt_records = [
        MotRecord(r.frame, r.track_id, *r.box.tlwh(), 1.0, 1, r.visibility)
        for r in scenario.ground_truth
    ]
    det_records, sidecar = [], []
    for dets in scenario.frames:
        for idx, d in enumerate(dets):
            det_records.append(MotRecord(d.frame, -1, *d.box.tlwh(), d.confidence))
            sidecar.append((d.frame, idx, d.descriptor))
    paths = {
        "gt": root / "gt" / "gt.txt",
        "det": root / "det" / "det.txt",
        "desc": root / "det" / "det.desc",
        "seqinfo": root / "seqinfo.ini",
    }
    write_records(paths["gt"], gt_records, sort=False)
    write_records(paths["det"], det_records, sort=False)
    write_descriptors(paths["desc"], sidecar)
    cfg = scenario.config
    paths["seqinfo"].write_text(
        "[Sequence]\n"
        f"name={root.name}\n"
        f"seqLength={cfg.num_frames}\n"
        f"imWidth={int(cfg.frame_width)}\n"
        f"imHeight={int(cfg.frame_height)}\n"
    )
    return paths
