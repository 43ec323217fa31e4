"""Keyframe factor-graph construction: vertices, edge planning, keyframe selection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .geometry import Intrinsics, Pose
from .residuals import FlowObservation, grid_pixels, in_bounds


@dataclass(eq=False)
class Keyframe:
    """One optimizable vertex: pose, dense disparity, its prior, and embeddings.

    Disparity maps and features share the same 1/8-resolution grid. frozen
    excludes the pose from optimization (disparities stay free).
    """

    index: int
    pose: Pose
    disparity: np.ndarray        # (H, W)
    disparity_prior: np.ndarray  # (H, W)
    features: np.ndarray         # (K, H, W)
    stream: int = 0
    frozen: bool = False
    timestamp: float = None

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=float)
        self.disparity_prior = np.asarray(self.disparity_prior, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if self.disparity.shape != self.disparity_prior.shape:
            raise ValueError("disparity and prior shapes differ")
        if self.features.ndim != 3 or self.features.shape[1:] != self.disparity.shape:
            raise ValueError(
                f"features {self.features.shape} do not share the disparity grid {self.disparity.shape}")
        for name, arr in (("disparity", self.disparity), ("disparity prior", self.disparity_prior)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"keyframe {self.index}: {name} must be finite and >= 0")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"keyframe {self.index}: features must be finite")
        if self.timestamp is None:
            self.timestamp = float(self.index)

    @property
    def grid_shape(self):
        return self.disparity.shape


@dataclass(eq=False)
class KeyframeGraph:
    keyframes: list
    edges: list
    intrinsics: dict = field(default_factory=dict)  # stream id -> Intrinsics

    def __post_init__(self):
        n = len(self.keyframes)
        for pos, kf in enumerate(self.keyframes):
            if kf.index != pos:
                raise ValueError(f"keyframe at position {pos} carries index {kf.index}")
            if kf.stream not in self.intrinsics:
                raise ValueError(f"no intrinsics for stream {kf.stream}")
        shapes = {kf.grid_shape for kf in self.keyframes}
        if len(shapes) > 1:
            raise ValueError(f"keyframes disagree on grid shape: {shapes}")
        for obs in self.edges:
            if not (0 <= obs.i < n and 0 <= obs.j < n):
                raise ValueError(f"edge ({obs.i}, {obs.j}) references a missing keyframe")
            if obs.confidence.shape != self.keyframes[obs.i].grid_shape:
                raise ValueError(f"edge ({obs.i}, {obs.j}) maps do not match the keyframe grid")

    @property
    def grid_shape(self):
        return self.keyframes[0].grid_shape

    def copy(self) -> "KeyframeGraph":
        """Shallow-graph copy with fresh Keyframe objects (maps shared, pose/disparity replaceable)."""
        return KeyframeGraph(
            keyframes=[replace(kf, disparity=kf.disparity.copy()) for kf in self.keyframes],
            edges=list(self.edges),
            intrinsics=dict(self.intrinsics),
        )


def covisibility_fraction(kf_i: Keyframe, kf_j: Keyframe, intr_i: Intrinsics,
                          intr_j: Intrinsics, stride: int = 4) -> float:
    """Fraction of frame-i pixels (on a strided grid) reprojecting inside frame j."""
    h, w = kf_i.grid_shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    u = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(float)
    d = kf_i.disparity[ys, xs].reshape(-1)
    mu, valid = geometry.reproject(u, d, kf_i.pose, kf_j.pose, intr_i, intr_j)
    ok = valid & in_bounds(mu, h, w)
    return float(np.mean(ok))


def plan_edges(frames, intrinsics, temporal_radius: int = 1, covis_threshold: float = 1.1,
               covis_stride: int = 4):
    """Directed edge set: temporal neighbours plus high-covisibility pairs.

    Pairs within temporal_radius are always connected; more distant pairs are
    connected when the in-bounds reprojection fraction (under the current
    state) reaches covis_threshold. Both directions are added.
    """
    n = len(frames)
    pairs = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if abs(i - j) <= temporal_radius:
                pairs.append((i, j))
            elif covis_threshold <= 1.0:
                frac = covisibility_fraction(frames[i], frames[j], intrinsics[frames[i].stream],
                                             intrinsics[frames[j].stream], covis_stride)
                if frac >= covis_threshold:
                    pairs.append((i, j))
    return pairs


def build_graph(frames, intrinsics, make_observation, window: int = None,
                temporal_radius: int = 1, covis_threshold: float = 1.1,
                covis_stride: int = 4) -> KeyframeGraph:
    """Assemble a KeyframeGraph over the trailing `window` keyframes.

    make_observation(i, j) must return the FlowObservation for a planned edge
    (indices refer to positions within the windowed frame list).
    """
    if len(frames) < 2:
        raise ValueError("need at least 2 keyframes")
    if window is not None and window < len(frames):
        frames = frames[-window:]
        frames = [replace(kf, index=pos) for pos, kf in enumerate(frames)]
    pairs = plan_edges(frames, intrinsics, temporal_radius, covis_threshold, covis_stride)
    if not pairs:
        raise ValueError("no edges produced; the problem is unconstrained")
    edges = [make_observation(i, j) for i, j in pairs]
    return KeyframeGraph(keyframes=list(frames), edges=edges, intrinsics=dict(intrinsics))


def select_keyframes(step_flow_magnitudes, threshold: float = 2.0):
    """Motion-threshold keyframe filter over consecutive-frame mean flow magnitudes.

    step_flow_magnitudes[k] is the mean flow between frames k and k+1 (pixels
    at 1/8 resolution). Frame 0 is always a keyframe; a new one is emitted once
    the accumulated motion since the last keyframe reaches the threshold.
    """
    selected = [0]
    acc = 0.0
    for k, mag in enumerate(step_flow_magnitudes):
        if mag < 0:
            raise ValueError("flow magnitudes must be non-negative")
        acc += float(mag)
        if acc >= threshold:
            selected.append(k + 1)
            acc = 0.0
    return selected
