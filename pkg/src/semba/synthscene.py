"""Self-consistent synthetic scenes for exercising the bundle-adjustment engine.

The generator builds a world surface (fronto-parallel patches hashed on a world
grid plus a smooth height field), camera trajectories that keep it in view,
and per-keyframe disparity / embedding maps. Edge flow fields are rendered
through the exact reprojection chain, so with zero noise the generated state
is a global optimum of the objective: every valid residual vanishes there.

Class boundaries are smoothed over a few pixels so the embedding term carries
usable gradients (hard one-pixel cliffs starve Gauss-Newton). Cross-view
embedding agreement is exact on pixels whose own feature is a pure class
vector and whose reprojected bilinear neighbourhood is pure with the same
class; the remaining boundary bands get zero flow confidence (mimicking a flow
network's uncertainty at depth edges), which removes them from every term.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Intrinsics, Pose, se3_exp
from .graph import Keyframe, KeyframeGraph, plan_edges
from .residuals import FlowObservation, grid_pixels, in_bounds

_NEWTON_ITERS = 16


@dataclass
class SceneConfig:
    num_keyframes: int = 8
    height: int = 48
    width: int = 64
    focal: float = None            # defaults to 0.8 * width
    trajectory: str = "arc"        # arc | orbit | random-walk
    magnitude: float = 0.4         # arc: radians of sweep; orbit: ring radius scale; walk: step scale
    depth_range: tuple = (1.0, 5.0)
    embedding_dim: int = 16
    num_classes: int = 6
    dynamic_fraction: float = 0.0
    dynamic_motion_px: float = 5.0
    embedding_decorrelation: float = 1.0
    flow_sigma: float = 0.0
    disparity_sigma: float = 0.0
    pose_sigma: float = 0.0
    embedding_noise: float = 0.0   # amplitude of the smooth feature perturbation
    feature_smooth_radius: int = 2  # class-boundary blending radius (pixels)
    temporal_radius: int = 2
    covis_threshold: float = 1.1   # > 1 disables covisibility edges
    seed: int = 0

    def __post_init__(self):
        if self.num_keyframes < 2:
            raise ValueError("need at least 2 keyframes")
        if self.height < 8 or self.width < 8:
            raise ValueError("grid must be at least 8x8")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic_fraction must lie in [0, 1]")
        if not 0.0 <= self.embedding_decorrelation <= 1.0:
            raise ValueError("embedding_decorrelation must lie in [0, 1]")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must satisfy 0 < near < far")
        if self.num_classes < 4:
            raise ValueError("need at least 4 classes")

    def intrinsics(self) -> Intrinsics:
        f = self.focal if self.focal is not None else 0.8 * self.width
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass(eq=False)
class SceneBundle:
    """Everything the engine consumes plus the ground truth used to score it."""

    config: SceneConfig
    intrinsics: Intrinsics
    class_vectors: np.ndarray     # (L, K) unit rows
    gt_poses: list                # world-to-camera
    init_poses: list
    gt_disparity: list            # (H, W) each
    prior_disparity: list
    init_disparity: list
    features: list                # (K, H, W)
    labels: list                  # (H, W) int
    dynamic_masks: list           # (H, W) bool
    edges: list                   # FlowObservation, flow rendered from the gt chain

    def to_graph(self, initial: bool = True) -> KeyframeGraph:
        """Problem graph at the perturbed initial state (default) or at ground truth."""
        poses = self.init_poses if initial else self.gt_poses
        disps = self.init_disparity if initial else self.gt_disparity
        kfs = [
            Keyframe(index=k, pose=poses[k], disparity=disps[k].copy(),
                     disparity_prior=self.prior_disparity[k], features=self.features[k],
                     frozen=(k == 0))
            for k in range(self.config.num_keyframes)
        ]
        return KeyframeGraph(keyframes=kfs, edges=list(self.edges),
                             intrinsics={0: self.intrinsics})

    def measured_dynamic_fraction(self) -> float:
        return float(np.mean([m.mean() for m in self.dynamic_masks]))


def _unit(v):
    return v / np.linalg.norm(v)


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose with the optical axis through the target."""
    forward = _unit(target - center)
    right = _unit(np.cross(np.array([0.0, 1.0, 0.0]), forward))
    up = np.cross(forward, right)
    rot_c2w = np.stack([right, up, forward], axis=1)
    r_w2c = rot_c2w.T
    return Pose.from_matrix(np.block([[r_w2c, (-r_w2c @ center)[:, None]],
                                      [np.zeros((1, 3)), np.ones((1, 1))]]))


def _trajectory(cfg: SceneConfig, rng: np.random.Generator):
    if cfg.magnitude <= 0:
        raise ValueError("trajectory magnitude must be positive (zero baseline is degenerate)")
    lo, hi = cfg.depth_range
    z0 = 0.5 * (lo + hi)
    target = np.array([0.0, 0.0, z0])
    n = cfg.num_keyframes
    poses = []
    if cfg.trajectory == "arc":
        half = 0.5 * cfg.magnitude
        for k in range(n):
            theta = -half + cfg.magnitude * k / (n - 1)
            center = np.array([z0 * np.sin(theta),
                               0.1 * cfg.magnitude * np.sin(2.0 * np.pi * k / n),
                               z0 * (1.0 - np.cos(theta))])
            poses.append(_look_at(center, target))
    elif cfg.trajectory == "orbit":
        radius = 0.3 * z0 * cfg.magnitude
        for k in range(n):
            phi = 2.0 * np.pi * k / n
            center = np.array([radius * np.cos(phi), radius * np.sin(phi), 0.0])
            poses.append(_look_at(center, target))
    elif cfg.trajectory == "random-walk":
        pose = _look_at(np.zeros(3), target)
        poses.append(pose)
        for _ in range(n - 1):
            step = np.concatenate([rng.normal(0.0, 0.08 * cfg.magnitude, 3),
                                   rng.normal(0.0, 0.03 * cfg.magnitude, 3)])
            pose = se3_exp(step).compose(pose)
            poses.append(pose)
    else:
        raise ValueError(f"unknown trajectory kind {cfg.trajectory!r}")
    return poses


def _class_vectors(rng: np.random.Generator, num_classes: int, dim: int,
                   min_angle_deg: float = 30.0) -> np.ndarray:
    """Unit vectors with pairwise angle >= min_angle_deg, by rejection sampling.

    Angles are also capped at 120 degrees so convex blends at class boundaries
    keep a healthy norm.
    """
    max_cos = np.cos(np.radians(min_angle_deg))
    vectors = []
    for _ in range(20_000):
        v = _unit(rng.normal(size=dim))
        if all(-0.5 <= v @ u <= max_cos for u in vectors):
            vectors.append(v)
            if len(vectors) == num_classes:
                return np.stack(vectors)
    raise RuntimeError("could not place class vectors with the requested separation")


class _WorldSurface:
    """Height field z(x, y) = z0 + hashed per-cell offset + smooth modulation."""

    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        lo, hi = cfg.depth_range
        self.z0 = 0.5 * (lo + hi)
        k = cfg.intrinsics()
        # Cap the boundary smoothing on small grids, then size the class cells
        # (in image pixels at the reference depth) to at least twice the purity
        # window so confident interiors survive the masking.
        self.smooth_radius = max(1, min(cfg.feature_smooth_radius,
                                        cfg.width // 12, cfg.height // 12))
        cell_px = max(cfg.width / 6.0, 2.0 * (2 * self.smooth_radius + 1))
        self.cell = self.z0 * cell_px / k.fx
        self.patch_amp = 0.15 * (hi - lo)
        self.smooth_amp = 0.04 * (hi - lo)
        self.salt = np.uint64(rng.integers(1, 2**31))
        self.num_classes = cfg.num_classes
        self.freq = rng.uniform(0.7, 1.3, size=3)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=3)

    def _hash(self, ix, iy):
        h = ix.astype(np.uint64) * np.uint64(2654435761) \
            + iy.astype(np.uint64) * np.uint64(40503) + self.salt
        h ^= h >> np.uint64(13)
        h *= np.uint64(0x9E3779B97F4A7C15)
        h ^= h >> np.uint64(29)
        return h

    def cell_indices(self, x, y):
        return np.floor(x / self.cell).astype(np.int64), np.floor(y / self.cell).astype(np.int64)

    def cell_class(self, ix, iy):
        return (self._hash(ix, iy) % np.uint64(self.num_classes)).astype(int)

    def cell_offset(self, ix, iy):
        frac = ((self._hash(ix, iy) >> np.uint64(8)) % np.uint64(4096)).astype(float) / 4095.0
        return self.patch_amp * (2.0 * frac - 1.0)

    def smooth(self, x, y):
        return self.smooth_amp * (np.sin(self.freq[0] * x + self.phase[0])
                                  * np.sin(self.freq[1] * y + self.phase[1])
                                  + 0.5 * np.sin(self.freq[2] * (x + y) + self.phase[2]))

    def smooth_grad(self, x, y):
        gx = self.smooth_amp * (self.freq[0] * np.cos(self.freq[0] * x + self.phase[0])
                                * np.sin(self.freq[1] * y + self.phase[1])
                                + 0.5 * self.freq[2] * np.cos(self.freq[2] * (x + y) + self.phase[2]))
        gy = self.smooth_amp * (np.sin(self.freq[0] * x + self.phase[0])
                                * self.freq[1] * np.cos(self.freq[1] * y + self.phase[1])
                                + 0.5 * self.freq[2] * np.cos(self.freq[2] * (x + y) + self.phase[2]))
        return gx, gy

    def raycast(self, pose: Pose, intrinsics: Intrinsics, height: int, width: int):
        """Per-pixel ray depths and world points; returns (depth (H*W,), labels (H*W,))."""
        u = grid_pixels(height, width)
        ray_cam = np.stack([(u[:, 0] - intrinsics.cx) / intrinsics.fx,
                            (u[:, 1] - intrinsics.cy) / intrinsics.fy,
                            np.ones(u.shape[0])], axis=-1)
        rot_c2w = pose.rotation_matrix().T
        origin = pose.camera_center()
        ray_w = ray_cam @ rot_c2w.T
        if np.any(ray_w[:, 2] <= 0.05):
            raise ValueError("camera looks away from the surface; trajectory too aggressive")

        # Candidate cell from the base-plane hit, then Newton on that cell's plane.
        s = (self.z0 - origin[2]) / ray_w[:, 2]
        px = origin[0] + s * ray_w[:, 0]
        py = origin[1] + s * ray_w[:, 1]
        ix, iy = self.cell_indices(px, py)
        z_cell = self.z0 + self.cell_offset(ix, iy)
        for _ in range(_NEWTON_ITERS):
            px = origin[0] + s * ray_w[:, 0]
            py = origin[1] + s * ray_w[:, 1]
            f = origin[2] + s * ray_w[:, 2] - z_cell - self.smooth(px, py)
            gx, gy = self.smooth_grad(px, py)
            fp = ray_w[:, 2] - gx * ray_w[:, 0] - gy * ray_w[:, 1]
            s = s - f / fp
        px = origin[0] + s * ray_w[:, 0]
        py = origin[1] + s * ray_w[:, 1]
        labels = self.cell_class(*self.cell_indices(px, py))
        # Camera-frame depth equals s because the camera ray has unit z-component.
        return s, labels


def _conv1d_edge(stack: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Separable 1-D convolution with edge padding along the given axis."""
    radius = len(kernel) // 2
    pad = [(0, 0)] * stack.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(stack, pad, mode="edge")
    out = np.zeros_like(stack)
    for k, wgt in enumerate(kernel):
        sl = [slice(None)] * stack.ndim
        sl[axis] = slice(k, k + stack.shape[axis])
        out += wgt * padded[tuple(sl)]
    return out


def _label_purity(labels: np.ndarray, radius: int) -> np.ndarray:
    """True where the whole (2r+1)^2 window shares the center label."""
    h, w = labels.shape
    padded = np.pad(labels, radius, mode="edge")
    pure = np.ones((h, w), dtype=bool)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            pure &= padded[dy:dy + h, dx:dx + w] == labels
    return pure


def _smooth_class_features(labels: np.ndarray, class_vectors: np.ndarray,
                           radius: int) -> np.ndarray:
    """Blend class vectors across smoothed boundaries; unit-normalized per pixel.

    Pure pixels (label-uniform window) come out as exact class directions.
    """
    num_classes = class_vectors.shape[0]
    onehot = (labels[None] == np.arange(num_classes)[:, None, None]).astype(float)
    kernel = np.concatenate([np.arange(1, radius + 2), np.arange(radius, 0, -1)]).astype(float)
    kernel /= kernel.sum()
    sm = _conv1d_edge(_conv1d_edge(onehot, kernel, axis=1), kernel, axis=2)
    feat = np.einsum("lhw,lk->khw", sm, class_vectors)
    norm = np.maximum(np.linalg.norm(feat, axis=0, keepdims=True), 1e-12)
    return feat / norm


def _edge_confidence(mu: np.ndarray, src_labels: np.ndarray, src_pure: np.ndarray,
                     labels_j: np.ndarray, pure_j: np.ndarray,
                     valid: np.ndarray) -> np.ndarray:
    """True where the source feature is a pure class vector and all four bilinear
    neighbours of mu are pure with the same class."""
    h, w = labels_j.shape
    x0 = np.clip(np.floor(mu[:, 0]), 0, w - 2).astype(int)
    y0 = np.clip(np.floor(mu[:, 1]), 0, h - 2).astype(int)
    agree = src_pure.copy()
    for dy in (0, 1):
        for dx in (0, 1):
            agree &= (labels_j[y0 + dy, x0 + dx] == src_labels) & pure_j[y0 + dy, x0 + dx]
    return agree & valid


def gen_scene(cfg: SceneConfig) -> SceneBundle:
    """Generate a bundle; deterministic given cfg.seed.

    The order of randomness consumption is fixed by independent child seeds,
    so toggling one knob never reshuffles the others.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng_vec, rng_traj, rng_surf, rng_feat_noise, rng_flow_noise, rng_init = \
        (np.random.default_rng(s) for s in seeds)

    intr = cfg.intrinsics()
    h, w = cfg.height, cfg.width
    class_vectors = _class_vectors(rng_vec, cfg.num_classes, cfg.embedding_dim)
    gt_poses = _trajectory(cfg, rng_traj)
    surface = _WorldSurface(cfg, rng_surf)

    gt_disparity, features, labels, purity = [], [], [], []
    for pose in gt_poses:
        depth, lab = surface.raycast(pose, intr, h, w)
        lo, hi = cfg.depth_range
        if depth.min() <= 0.25 * lo or depth.max() >= 4.0 * hi:
            raise ValueError("raycast produced out-of-range depths; scene degenerate")
        gt_disparity.append((1.0 / depth).reshape(h, w))
        lab = lab.reshape(h, w)
        labels.append(lab)
        purity.append(_label_purity(lab, surface.smooth_radius))
        feat = _smooth_class_features(lab, class_vectors, surface.smooth_radius)
        if cfg.embedding_noise > 0:
            noise = rng_feat_noise.normal(0.0, cfg.embedding_noise,
                                          size=(cfg.embedding_dim, h, w))
            # Smooth the perturbation so neighbouring pixels stay correlated.
            for axis in (1, 2):
                noise = 0.25 * (np.roll(noise, 1, axis) + np.roll(noise, -1, axis)) + 0.5 * noise
            feat = feat + noise
            feat /= np.linalg.norm(feat, axis=0, keepdims=True)
        features.append(feat)

    if len(np.unique(np.concatenate([l.reshape(-1) for l in labels]))) < 4:
        raise ValueError("scene shows fewer than 4 classes; enlarge the grid or field of view")

    frames = [Keyframe(index=k, pose=gt_poses[k], disparity=gt_disparity[k],
                       disparity_prior=gt_disparity[k], features=features[k])
              for k in range(cfg.num_keyframes)]
    pairs = plan_edges(frames, {0: intr}, cfg.temporal_radius, cfg.covis_threshold)
    if not pairs:
        raise ValueError("edge planning produced no edges")

    u = grid_pixels(h, w)
    edges = []
    for i, j in pairs:
        mu, valid = geometry.reproject(u, gt_disparity[i].reshape(-1), gt_poses[i],
                                       gt_poses[j], intr)
        usable = valid & in_bounds(mu, h, w)
        flow = np.where(usable[:, None], mu - u, 0.0)
        conf = _edge_confidence(mu, labels[i].reshape(-1), purity[i].reshape(-1),
                                labels[j], purity[j], usable)
        flow_map = flow.T.reshape(2, h, w)
        if cfg.flow_sigma > 0:
            flow_map = flow_map + rng_flow_noise.normal(0.0, cfg.flow_sigma, size=flow_map.shape)
        edges.append(FlowObservation(i=i, j=j, flow=flow_map,
                                     confidence=conf.reshape(h, w).astype(float)))

    if np.mean([e.confidence.mean() for e in edges]) <= 0.01:
        raise ValueError("scene too cramped: almost no confident pixels survive the "
                         "boundary masking; enlarge the grid or reduce feature_smooth_radius")

    bundle = SceneBundle(
        config=cfg, intrinsics=intr, class_vectors=class_vectors,
        gt_poses=gt_poses, init_poses=list(gt_poses),
        gt_disparity=gt_disparity, prior_disparity=[d.copy() for d in gt_disparity],
        init_disparity=[d.copy() for d in gt_disparity],
        features=features, labels=labels,
        dynamic_masks=[np.zeros((h, w), dtype=bool) for _ in range(cfg.num_keyframes)],
        edges=edges)

    if cfg.dynamic_fraction > 0:
        bundle = inject_dynamics(bundle, cfg.dynamic_fraction, cfg.dynamic_motion_px,
                                 cfg.embedding_decorrelation)
    if cfg.pose_sigma > 0 or cfg.disparity_sigma > 0:
        bundle = perturb_init(bundle, cfg.pose_sigma, cfg.disparity_sigma,
                              seed=int(rng_init.integers(2**31)))
    return bundle


def _grow_blobs(rng: np.random.Generator, height: int, width: int, target: int):
    """Elliptical blobs covering exactly `target` pixels (last blob trimmed radially).

    Returns (mask (H, W) bool, blob_ids (H, W) int with -1 outside blobs).
    """
    mask = np.zeros((height, width), dtype=bool)
    ids = np.full((height, width), -1, dtype=int)
    ys, xs = np.mgrid[0:height, 0:width]
    blob = 0
    while mask.sum() < target:
        cy = rng.uniform(0.1 * height, 0.9 * height)
        cx = rng.uniform(0.1 * width, 0.9 * width)
        ry = rng.uniform(height / 10.0, height / 4.0)
        rx = rng.uniform(width / 10.0, width / 4.0)
        inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        fresh = inside & ~mask
        excess = int(mask.sum() + fresh.sum()) - target
        if excess > 0:
            fy, fx = np.nonzero(fresh)
            order = np.argsort(-(((fy - cy) / ry) ** 2 + ((fx - cx) / rx) ** 2), kind="stable")
            drop = order[:excess]
            fresh[fy[drop], fx[drop]] = False
        mask |= fresh
        ids[fresh] = blob
        blob += 1
    return mask, ids


def inject_dynamics(bundle: SceneBundle, fraction: float, motion_px: float,
                    decorrelation: float) -> SceneBundle:
    """Contaminate contiguous blobs, modelling objects that moved between frames.

    Each blob gets an independent rigid 2-D flow displacement of magnitude
    motion_px per edge (violating the static geometry) and, per frame, its
    embeddings are blended toward a fresh blob-wide vector so cross-view
    similarity collapses while the field stays spatially coherent. Confidence
    is deliberately left unchanged: the corruption stays invisible to the
    weighting, and only the similarity-driven kernel can respond.

    Deterministic: randomness derives from the bundle's scene seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    out = copy.deepcopy(bundle)
    if fraction == 0.0:
        return out
    h, w = bundle.config.height, bundle.config.width
    rng = np.random.default_rng(np.random.SeedSequence((bundle.config.seed, 0xD1)))
    mask, blob_ids = _grow_blobs(rng, h, w, round(fraction * h * w))
    out.dynamic_masks = [mask.copy() for _ in range(bundle.config.num_keyframes)]
    n_blobs = int(blob_ids.max()) + 1

    if motion_px > 0:
        for obs in out.edges:
            for blob in range(n_blobs):
                theta = rng.uniform(0.0, 2.0 * np.pi)
                delta = motion_px * np.array([np.cos(theta), np.sin(theta)])
                sel = blob_ids == blob
                obs.flow[0][sel] += delta[0]
                obs.flow[1][sel] += delta[1]

    if decorrelation > 0:
        k = bundle.config.embedding_dim
        kernel = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0
        for feat in out.features:
            fresh = rng.normal(size=(n_blobs, k))
            fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
            for blob in range(n_blobs):
                # Ramped blend weight: spatially coherent object feature with
                # soft edges instead of one-pixel cliffs.
                weight = decorrelation * _conv1d_edge(
                    _conv1d_edge((blob_ids == blob).astype(float), kernel, 0), kernel, 1)
                blended = (1.0 - weight)[None] * feat + weight[None] * fresh[blob][:, None, None]
                blended /= np.maximum(np.linalg.norm(blended, axis=0, keepdims=True), 1e-12)
                feat[:] = blended
    return out


def perturb_init(bundle: SceneBundle, pose_sigma: float, disparity_sigma: float,
                 seed: int = 0) -> SceneBundle:
    """Produce the solver's starting state: noisy poses and disparities, truth retained.

    Keyframe 0 is the gauge anchor and keeps its pose. Disparities are scaled
    by (1 + N(0, sigma^2)) and clamped positive; the prior stays untouched, so
    a nonzero disparity_sigma shows up as prior energy at the initial state.
    """
    if pose_sigma < 0 or disparity_sigma < 0:
        raise ValueError("noise scales must be non-negative")
    out = copy.deepcopy(bundle)
    rng = np.random.default_rng(seed)
    init_poses = [bundle.gt_poses[0]]
    for pose in bundle.gt_poses[1:]:
        if pose_sigma > 0:
            pose = se3_exp(rng.normal(0.0, pose_sigma, 6)).compose(pose)
        init_poses.append(pose)
    out.init_poses = init_poses
    init_disp = []
    for d in bundle.init_disparity:
        if disparity_sigma > 0:
            d = np.maximum(d * (1.0 + rng.normal(0.0, disparity_sigma, size=d.shape)), 1e-6)
        init_disp.append(d.copy())
    out.init_disparity = init_disp
    return out
