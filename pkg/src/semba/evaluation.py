"""Trajectory and open-vocabulary semantic-map evaluation.

Trajectory metric: closed-form least-squares alignment of the translation
tracks (orthogonal Procrustes, optionally with a uniform scale), then the RMS
of residual norms (ATE). Semantic metric: cosine-argmax labelling against a
label set, 5-nearest-neighbour label transfer onto ground-truth vertices, and
IoU/accuracy statistics with a head/common/tail split by class frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .features import PcaModel, pca_decode
from .geometry import Pose, unproject

UNLABELED = -1
_NORM_EPS = 1e-8


@dataclass(eq=False)
class SemanticPointCloud:
    points: np.ndarray            # (N, 3) world meters
    embeddings: np.ndarray        # (N, K)
    labels: np.ndarray = None     # (N,) int; UNLABELED where unassigned

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.embeddings.shape[0] != self.points.shape[0]:
            raise ValueError("embeddings must match the point count")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)


@dataclass(eq=False)
class LabelSet:
    names: list
    vectors: np.ndarray  # (L, C)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if len(self.names) < 2 or self.vectors.shape[0] != len(self.names):
            raise ValueError("need at least two named classes with matching vectors")
        if np.any(np.linalg.norm(self.vectors, axis=1) <= _NORM_EPS):
            raise ValueError("label vectors must be non-zero")


@dataclass(eq=False)
class SegMetrics:
    class_ids: np.ndarray   # classes present in the ground truth
    iou: np.ndarray
    acc: np.ndarray
    counts: np.ndarray
    groups: list            # per-class group name
    miou: float
    fmiou: float
    macc: float
    group_metrics: dict     # group -> {"miou": v, "fmiou": v, "macc": v}
    class_names: list = None


def fuse_point_cloud(graph, pca: PcaModel = None, stride: int = 1) -> SemanticPointCloud:
    """Unproject every stride-th valid pixel of every keyframe into the world.

    Embeddings are the keyframe features, decoded through the PCA model when
    one is given. Coincident observations stay separate points.
    """
    if not graph.keyframes:
        raise ValueError("empty graph")
    pts, embs = [], []
    for kf in graph.keyframes:
        h, w = kf.grid_shape
        ys, xs = np.mgrid[0:h:stride, 0:w:stride]
        d = kf.disparity[ys, xs].reshape(-1)
        ok = d > 0
        if not ok.any():
            continue
        u = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(float)[ok]
        cam = unproject(u, d[ok], graph.intrinsics[kf.stream])
        pts.append(kf.pose.inverse().apply(cam))
        feats = kf.features[:, ys.reshape(-1)[ok], xs.reshape(-1)[ok]].T
        embs.append(pca_decode(feats, pca) if pca is not None else feats)
    if not pts:
        raise ValueError("no valid pixels to fuse")
    return SemanticPointCloud(points=np.concatenate(pts), embeddings=np.concatenate(embs))


def assign_labels(cloud: SemanticPointCloud, labels: LabelSet) -> SemanticPointCloud:
    """Cosine-argmax labelling; ties break to the lowest class index, zero-norm
    embeddings stay unlabeled."""
    if cloud.embeddings.shape[1] != labels.vectors.shape[1]:
        raise ValueError(
            f"embedding dim {cloud.embeddings.shape[1]} != label dim {labels.vectors.shape[1]}")
    emb_norm = np.linalg.norm(cloud.embeddings, axis=1)
    ok = emb_norm > _NORM_EPS
    text = labels.vectors / np.linalg.norm(labels.vectors, axis=1, keepdims=True)
    sims = (cloud.embeddings / np.where(ok, emb_norm, 1.0)[:, None]) @ text.T
    assigned = np.where(ok, np.argmax(sims, axis=1), UNLABELED)
    return replace(cloud, labels=assigned)


def knn_transfer(pred: SemanticPointCloud, gt_points) -> np.ndarray:
    """Majority label of the 5 nearest labelled predicted points per gt vertex.

    On a tied vote the label of the single nearest point wins. With fewer than
    5 predicted points, all of them vote.
    """
    if pred.labels is None:
        raise ValueError("predicted cloud is unlabeled; run assign_labels first")
    gt_points = np.asarray(gt_points, dtype=float)
    if gt_points.size == 0 or pred.points.shape[0] == 0:
        raise ValueError("both clouds must be non-empty")
    keep = pred.labels != UNLABELED
    points, labels = pred.points[keep], pred.labels[keep]
    if points.shape[0] == 0:
        raise ValueError("predicted cloud has no labelled points")
    k = min(5, points.shape[0])
    _, idx = cKDTree(points).query(gt_points, k=k)
    idx = np.atleast_2d(idx.T).T if k == 1 else idx
    votes = labels[idx.reshape(len(gt_points), k)]
    out = np.empty(len(gt_points), dtype=int)
    for row in range(votes.shape[0]):
        cands, counts = np.unique(votes[row], return_counts=True)
        top = counts.max()
        winners = cands[counts == top]
        out[row] = winners[0] if len(winners) == 1 else votes[row, 0]
    return out


def _group_sizes(n: int):
    base, rem = divmod(n, 3)
    return [base + (1 if g < rem else 0) for g in range(3)]


def seg_metrics(pred_labels, gt_labels, class_counts=None, class_names=None) -> SegMetrics:
    """IoU / accuracy statistics over the classes present in the ground truth.

    class_counts may override the frequency source for the head/common/tail
    split (e.g. dataset-level point counts); it defaults to the gt label
    histogram. fmIoU weights are gt frequencies and sum to one.
    """
    pred_labels = np.asarray(pred_labels, dtype=int)
    gt_labels = np.asarray(gt_labels, dtype=int)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label arrays must have identical length")
    class_ids = np.unique(gt_labels)
    iou = np.zeros(len(class_ids))
    acc = np.zeros(len(class_ids))
    counts = np.zeros(len(class_ids))
    for k, c in enumerate(class_ids):
        tp = np.sum((gt_labels == c) & (pred_labels == c))
        fp = np.sum((gt_labels != c) & (pred_labels == c))
        fn = np.sum((gt_labels == c) & (pred_labels != c))
        iou[k] = tp / (tp + fp + fn) if tp + fp + fn > 0 else 0.0
        acc[k] = tp / (tp + fn) if tp + fn > 0 else 0.0
        counts[k] = tp + fn
    if class_counts is not None:
        lookup = dict(class_counts) if not isinstance(class_counts, dict) else class_counts
        counts = np.array([float(lookup[c]) for c in class_ids])

    miou = float(iou.mean())
    # Single quotient keeps the frequency weighting exact when every IoU is 1.
    fmiou = float((counts * iou).sum() / counts.sum())
    macc = float(acc.mean())

    # Sort by descending count (stable on ties), split into three equal groups,
    # remainders assigned to the earlier groups.
    order = np.lexsort((class_ids, -counts))
    groups = [""] * len(class_ids)
    names = ("head", "common", "tail")
    group_metrics = {}
    start = 0
    for gname, size in zip(names, _group_sizes(len(class_ids))):
        members = order[start:start + size]
        start += size
        for m in members:
            groups[m] = gname
        if size == 0:
            group_metrics[gname] = {"miou": 0.0, "fmiou": 0.0, "macc": 0.0}
            continue
        g_counts = counts[members]
        g_total = g_counts.sum()
        group_metrics[gname] = {
            "miou": float(iou[members].mean()),
            "fmiou": float((g_counts * iou[members]).sum() / g_total) if g_total > 0 else 0.0,
            "macc": float(acc[members].mean()),
        }

    resolved_names = None
    if class_names is not None:
        resolved_names = [class_names[int(c)] for c in class_ids]
    return SegMetrics(class_ids=class_ids, iou=iou, acc=acc, counts=counts, groups=groups,
                      miou=miou, fmiou=fmiou, macc=macc, group_metrics=group_metrics,
                      class_names=resolved_names)


@dataclass(frozen=True)
class Alignment:
    rotation: np.ndarray   # (3, 3)
    translation: np.ndarray
    scale: float           # size of the estimate relative to ground truth


def _as_translations(trajectory) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=float)
    first = trajectory[0]
    if isinstance(first, Pose):
        return np.stack([p.translation for p in trajectory])
    return np.asarray(trajectory, dtype=float)


def align_trajectories(est, gt, mode: str = "similarity"):
    """Least-squares alignment of the estimated track onto the ground truth.

    est/gt: (N, 3) arrays or Pose sequences (translation components are used).
    Returns (aligned_est (N, 3), Alignment). The reported scale is the size of
    the estimate relative to the ground truth; the aligned track divides it
    out: aligned = (1/scale) * R @ est + t.
    """
    if mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    src = _as_translations(est)
    dst = _as_translations(gt)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError(f"need two equal trajectories of >= 3 poses, got {src.shape} vs {dst.shape}")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    if np.linalg.matrix_rank(src_c, tol=1e-9 * max(1.0, np.abs(src_c).max())) < 2:
        raise ValueError("degenerate trajectory: translations are collinear")
    cov = dst_c.T @ src_c / src.shape[0]
    u, s, vt = np.linalg.svd(cov)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    rot = u @ d @ vt
    if mode == "similarity":
        var_src = np.mean(np.sum(src_c**2, axis=1))
        fit = float(np.trace(np.diag(s) @ d) / var_src)
    else:
        fit = 1.0
    trans = mu_dst - fit * rot @ mu_src
    aligned = fit * src @ rot.T + trans
    return aligned, Alignment(rotation=rot, translation=trans, scale=1.0 / fit)


def ate_rmse(est_aligned, gt) -> float:
    """Root-mean-square translation error between aligned tracks, in meters."""
    est_aligned = _as_translations(est_aligned)
    gt = _as_translations(gt)
    if est_aligned.shape != gt.shape:
        raise ValueError("trajectories must have equal length")
    return float(np.sqrt(np.mean(np.sum((est_aligned - gt) ** 2, axis=1))))


def trajectory_ate(est_poses, gt_poses, mode: str = "rigid") -> float:
    """ATE between two world-to-camera pose lists, via camera centers."""
    est = np.stack([p.camera_center() for p in est_poses])
    gt = np.stack([p.camera_center() for p in gt_poses])
    aligned, _ = align_trajectories(est, gt, mode)
    return ate_rmse(aligned, gt)
