"""Dense embedding maps: pyramid blending, PCA compression, bilinear sampling.

Feature maps are float arrays of shape (C, H, W), channel-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class PyramidConfig:
    """Multi-scale extraction geometry: scales, patch size, blend weights.

    Weights default to the scales themselves, favouring higher-resolution maps.
    """

    scales: tuple = (2.0, 1.5, 1.0, 0.75)
    patch: int = 14
    blend_weights: tuple = field(default=None)

    def __post_init__(self):
        if len(self.scales) == 0 or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if self.patch < 1:
            raise ValueError("patch size must be >= 1")
        weights = self.blend_weights if self.blend_weights is not None else tuple(self.scales)
        if len(weights) != len(self.scales) or any(w <= 0 for w in weights):
            raise ValueError("blend weights must be positive, one per scale")
        object.__setattr__(self, "blend_weights", tuple(weights))


def pyramid_dims(height: int, width: int, scale: float, patch: int):
    """Scaled image dimensions rounded up to multiples of the patch size."""
    if height < 1 or width < 1 or patch < 1 or scale <= 0:
        raise ValueError("height, width, patch must be >= 1 and scale > 0")
    h = int(np.ceil(height * scale / patch)) * patch
    w = int(np.ceil(width * scale / patch)) * patch
    return h, w


def upsample_bilinear(fmap: np.ndarray, target_hw) -> np.ndarray:
    """Resize (C, h, w) to (C, H, W) with bilinear interpolation, endpoints pinned."""
    fmap = np.asarray(fmap, dtype=float)
    c, h, w = fmap.shape
    ht, wt = target_hw
    if (h, w) == (ht, wt):
        return fmap.copy()
    ys = np.linspace(0.0, h - 1.0, ht) if ht > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, wt) if wt > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    values, _, _ = bilinear_sample(fmap, coords)
    return values.reshape(ht, wt, c).transpose(2, 0, 1)


def blend_pyramid(maps, weights, target_hw) -> np.ndarray:
    """Upsample every map to target_hw and average with the given weights."""
    if len(maps) == 0:
        raise ValueError("blend_pyramid needs at least one feature map")
    if len(weights) != len(maps):
        raise ValueError(f"got {len(maps)} maps but {len(weights)} weights")
    weights = np.asarray(weights, dtype=float)
    if weights.sum() <= 0:
        raise ValueError("blend weights must sum to a positive value")
    channels = {np.asarray(m).shape[0] for m in maps}
    if len(channels) != 1:
        raise ValueError(f"feature maps disagree on channel count: {sorted(channels)}")
    acc = None
    for fmap, w in zip(maps, weights):
        up = upsample_bilinear(fmap, target_hw) * w
        acc = up if acc is None else acc + up
    return acc / weights.sum()


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Affine subspace model: encode(f) = basis.T @ (f - mean)."""

    mean: np.ndarray   # (C,)
    basis: np.ndarray  # (C, K), column-orthonormal

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 2 or basis.shape[0] != mean.shape[0]:
            raise ValueError(f"basis shape {basis.shape} inconsistent with mean length {mean.shape[0]}")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-6):
            raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]

    @staticmethod
    def identity(dim: int) -> "PcaModel":
        return PcaModel(np.zeros(dim), np.eye(dim))


def pca_fit(samples: np.ndarray, k: int) -> PcaModel:
    """Fit a K-component PCA model to (N, C) samples via SVD of the centered matrix.

    Basis columns are ordered by descending singular value; the sign of each is
    fixed so its largest-magnitude entry is positive.
    """
    samples = np.asarray(samples, dtype=float)
    n, c = samples.shape
    if not (0 < k <= min(n - 1, c)):
        raise ValueError(f"k={k} must satisfy 1 <= k <= min(N-1, C) = {min(n - 1, c)}")
    mean = samples.mean(axis=0)
    _, _, vt = np.linalg.svd(samples - mean, full_matrices=False)
    basis = vt[:k].T
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    return PcaModel(mean, basis * flip)


def pca_encode(features: np.ndarray, model: PcaModel) -> np.ndarray:
    """Project (..., C) feature vectors into the model subspace, (..., K)."""
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != model.input_dim:
        raise ValueError(f"feature dim {features.shape[-1]} != model input dim {model.input_dim}")
    return (features - model.mean) @ model.basis


def pca_decode(codes: np.ndarray, model: PcaModel) -> np.ndarray:
    """Reconstruct (..., C) vectors from (..., K) codes."""
    codes = np.asarray(codes, dtype=float)
    if codes.shape[-1] != model.output_dim:
        raise ValueError(f"code dim {codes.shape[-1]} != model output dim {model.output_dim}")
    return codes @ model.basis.T + model.mean


def fit_pca_from_maps(maps, k: int, max_samples: int = 100_000, max_maps: int = 8,
                      seed: int = 0) -> PcaModel:
    """Fit PCA on a seeded uniform pixel subsample of the first max_maps feature maps."""
    pool = [np.asarray(m, dtype=float).reshape(m.shape[0], -1).T for m in maps[:max_maps]]
    if not pool:
        raise ValueError("no feature maps given")
    stacked = np.concatenate(pool, axis=0)
    if stacked.shape[0] > max_samples:
        idx = np.random.default_rng(seed).choice(stacked.shape[0], size=max_samples, replace=False)
        stacked = stacked[idx]
    return pca_fit(stacked, k)


def bilinear_sample(fmap: np.ndarray, u):
    """Sample a (C, H, W) map at continuous pixel locations u (..., 2) = (x, y).

    Returns (values (..., C), grad (..., C, 2), valid (...,)). The four-neighbor
    weights are non-negative and sum to one, reproduce grid values exactly at
    integer coordinates, and grad is the analytic derivative of the blend with
    respect to (x, y). Out-of-domain locations ([0, W-1] x [0, H-1]) are flagged
    invalid and return zeros.
    """
    fmap = np.asarray(fmap, dtype=float)
    c, h, w = fmap.shape
    u = np.asarray(u, dtype=float)
    x, y = u[..., 0], u[..., 1]
    # Round-off slack: locations an epsilon outside the domain are clamped in.
    eps = 1e-9
    valid = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)

    # Clamp the anchor so x == W-1 samples the last cell with weight 1 on its far edge.
    x0 = np.clip(np.floor(x), 0, w - 2).astype(int) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(int) if h > 1 else np.zeros_like(y, dtype=int)
    x0 = np.where(valid, x0, 0)
    y0 = np.where(valid, y0, 0)
    a = np.where(valid, x - x0, 0.0)
    b = np.where(valid, y - y0, 0.0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    f00 = fmap[:, y0, x0]   # (C, ...)
    f10 = fmap[:, y0, x1]
    f01 = fmap[:, y1, x0]
    f11 = fmap[:, y1, x1]

    wa, wb = 1.0 - a, 1.0 - b
    values = wa * wb * f00 + a * wb * f10 + wa * b * f01 + a * b * f11
    grad_x = wb * (f10 - f00) + b * (f11 - f01)
    grad_y = wa * (f01 - f00) + a * (f11 - f10)

    values = np.moveaxis(values, 0, -1)
    grad = np.stack([np.moveaxis(grad_x, 0, -1), np.moveaxis(grad_y, 0, -1)], axis=-1)
    values = np.where(valid[..., None], values, 0.0)
    grad = np.where(valid[..., None, None], grad, 0.0)
    return values, grad, valid
