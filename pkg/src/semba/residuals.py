"""Per-edge residual terms: photometric flow, embedding similarity, disparity prior.

Validity conventions (enforced here and relied on by the solver):
  * geometric failures (zero disparity, behind-camera, out-of-bounds target)
    invalidate a pixel for every term;
  * a degenerate embedding norm invalidates only the embedding term;
  * invalid pixels contribute exactly zero to energies and normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, robust
from .features import bilinear_sample
from .geometry import Intrinsics, Pose

_NORM_EPS = 1e-8


@dataclass(eq=False)
class FlowObservation:
    """Dense target flow and confidence for a directed keyframe pair i -> j."""

    i: int
    j: int
    flow: np.ndarray        # (2, H, W), channels (dx, dy)
    confidence: np.ndarray  # (H, W), finite and non-negative

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.i == self.j:
            raise ValueError(f"self-edge ({self.i}, {self.j}) is not allowed")
        if self.flow.ndim != 3 or self.flow.shape[0] != 2:
            raise ValueError(f"flow must be (2, H, W), got {self.flow.shape}")
        if self.confidence.shape != self.flow.shape[1:]:
            raise ValueError(
                f"confidence shape {self.confidence.shape} does not match flow {self.flow.shape}")
        if not np.all(np.isfinite(self.confidence)) or np.any(self.confidence < 0):
            raise ValueError("confidence must be finite and non-negative")


@dataclass(frozen=True)
class EmbeddingResidualConfig:
    """mode 'angular': r = 1 - cs; mode 'photometric': r = lambda * sqrt(2 (1 - cs))."""

    mode: str = "photometric"
    lambda_embed: float = 2.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("angular", "photometric"):
            raise ValueError(f"unknown embedding residual mode {self.mode!r}")
        if self.lambda_embed <= 0:
            raise ValueError("lambda_embed must be positive")


@dataclass(frozen=True)
class RegConfig:
    alpha_disp: float = 1.0

    def __post_init__(self):
        if self.alpha_disp < 0:
            raise ValueError("alpha_disp must be non-negative")


def grid_pixels(height: int, width: int) -> np.ndarray:
    """All integer pixel coordinates of an H x W grid, row-major, as (H*W, 2) floats."""
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(float)


def in_bounds(u: np.ndarray, height: int, width: int) -> np.ndarray:
    """Sampling-domain test with an epsilon of round-off slack at the borders."""
    eps = 1e-9
    x, y = u[..., 0], u[..., 1]
    return (x >= -eps) & (x <= width - 1 + eps) & (y >= -eps) & (y <= height - 1 + eps)


def flow_residual(u, disparity, pose_i: Pose, pose_j: Pose, intrinsics: Intrinsics,
                  obs: FlowObservation):
    """Reprojection-minus-target flow residual at integer source pixels u (..., 2).

    Returns (r (..., 2), valid (...)). Invalid pixels (zero disparity,
    behind-camera, target out of bounds) carry zero residuals.
    """
    u = np.asarray(u, dtype=float)
    d = np.asarray(disparity, dtype=float)
    mu, valid = geometry.reproject(u, d, pose_i, pose_j, intrinsics)
    h, w = obs.confidence.shape
    valid = valid & in_bounds(mu, h, w)
    ix = u[..., 0].astype(int)
    iy = u[..., 1].astype(int)
    target = np.stack([obs.flow[0, iy, ix], obs.flow[1, iy, ix]], axis=-1)
    r = (mu - u) - target
    return np.where(valid[..., None], r, 0.0), valid


def _cosine(z_src, z_sampled):
    """Cosine similarity of row vectors with degenerate-norm masking."""
    n_src = np.linalg.norm(z_src, axis=-1)
    n_smp = np.linalg.norm(z_sampled, axis=-1)
    ok = (n_src > _NORM_EPS) & (n_smp > _NORM_EPS)
    denom = np.where(ok, n_src * n_smp, 1.0)
    cs = np.clip(np.sum(z_src * z_sampled, axis=-1) / denom, -1.0, 1.0)
    return np.where(ok, cs, 0.0), n_src, n_smp, ok


def _embed_residual_from_cs(cs, cfg: EmbeddingResidualConfig):
    if cfg.mode == "angular":
        return 1.0 - cs
    return cfg.lambda_embed * np.sqrt(2.0 * np.maximum(1.0 - cs, 0.0))


def _embed_dresidual_dcs(r, cfg: EmbeddingResidualConfig):
    if cfg.mode == "angular":
        return -np.ones_like(r)
    return -cfg.lambda_embed**2 / (r + cfg.eps)


def embedding_residual(u, disparity, pose_i: Pose, pose_j: Pose, intrinsics: Intrinsics,
                       features_i: np.ndarray, features_j: np.ndarray,
                       cfg: EmbeddingResidualConfig = EmbeddingResidualConfig()):
    """Cross-view embedding dissimilarity at integer source pixels u (..., 2).

    The source embedding is indexed directly; the target is bilinearly sampled
    at the reprojected location. Returns (r, cs, valid).
    """
    u = np.asarray(u, dtype=float)
    d = np.asarray(disparity, dtype=float)
    mu, valid_geo = geometry.reproject(u, d, pose_i, pose_j, intrinsics)
    ix = u[..., 0].astype(int)
    iy = u[..., 1].astype(int)
    z_src = np.moveaxis(features_i[:, iy, ix], 0, -1)
    z_smp, _, valid_bi = bilinear_sample(features_j, mu)
    cs, _, _, norm_ok = _cosine(z_src, z_smp)
    valid = valid_geo & valid_bi & norm_ok
    r = np.where(valid, _embed_residual_from_cs(cs, cfg), 0.0)
    return r, np.where(valid, cs, 0.0), valid


def embedding_jacobian(u, disparity, pose_i: Pose, pose_j: Pose, intrinsics: Intrinsics,
                       features_i: np.ndarray, features_j: np.ndarray,
                       cfg: EmbeddingResidualConfig = EmbeddingResidualConfig()):
    """Chain-rule derivatives of the embedding residual.

    Returns (d_pose_i (..., 6), d_pose_j (..., 6), d_disparity (...,), r, cs, valid).
    The chain is dr/dcs * dcs/dz_j * dz_j/du * du/d{pose, disparity}, with
    dcs/dz_j = (s - cs t) / ||z_j|| for the normalized source s and target t.
    """
    u = np.asarray(u, dtype=float)
    d = np.asarray(disparity, dtype=float)
    d_pose_i, d_pose_j, d_disp, mu, valid_geo = geometry.reprojection_jacobian(
        u, d, pose_i, pose_j, intrinsics)
    ix = u[..., 0].astype(int)
    iy = u[..., 1].astype(int)
    z_src = np.moveaxis(features_i[:, iy, ix], 0, -1)
    z_smp, dz_du, valid_bi = bilinear_sample(features_j, mu)
    cs, n_src, n_smp, norm_ok = _cosine(z_src, z_smp)
    valid = valid_geo & valid_bi & norm_ok

    r = np.where(valid, _embed_residual_from_cs(cs, cfg), 0.0)
    dr_dcs = _embed_dresidual_dcs(r, cfg)

    safe_src = np.where(norm_ok, n_src, 1.0)[..., None]
    safe_smp = np.where(norm_ok, n_smp, 1.0)[..., None]
    s_hat = z_src / safe_src
    t_hat = z_smp / safe_smp
    dcs_dz = (s_hat - cs[..., None] * t_hat) / safe_smp           # (..., K)
    dcs_du = np.einsum("...k,...ki->...i", dcs_dz, dz_du)         # (..., 2)
    scale = np.where(valid, dr_dcs, 0.0)
    jac_i = scale[..., None] * np.einsum("...i,...ij->...j", dcs_du, d_pose_i)
    jac_j = scale[..., None] * np.einsum("...i,...ij->...j", dcs_du, d_pose_j)
    jac_d = scale * np.einsum("...i,...i->...", dcs_du, d_disp)
    return jac_i, jac_j, jac_d, r, np.where(valid, cs, 0.0), valid


def disparity_reg_residual(disparity, prior, cfg: RegConfig = RegConfig()):
    """Prior-anchoring residual sqrt(alpha_disp) * (d - d_prior); zero where the prior is invalid.

    Returns (residuals, valid) with valid = prior > 0.
    """
    disparity = np.asarray(disparity, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if disparity.shape != prior.shape:
        raise ValueError(f"shape mismatch: {disparity.shape} vs {prior.shape}")
    valid = prior > 0
    res = np.sqrt(cfg.alpha_disp) * np.where(valid, disparity - prior, 0.0)
    return res, valid


@dataclass(eq=False)
class EdgeEvaluation:
    """Flattened per-pixel quantities for one directed edge (row-major pixel order)."""

    obs: FlowObservation
    pixels: np.ndarray            # (N, 2)
    confidence: np.ndarray        # (N,)
    r_flow: np.ndarray            # (N, 2)
    valid_flow: np.ndarray        # (N,)
    r_embed: np.ndarray           # (N,)
    cs: np.ndarray                # (N,)
    valid_embed: np.ndarray       # (N,)
    jf_pose_i: np.ndarray = None  # (N, 2, 6)
    jf_pose_j: np.ndarray = None
    jf_disp: np.ndarray = None    # (N, 2)
    je_pose_i: np.ndarray = None  # (N, 6)
    je_pose_j: np.ndarray = None
    je_disp: np.ndarray = None    # (N,)
    jf_intr: np.ndarray = None    # (N, 2, 4)
    je_intr: np.ndarray = None    # (N, 4)


def evaluate_edge(kf_i, kf_j, obs: FlowObservation, intr_i: Intrinsics, intr_j: Intrinsics,
                  embed_cfg: EmbeddingResidualConfig, *, need_similarity: bool = True,
                  need_embedding: bool = True, with_jacobians: bool = False,
                  with_intrinsics: bool = False) -> EdgeEvaluation:
    """Evaluate flow and embedding residuals (and optionally Jacobians) for one edge.

    The reprojection is computed once and shared between the two terms.
    need_similarity requests the cosine field even when the embedding term
    itself is disabled (the adaptive kernel consumes it either way).
    """
    h, w = kf_i.disparity.shape
    u = grid_pixels(h, w)
    d = kf_i.disparity.reshape(-1)

    if with_jacobians:
        jf_i, jf_j, jf_d, mu, valid_geo = geometry.reprojection_jacobian(
            u, d, kf_i.pose, kf_j.pose, intr_i, intr_j)
    else:
        mu, valid_geo = geometry.reproject(u, d, kf_i.pose, kf_j.pose, intr_i, intr_j)
        jf_i = jf_j = jf_d = None

    valid_flow = valid_geo & in_bounds(mu, h, w)
    target = obs.flow.reshape(2, -1).T
    r_flow = np.where(valid_flow[:, None], (mu - u) - target, 0.0)
    conf = obs.confidence.reshape(-1)

    n = u.shape[0]
    out = EdgeEvaluation(
        obs=obs, pixels=u, confidence=conf, r_flow=r_flow, valid_flow=valid_flow,
        r_embed=np.zeros(n), cs=np.zeros(n), valid_embed=np.zeros(n, dtype=bool),
        jf_pose_i=jf_i, jf_pose_j=jf_j, jf_disp=jf_d)

    dcs_du = None
    if need_similarity or need_embedding:
        ix = u[:, 0].astype(int)
        iy = u[:, 1].astype(int)
        z_src = kf_i.features[:, iy, ix].T
        z_smp, dz_du, valid_bi = bilinear_sample(kf_j.features, mu)
        cs, n_src, n_smp, norm_ok = _cosine(z_src, z_smp)
        valid_embed = valid_flow & valid_bi & norm_ok
        out.cs = np.where(valid_embed, cs, 0.0)
        out.valid_embed = valid_embed
        if need_embedding:
            r_embed = np.where(valid_embed, _embed_residual_from_cs(cs, embed_cfg), 0.0)
            out.r_embed = r_embed
            if with_jacobians:
                safe_src = np.where(norm_ok, n_src, 1.0)[:, None]
                safe_smp = np.where(norm_ok, n_smp, 1.0)[:, None]
                dcs_dz = (z_src / safe_src - cs[:, None] * (z_smp / safe_smp)) / safe_smp
                dcs_du = np.einsum("nk,nki->ni", dcs_dz, dz_du)
                scale = np.where(valid_embed, _embed_dresidual_dcs(r_embed, embed_cfg), 0.0)
                out.je_pose_i = scale[:, None] * np.einsum("ni,nij->nj", dcs_du, jf_i)
                out.je_pose_j = scale[:, None] * np.einsum("ni,nij->nj", dcs_du, jf_j)
                out.je_disp = scale * np.einsum("ni,ni->n", dcs_du, jf_d)

    if with_jacobians and with_intrinsics:
        if not np.array_equal(intr_i.as_array(), intr_j.as_array()):
            raise NotImplementedError(
                "intrinsics optimization requires a shared camera per edge")
        jk, _ = geometry.reprojection_intrinsics_jacobian(u, d, kf_i.pose, kf_j.pose, intr_i)
        out.jf_intr = jk
        if need_embedding and dcs_du is not None:
            scale = np.where(out.valid_embed, _embed_dresidual_dcs(out.r_embed, embed_cfg), 0.0)
            out.je_intr = scale[:, None] * np.einsum("ni,nij->nj", dcs_du, jk)
    return out


@dataclass(frozen=True)
class EnergyBreakdown:
    """Component energies: total = lambda_photo * photo_ark + lambda_embed * embed + reg."""

    total: float
    photo_ark: float
    embed: float
    reg: float


def alpha_for_edge(ev: EdgeEvaluation, kernel: robust.KernelConfig, kernel_mode: str,
                   fixed_alpha: float, alpha_override=None) -> np.ndarray:
    if alpha_override is not None:
        return alpha_override
    if kernel_mode == "fixed":
        return np.full(ev.cs.shape, fixed_alpha)
    if kernel_mode != "ark":
        raise ValueError(f"unknown kernel mode {kernel_mode!r}")
    alpha = robust.adaptive_alpha(ev.cs, kernel)
    # Pixels without a usable similarity fall back to the static regime.
    return np.where(ev.valid_embed, alpha, kernel.alpha_static)


def edge_energies(ev: EdgeEvaluation, kernel: robust.KernelConfig,
                  kernel_mode: str = "ark", fixed_alpha: float = 2.0, alpha_override=None):
    """(photo_ark, embed) energy contributions of one evaluated edge."""
    alpha = alpha_for_edge(ev, kernel, kernel_mode, fixed_alpha, alpha_override)
    r_norm = np.linalg.norm(ev.r_flow, axis=-1)
    rho = robust.barron_rho(r_norm, alpha, kernel.c)
    e_photo = float(np.sum(ev.confidence * rho * ev.valid_flow))
    e_embed = float(np.sum(ev.confidence * ev.r_embed**2 * ev.valid_embed))
    return e_photo, e_embed


def total_energy(graph, kernel: robust.KernelConfig = robust.KernelConfig(),
                 embed: EmbeddingResidualConfig = EmbeddingResidualConfig(),
                 reg: RegConfig = RegConfig(), lambda_photo: float = 1.0,
                 lambda_embed: float = 2.0, kernel_mode: str = "ark",
                 fixed_alpha: float = 2.0, frozen_alpha=None) -> EnergyBreakdown:
    """Objective value over a keyframe graph at its current state.

    frozen_alpha, when given, is a list of per-edge shape-parameter arrays
    (matching graph.edges order) that bypasses recomputing the similarity-driven
    alpha; used by the solver's freeze option.
    """
    e_photo = 0.0
    e_embed = 0.0
    need_embedding = lambda_embed != 0.0
    need_similarity = kernel_mode == "ark" and frozen_alpha is None
    for idx, obs in enumerate(graph.edges):
        kf_i = graph.keyframes[obs.i]
        kf_j = graph.keyframes[obs.j]
        ev = evaluate_edge(kf_i, kf_j, obs, graph.intrinsics[kf_i.stream],
                           graph.intrinsics[kf_j.stream], embed,
                           need_similarity=need_similarity,
                           need_embedding=need_embedding, with_jacobians=False)
        override = frozen_alpha[idx] if frozen_alpha is not None else None
        ep, ee = edge_energies(ev, kernel, kernel_mode, fixed_alpha, override)
        e_photo += ep
        e_embed += ee
    e_reg = 0.0
    for kf in graph.keyframes:
        res, valid = disparity_reg_residual(kf.disparity, kf.disparity_prior, reg)
        e_reg += float(np.sum(res[valid] ** 2))
    total = lambda_photo * e_photo + lambda_embed * e_embed + e_reg
    return EnergyBreakdown(total=total, photo_ark=e_photo, embed=e_embed, reg=e_reg)
