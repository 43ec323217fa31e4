"""Gauss-Newton solver over poses, intrinsics, and dense disparities.

Unknown ordering: [6 per non-frozen pose | 4 per stream if optimizing
intrinsics | 1 per pixel per keyframe]. The disparity block is diagonal and is
eliminated by a Schur complement; Levenberg damping (lm * diag) guards steps,
falling back to plain Gauss-Newton as steps keep being accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import residuals, robust
from .geometry import Intrinsics, se3_exp
from .graph import KeyframeGraph
from .residuals import (EmbeddingResidualConfig, EnergyBreakdown, RegConfig, edge_energies,
                        evaluate_edge, total_energy)
from .robust import KernelConfig


@dataclass
class SolverConfig:
    max_iters: int = 30
    update_tol: float = 1e-8
    lm_init: float = 1e-4
    lm_grow: float = 10.0
    lm_shrink: float = 0.5
    lm_min: float = 1e-12
    lm_max: float = 1e10
    kernel: KernelConfig = field(default_factory=KernelConfig)
    embed: EmbeddingResidualConfig = field(default_factory=EmbeddingResidualConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    lambda_photo: float = 1.0
    lambda_embed: float = 2.0
    kernel_mode: str = "ark"   # "ark" | "fixed"
    fixed_alpha: float = 2.0
    optimize_intrinsics: bool = False
    window: int = None
    freeze_similarity: bool = False
    min_disparity: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.update_tol <= 0 or self.lm_init <= 0:
            raise ValueError("update_tol and lm_init must be positive")
        if self.kernel_mode not in ("ark", "fixed"):
            raise ValueError(f"unknown kernel mode {self.kernel_mode!r}")

    def energy(self, graph, frozen_alpha=None) -> EnergyBreakdown:
        return total_energy(graph, kernel=self.kernel, embed=self.embed, reg=self.reg,
                            lambda_photo=self.lambda_photo, lambda_embed=self.lambda_embed,
                            kernel_mode=self.kernel_mode, fixed_alpha=self.fixed_alpha,
                            frozen_alpha=frozen_alpha)


@dataclass(eq=False)
class ProblemLayout:
    """Index bookkeeping for the stacked unknown vector."""

    pose_slices: list          # per keyframe: slice into the reduced block, or None if frozen
    intrinsic_slices: dict     # stream id -> slice, empty unless optimizing intrinsics
    n_reduced: int             # poses + intrinsics
    pixels_per_frame: int
    n_disparity: int

    @staticmethod
    def build(graph: KeyframeGraph, config: SolverConfig) -> "ProblemLayout":
        offset = 0
        pose_slices = []
        for kf in graph.keyframes:
            if kf.frozen:
                pose_slices.append(None)
            else:
                pose_slices.append(slice(offset, offset + 6))
                offset += 6
        intrinsic_slices = {}
        if config.optimize_intrinsics:
            for stream in sorted(graph.intrinsics):
                intrinsic_slices[stream] = slice(offset, offset + 4)
                offset += 4
        h, w = graph.grid_shape
        n_px = h * w
        return ProblemLayout(pose_slices, intrinsic_slices, offset, n_px,
                             n_px * len(graph.keyframes))

    def disparity_slice(self, kf_index: int) -> slice:
        start = kf_index * self.pixels_per_frame
        return slice(start, start + self.pixels_per_frame)

    @property
    def n_total(self) -> int:
        return self.n_reduced + self.n_disparity


@dataclass(eq=False)
class NormalEquations:
    """Gauss-Newton system in block form; b is the objective gradient.

    The full matrix is [[pose_h, coupling], [coupling.T, diag(disp_h)]].
    """

    layout: ProblemLayout
    pose_h: np.ndarray     # (P, P)
    coupling: np.ndarray   # (P, D)
    disp_h: np.ndarray     # (D,)
    pose_g: np.ndarray     # (P,)
    disp_g: np.ndarray     # (D,)
    energies: EnergyBreakdown

    def to_dense(self):
        """Materialize (H, b); intended for small oracle problems only."""
        n = self.layout.n_total
        p = self.layout.n_reduced
        h = np.zeros((n, n))
        h[:p, :p] = self.pose_h
        h[:p, p:] = self.coupling
        h[p:, :p] = self.coupling.T
        h[p:, p:] = np.diag(self.disp_h)
        return h, np.concatenate([self.pose_g, self.disp_g])


def _check_finite(arrays, edge, context):
    for arr in arrays:
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            pixel = int(np.argwhere(bad)[0][0])
            raise FloatingPointError(
                f"non-finite {context} at edge ({edge.i}, {edge.j}), pixel index {pixel}")


def _frozen_alphas(graph: KeyframeGraph, config: SolverConfig):
    """Similarity-driven shape parameters captured at the current state."""
    alphas = []
    for obs in graph.edges:
        kf_i, kf_j = graph.keyframes[obs.i], graph.keyframes[obs.j]
        ev = evaluate_edge(kf_i, kf_j, obs, graph.intrinsics[kf_i.stream],
                           graph.intrinsics[kf_j.stream], config.embed,
                           need_similarity=True, need_embedding=False)
        alphas.append(np.where(ev.valid_embed, robust.adaptive_alpha(ev.cs, config.kernel),
                               config.kernel.alpha_static))
    return alphas


def assemble(graph: KeyframeGraph, config: SolverConfig, frozen_alpha=None) -> NormalEquations:
    """Accumulate the weighted Gauss-Newton normal equations over all edges and priors.

    Per pixel the flow residual is robustified through the IRLS weight of the
    similarity-adapted loss (folded with the flow confidence); the embedding
    term enters as a plain weighted quadratic; the disparity prior anchors each
    pixel with weight alpha_disp.
    """
    layout = ProblemLayout.build(graph, config)
    p = layout.n_reduced
    pose_h = np.zeros((p, p))
    coupling = np.zeros((p, layout.n_disparity))
    disp_h = np.zeros(layout.n_disparity)
    pose_g = np.zeros(p)
    disp_g = np.zeros(layout.n_disparity)
    e_photo = 0.0
    e_embed = 0.0

    need_embedding = config.lambda_embed != 0.0
    need_similarity = config.kernel_mode == "ark" and frozen_alpha is None

    for eidx, obs in enumerate(graph.edges):
        kf_i, kf_j = graph.keyframes[obs.i], graph.keyframes[obs.j]
        ev = evaluate_edge(kf_i, kf_j, obs, graph.intrinsics[kf_i.stream],
                           graph.intrinsics[kf_j.stream], config.embed,
                           need_similarity=need_similarity, need_embedding=need_embedding,
                           with_jacobians=True, with_intrinsics=config.optimize_intrinsics)
        _check_finite((ev.r_flow, ev.jf_pose_i, ev.jf_pose_j, ev.jf_disp,
                       ev.r_embed, ev.je_pose_i, ev.je_pose_j, ev.je_disp),
                      obs, "residual/Jacobian")

        override = frozen_alpha[eidx] if frozen_alpha is not None else None
        alpha = residuals.alpha_for_edge(ev, config.kernel, config.kernel_mode,
                                         config.fixed_alpha, override)
        ep, ee = edge_energies(ev, config.kernel, config.kernel_mode, config.fixed_alpha, alpha)
        e_photo += ep
        e_embed += ee

        r_norm = np.linalg.norm(ev.r_flow, axis=-1)
        w_ark = robust.irls_weight(r_norm, alpha, config.kernel.c, config.kernel.eps)
        w_flow = config.lambda_photo * robust.fold_weight(ev.confidence, w_ark) * ev.valid_flow

        slot_i = layout.pose_slices[obs.i]
        slot_j = layout.pose_slices[obs.j]
        d_slice = layout.disparity_slice(obs.i)

        blocks = []  # (slot, jac (N, 2, 6) or (N, 2, 4))
        if slot_i is not None:
            blocks.append((slot_i, ev.jf_pose_i))
        if slot_j is not None:
            blocks.append((slot_j, ev.jf_pose_j))
        if config.optimize_intrinsics:
            blocks.append((layout.intrinsic_slices[kf_i.stream], ev.jf_intr))
        for a, (sa, ja) in enumerate(blocks):
            pose_g[sa] += np.einsum("n,nai,na->i", w_flow, ja, ev.r_flow)
            for sb, jb in blocks[a:]:
                h_ab = np.einsum("n,nai,naj->ij", w_flow, ja, jb)
                if sa == sb:
                    pose_h[sa, sb] += h_ab
                else:
                    pose_h[sa, sb] += h_ab
                    pose_h[sb, sa] += h_ab.T
            cross = np.einsum("n,nai,na->ni", w_flow, ja, ev.jf_disp)  # (N, dim)
            coupling[sa, d_slice] += cross.T
        disp_h[d_slice] += w_flow * np.einsum("na,na->n", ev.jf_disp, ev.jf_disp)
        disp_g[d_slice] += w_flow * np.einsum("na,na->n", ev.jf_disp, ev.r_flow)

        if need_embedding:
            # True gradient of lambda * sum w r^2 carries a factor 2.
            w_emb = 2.0 * config.lambda_embed * ev.confidence * ev.valid_embed
            eblocks = []
            if slot_i is not None:
                eblocks.append((slot_i, ev.je_pose_i))
            if slot_j is not None:
                eblocks.append((slot_j, ev.je_pose_j))
            if config.optimize_intrinsics and ev.je_intr is not None:
                eblocks.append((layout.intrinsic_slices[kf_i.stream], ev.je_intr))
            for a, (sa, ja) in enumerate(eblocks):
                pose_g[sa] += np.einsum("n,ni,n->i", w_emb, ja, ev.r_embed)
                for sb, jb in eblocks[a:]:
                    h_ab = np.einsum("n,ni,nj->ij", w_emb, ja, jb)
                    if sa == sb:
                        pose_h[sa, sb] += h_ab
                    else:
                        pose_h[sa, sb] += h_ab
                        pose_h[sb, sa] += h_ab.T
                coupling[sa, d_slice] += (ja * (w_emb * ev.je_disp)[:, None]).T
            disp_h[d_slice] += w_emb * ev.je_disp**2
            disp_g[d_slice] += w_emb * ev.je_disp * ev.r_embed

    e_reg = 0.0
    for kf in graph.keyframes:
        res, valid = residuals.disparity_reg_residual(kf.disparity, kf.disparity_prior,
                                                      config.reg)
        e_reg += float(np.sum(res[valid] ** 2))
        d_slice = layout.disparity_slice(kf.index)
        w_reg = 2.0 * config.reg.alpha_disp * valid.reshape(-1)
        disp_h[d_slice] += w_reg
        diff = (kf.disparity - kf.disparity_prior).reshape(-1)
        disp_g[d_slice] += w_reg * np.where(valid.reshape(-1), diff, 0.0)

    total = config.lambda_photo * e_photo + config.lambda_embed * e_embed + e_reg
    return NormalEquations(layout=layout, pose_h=pose_h, coupling=coupling, disp_h=disp_h,
                           pose_g=pose_g, disp_g=disp_g,
                           energies=EnergyBreakdown(total, e_photo, e_embed, e_reg))


def solve_normal_equations(ne: NormalEquations, lm: float) -> np.ndarray:
    """Solve (H + lm diag(H)) delta = -b via Schur elimination of the disparity block.

    Raises numpy.linalg.LinAlgError when the damped reduced system cannot be
    factorized. Disparity entries with an identically zero diagonal receive a
    zero update (unobserved pixels).
    """
    p = ne.layout.n_reduced
    disp_damped = ne.disp_h * (1.0 + lm)
    inv_disp = np.zeros_like(disp_damped)
    np.divide(1.0, disp_damped, out=inv_disp, where=disp_damped > 0)

    if p > 0:
        pose_damped = ne.pose_h + lm * np.diag(np.diag(ne.pose_h))
        ec = ne.coupling * inv_disp[None, :]
        schur = pose_damped - ec @ ne.coupling.T
        rhs = -ne.pose_g + ec @ ne.disp_g
        cho = scipy.linalg.cho_factor(schur, check_finite=False)
        delta_pose = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    else:
        delta_pose = np.zeros(0)
    delta_disp = inv_disp * (-ne.disp_g - ne.coupling.T @ delta_pose)
    return np.concatenate([delta_pose, delta_disp])


def retract(graph: KeyframeGraph, delta: np.ndarray, config: SolverConfig) -> KeyframeGraph:
    """Apply a stacked update: exp-compose poses, add intrinsics, add and clamp disparities."""
    layout = ProblemLayout.build(graph, config)
    if delta.shape != (layout.n_total,):
        raise ValueError(f"delta has {delta.shape[0]} entries, expected {layout.n_total}")
    keyframes = []
    disp_delta = delta[layout.n_reduced:]
    for kf in graph.keyframes:
        slot = layout.pose_slices[kf.index]
        pose = kf.pose if slot is None else se3_exp(delta[slot]).compose(kf.pose)
        disp = kf.disparity + disp_delta[layout.disparity_slice(kf.index)].reshape(kf.disparity.shape)
        disp = np.maximum(disp, config.min_disparity)
        keyframes.append(replace(kf, pose=pose, disparity=disp))
    intrinsics = dict(graph.intrinsics)
    for stream, slot in layout.intrinsic_slices.items():
        intrinsics[stream] = Intrinsics.from_array(intrinsics[stream].as_array() + delta[slot])
    return KeyframeGraph(keyframes=keyframes, edges=list(graph.edges), intrinsics=intrinsics)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    e_total: float
    e_photo_ark: float
    e_embed: float
    e_reg: float
    accepted: bool


def solve(graph: KeyframeGraph, config: SolverConfig):
    """Damped Gauss-Newton loop per the joint bundle-adjustment recipe.

    Each outer iteration follows the IRLS treatment of the adaptive kernel:
    the similarity-driven shape parameters are derived from the current state
    and held fixed while the normal equations are built, solved, and the step
    is scored (b is then the exact objective gradient for that kernel state).
    With freeze_similarity the shapes are captured once at the initial state
    instead.

    Returns (optimized graph, trace). Row 0 of the trace holds the initial
    energies; each further row is one solve attempt with its accept flag, all
    evaluated under that iteration's kernel state. Raises RuntimeError when
    the damped reduced system stays singular.
    """
    if not graph.edges:
        raise ValueError("graph has no edges; the problem is unconstrained")
    if config.window is not None and config.window < len(graph.keyframes):
        raise ValueError("window cropping must happen at graph construction time")

    state = graph.copy()
    adaptive = config.kernel_mode == "ark"
    global_alpha = _frozen_alphas(state, config) if (adaptive and config.freeze_similarity) \
        else None

    trace = []
    lm = config.lm_init
    for it in range(1, config.max_iters + 1):
        alphas = global_alpha if global_alpha is not None else (
            _frozen_alphas(state, config) if adaptive else None)
        ne = assemble(state, config, alphas)
        e_cur = ne.energies
        if it == 1:
            trace.append(IterationRecord(0, e_cur.total, e_cur.photo_ark, e_cur.embed,
                                         e_cur.reg, True))
        accepted = False
        while True:
            try:
                delta = solve_normal_equations(ne, lm)
            except np.linalg.LinAlgError:
                lm *= config.lm_grow
                if lm > config.lm_max:
                    raise RuntimeError(
                        "reduced system stayed singular through damping escalation; "
                        "the problem is degenerate") from None
                continue
            if np.linalg.norm(delta) < config.update_tol:
                return state, trace
            candidate = retract(state, delta, config)
            e_new = config.energy(candidate, alphas)
            accepted = e_new.total < e_cur.total
            trace.append(IterationRecord(it, e_new.total, e_new.photo_ark, e_new.embed,
                                         e_new.reg, accepted))
            if accepted:
                state = candidate
                lm = max(lm * config.lm_shrink, config.lm_min)
                break
            lm *= config.lm_grow
            if lm > config.lm_max:
                # Gradient-direction steps stopped helping under the current
                # kernel state: treat as converged.
                return state, trace
    return state, trace
