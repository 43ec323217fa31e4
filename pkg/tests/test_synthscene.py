import numpy as np
import pytest

from semba.evaluation import trajectory_ate
from semba.residuals import EmbeddingResidualConfig, evaluate_edge, total_energy
from semba.synthscene import SceneConfig, gen_scene, inject_dynamics, perturb_init


def bundles_equal(a, b):
    if len(a.edges) != len(b.edges):
        return False
    for x, y in zip(a.edges, b.edges):
        if not (np.array_equal(x.flow, y.flow) and np.array_equal(x.confidence, y.confidence)):
            return False
    for attr in ("gt_disparity", "prior_disparity", "init_disparity", "features", "labels"):
        for x, y in zip(getattr(a, attr), getattr(b, attr)):
            if not np.array_equal(x, y):
                return False
    for p, q in zip(a.gt_poses + a.init_poses, b.gt_poses + b.init_poses):
        if not (np.array_equal(p.rotation, q.rotation)
                and np.array_equal(p.translation, q.translation)):
            return False
    return True


class TestGenScene:
    def test_deterministic_given_seed(self):
        cfg = SceneConfig(num_keyframes=4, height=24, width=32, pose_sigma=0.01,
                          dynamic_fraction=0.1, flow_sigma=0.02, seed=9)
        assert bundles_equal(gen_scene(cfg), gen_scene(cfg))

    def test_different_seeds_differ(self):
        a = gen_scene(SceneConfig(num_keyframes=3, height=24, width=32, seed=1))
        b = gen_scene(SceneConfig(num_keyframes=3, height=24, width=32, seed=2))
        assert not bundles_equal(a, b)

    def test_ground_truth_is_zero_energy(self, clean_bundle):
        e = total_energy(clean_bundle.to_graph(initial=False))
        assert e.total <= 1e-9

    def test_labels_cover_at_least_four_classes(self, clean_bundle):
        seen = np.unique(np.concatenate([l.reshape(-1) for l in clean_bundle.labels]))
        assert seen.size >= 4

    def test_class_vectors_separated(self, clean_bundle):
        v = clean_bundle.class_vectors
        gram = v @ v.T
        off = gram[~np.eye(len(v), dtype=bool)]
        assert off.max() <= np.cos(np.radians(30.0)) + 1e-12
        assert np.abs(np.linalg.norm(v, axis=1) - 1.0).max() < 1e-12

    def test_disparities_positive_and_in_range(self, clean_bundle):
        lo, hi = clean_bundle.config.depth_range
        for d in clean_bundle.gt_disparity:
            depth = 1.0 / d
            assert depth.min() > 0.25 * lo and depth.max() < 4.0 * hi

    def test_zero_magnitude_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            gen_scene(SceneConfig(num_keyframes=3, height=24, width=32, magnitude=0.0))

    def test_trajectory_kinds(self):
        for kind in ("arc", "orbit", "random-walk"):
            bundle = gen_scene(SceneConfig(num_keyframes=4, height=24, width=32,
                                           trajectory=kind, seed=2))
            assert total_energy(bundle.to_graph(initial=False)).total <= 1e-9

    def test_unknown_trajectory(self):
        with pytest.raises(ValueError, match="unknown trajectory"):
            gen_scene(SceneConfig(num_keyframes=3, height=24, width=32, trajectory="spiral"))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(num_keyframes=1)
        with pytest.raises(ValueError):
            SceneConfig(height=4, width=32)
        with pytest.raises(ValueError):
            SceneConfig(dynamic_fraction=1.5)
        with pytest.raises(ValueError):
            SceneConfig(depth_range=(5.0, 1.0))
        with pytest.raises(ValueError):
            SceneConfig(num_classes=3)

    def test_flow_sigma_breaks_exactness(self):
        noisy = gen_scene(SceneConfig(num_keyframes=3, height=24, width=32,
                                      flow_sigma=0.1, seed=4))
        e = total_energy(noisy.to_graph(initial=False))
        assert e.total > 1e-6


class TestInjectDynamics:
    def test_fraction_is_exact(self, dynamic_bundle):
        measured = dynamic_bundle.measured_dynamic_fraction()
        assert 0.18 <= measured <= 0.22
        # The blob trimming makes the hit exact up to grid rounding.
        target = round(0.2 * 24 * 32) / (24 * 32)
        assert measured == pytest.approx(target, abs=1e-12)

    def test_full_decorrelation_kills_similarity(self, dynamic_bundle):
        g = dynamic_bundle.to_graph(initial=False)
        cs_vals = []
        for obs in dynamic_bundle.edges:
            ev = evaluate_edge(g.keyframes[obs.i], g.keyframes[obs.j], obs,
                               dynamic_bundle.intrinsics, dynamic_bundle.intrinsics,
                               EmbeddingResidualConfig())
            sel = dynamic_bundle.dynamic_masks[obs.i].reshape(-1) & ev.valid_embed
            cs_vals.append(ev.cs[sel])
        assert np.mean(np.concatenate(cs_vals)) <= 0.1

    def test_motion_five_px_residual_in_range(self, dynamic_bundle):
        g = dynamic_bundle.to_graph(initial=False)
        mags = []
        for obs in dynamic_bundle.edges:
            ev = evaluate_edge(g.keyframes[obs.i], g.keyframes[obs.j], obs,
                               dynamic_bundle.intrinsics, dynamic_bundle.intrinsics,
                               EmbeddingResidualConfig())
            sel = dynamic_bundle.dynamic_masks[obs.i].reshape(-1) & ev.valid_flow
            mags.append(np.linalg.norm(ev.r_flow[sel], axis=1))
        mean = np.mean(np.concatenate(mags))
        assert 4.0 <= mean <= 6.0

    def test_noop_corruption_keeps_data(self, clean_bundle):
        out = inject_dynamics(clean_bundle, fraction=0.2, motion_px=0.0, decorrelation=0.0)
        for a, b in zip(out.edges, clean_bundle.edges):
            assert np.array_equal(a.flow, b.flow)
            assert np.array_equal(a.confidence, b.confidence)
        for a, b in zip(out.features, clean_bundle.features):
            assert np.array_equal(a, b)
        assert out.dynamic_masks[0].mean() == pytest.approx(0.2, abs=0.01)

    def test_confidence_untouched(self, clean_bundle, dynamic_bundle):
        # Same seed, same base scene: corruption must not leak into confidence.
        clean_cfg_bundle = gen_scene(SceneConfig(num_keyframes=5, height=24, width=32,
                                                 pose_sigma=0.01, seed=11))
        for a, b in zip(dynamic_bundle.edges, clean_cfg_bundle.edges):
            assert np.array_equal(a.confidence, b.confidence)

    def test_fraction_bounds(self, clean_bundle):
        with pytest.raises(ValueError):
            inject_dynamics(clean_bundle, fraction=1.2, motion_px=1.0, decorrelation=0.5)


class TestPerturbInit:
    def test_zero_noise_is_identity(self, clean_bundle):
        out = perturb_init(clean_bundle, 0.0, 0.0, seed=7)
        assert bundles_equal(out, clean_bundle)

    def test_pose_noise_creates_initial_error(self, clean_bundle):
        out = perturb_init(clean_bundle, 0.01, 0.0, seed=7)
        ate = trajectory_ate(out.init_poses, out.gt_poses, "rigid")
        assert ate > 1e-4
        # Ground truth retained.
        for p, q in zip(out.gt_poses, clean_bundle.gt_poses):
            assert np.array_equal(p.translation, q.translation)

    def test_anchor_pose_kept(self, clean_bundle):
        out = perturb_init(clean_bundle, 0.05, 0.0, seed=3)
        assert np.array_equal(out.init_poses[0].translation,
                              clean_bundle.gt_poses[0].translation)

    def test_disparity_noise_creates_prior_energy(self, clean_bundle):
        out = perturb_init(clean_bundle, 0.0, 0.05, seed=7)
        e = total_energy(out.to_graph(initial=True))
        assert e.reg > 0.0
        for d in out.init_disparity:
            assert d.min() > 0.0

    def test_negative_sigma_rejected(self, clean_bundle):
        with pytest.raises(ValueError):
            perturb_init(clean_bundle, -0.1, 0.0)


class TestCrampedScenes:
    def test_tiny_grid_fails_loudly_or_produces_coverage(self):
        # 8x8 is the smallest legal grid; generation either succeeds with
        # usable confidence or rejects the configuration explicitly.
        try:
            bundle = gen_scene(SceneConfig(num_keyframes=2, height=8, width=8, seed=0,
                                           temporal_radius=1))
        except ValueError as exc:
            assert "cramped" in str(exc) or "classes" in str(exc)
        else:
            assert np.mean([e.confidence.mean() for e in bundle.edges]) > 0.01
