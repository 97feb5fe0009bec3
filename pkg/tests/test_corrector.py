import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisp import sdf
from crisp.corrector import (
    CorrectorConfig,
    MultiViewBuffer,
    bcd_correct,
    code_gradient,
    code_objective,
    kkt_residual,
    lsq_correct,
    objective_F,
    pose_gradient,
    pose_objective,
    recombine_code,
    shape_update_lsq,
    shape_update_pgd,
    solve_simplex_lsq,
    z_update,
)
from crisp.geometry import Pose, arun_fit, exp_se3
from crisp.shapes import KernelBlend, LinearBlend, build_F_matrix, is_simplex
from crisp.simulator import PerturbationModel, SceneConfig, make_scene, synth_estimates


@pytest.fixture(scope="module")
def clean_frame(basis4, linear4):
    return make_scene(basis4, linear4, SceneConfig(n_points=150, seed=3), 0)[0]


@pytest.fixture(scope="module")
def noisy_frames(basis4, linear4):
    return [make_scene(basis4, linear4, SceneConfig(n_points=150, noise_sigma=1e-3, seed=4), i)[0] for i in range(4)]


class TestConfig:
    def test_defaults(self):
        c = CorrectorConfig()
        assert (c.z_step, c.z_iters, c.h_step, c.h_iters, c.outer_rounds) == (1e-3, 50, 1e-2, 25, 3)
        assert c.convergence_tol == 1e-6

    @pytest.mark.parametrize("kw", [{"z_step": 0}, {"h_step": -1}, {"z_iters": 0}, {"outer_rounds": 0}, {"step_growth": 0.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            CorrectorConfig(**kw)

    def test_buffer_capacity(self, rng):
        buf = MultiViewBuffer()
        assert buf.capacity == 50
        for _ in range(60):
            X = rng.normal(size=(5, 3))
            buf.append(X, X)
        assert len(buf) == 50
        with pytest.raises(ValueError):
            buf.append(np.zeros((5, 3)), np.zeros((4, 3)))


class TestObjective:
    def test_zero_at_ground_truth(self, clean_frame, linear4):
        assert objective_F(clean_frame.gt_Z, clean_frame.gt_alpha, clean_frame.X, linear4) < 1e-10

    def test_zero_for_identity_fit(self, linear4):
        a = np.array([0.1, 0.6, 0.2, 0.1])
        Z = sdf.sample_surface(linear4.decode(a), 50, seed=2)
        assert objective_F(Z, a, Z, linear4) < 1e-10

    def test_independent_of_z_parameterisation(self, clean_frame, linear4, rng):
        # any Z related to the fitted pose gives the same value
        T = Pose(exp_se3(rng.normal(size=6) * 0.1).rotation, rng.normal(size=3) * 0.1)
        Z = T.apply(clean_frame.gt_Z)
        pose = arun_fit(clean_frame.X, Z)
        assert objective_F(Z, clean_frame.gt_alpha, clean_frame.X, linear4) == pytest.approx(
            pose_objective(pose, clean_frame.X, clean_frame.gt_alpha, linear4), rel=1e-12
        )

    def test_pose_gradient_fd(self, noisy_frames, linear4, rng):
        fr = noisy_frames[0]
        for _ in range(10):
            pose = exp_se3(rng.normal(size=6) * 0.05).compose(fr.gt_pose)
            a = rng.dirichlet(np.ones(4))
            _, g = pose_gradient(pose, fr.X, a, linear4)
            h = 1e-6
            g_fd = np.array(
                [
                    (pose_objective(exp_se3(h * e).compose(pose), fr.X, a, linear4) - pose_objective(exp_se3(-h * e).compose(pose), fr.X, a, linear4)) / (2 * h)
                    for e in np.eye(6)
                ]
            )
            assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) < 1e-4

    @pytest.mark.parametrize("tau", [None, 0.5])
    def test_code_gradient_fd(self, noisy_frames, basis4, tau, rng):
        # tau = 0.05 saturates the kernel weights, leaving nothing for differences to resolve
        dec = LinearBlend(basis4) if tau is None else KernelBlend(basis4, tau)
        # scaled off the surface so the residuals are not tiny
        Z = 1.1 * noisy_frames[1].gt_Z
        for _ in range(10):
            a = rng.dirichlet(np.ones(4))
            _, g = code_gradient(Z, a, dec)
            h = 1e-6
            g_fd = np.array([(code_objective(Z, a + h * e, dec) - code_objective(Z, a - h * e, dec)) / (2 * h) for e in np.eye(4)])
            assert np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd) < 1e-4


class TestZUpdate:
    def test_ground_truth_is_stationary(self, clean_frame, linear4):
        pose, Z, info = z_update(clean_frame.X, clean_frame.gt_Z, clean_frame.gt_alpha, linear4)
        np.testing.assert_allclose(Z, clean_frame.gt_Z, atol=1e-9)
        assert info["G"] < 1e-10

    @pytest.mark.parametrize("precondition", [False, True])
    def test_descends(self, noisy_frames, linear4, precondition):
        cfg = CorrectorConfig(z_precondition=precondition)
        for fr in noisy_frames:
            Z, _ = synth_estimates(fr, PerturbationModel(rot_deg=8, trans_m=0.03, seed=1))
            pose, Zh, info = z_update(fr.X, Z, fr.gt_alpha, linear4, cfg)
            assert info["G"] < info["G0"]
            np.testing.assert_allclose(Zh, pose.apply(fr.X))
            assert np.linalg.det(pose.rotation) == pytest.approx(1.0)

    def test_gauss_newton_converges_tightly(self, noisy_frames, linear4):
        fr = noisy_frames[2]
        Z, _ = synth_estimates(fr, PerturbationModel(rot_deg=5, trans_m=0.02, seed=3))
        _, _, info = z_update(fr.X, Z, fr.gt_alpha, linear4, CorrectorConfig(z_precondition=True))
        floor = objective_F(fr.gt_Z, fr.gt_alpha, fr.X, linear4)
        assert info["G"] <= floor * (1 + 1e-6)


class TestShapeUpdates:
    def test_pgd_iterates_feasible_and_descending(self, noisy_frames, linear4):
        fr = noisy_frames[0]
        a0 = np.array([0.7, 0.1, 0.1, 0.1])
        trace = []
        a = shape_update_pgd(fr.gt_Z, a0, linear4, trace=trace)
        assert all(is_simplex(t, 1e-9) for t in trace)
        objs = [code_objective(fr.gt_Z, t, linear4) for t in trace]
        assert all(b < a_ for a_, b in zip(objs, objs[1:]))
        assert np.linalg.norm(a - fr.gt_alpha) < np.linalg.norm(a0 - fr.gt_alpha)

    def test_lsq_closed_form(self):
        # min c1^2 + 4 c2^2 on the simplex: c = (0.8, 0.2), objective 0.8
        c, info = solve_simplex_lsq(np.diag([1.0, 2.0]))
        np.testing.assert_allclose(c, [0.8, 0.2], atol=1e-9)
        assert info["objective"] == pytest.approx(0.8, abs=1e-9)

    def test_lsq_vertex_solution(self):
        A = np.array([[0.0, 1.0, 2.0], [0.0, 3.0, 1.0]])
        c, info = solve_simplex_lsq(A)
        # the ridge moves the exact optimum off the vertex by ~ridge / |A_2|^2
        np.testing.assert_allclose(c, [1, 0, 0], atol=1e-10)

    def test_lsq_singular_gram_takes_min_norm(self):
        # identical columns: every split is optimal, the ridge picks the even one
        A = np.ones((4, 2))
        c, _ = solve_simplex_lsq(A)
        np.testing.assert_allclose(c, [0.5, 0.5], atol=1e-9)

    def test_lsq_noiseless_zero_objective(self, clean_frame, basis4, linear4):
        c, info = shape_update_lsq(clean_frame.gt_Z, basis4, clean_frame.gt_alpha, linear4)
        assert info["objective"] < 1e-10
        assert is_simplex(c)
        assert kkt_residual(c, 2 * (info["F"].T @ info["F"]) @ c, 1e-3) < 1e-6

    def test_recombination_keeps_zero_set(self, basis4, linear4, rng):
        h = rng.dirichlet(np.ones(4))
        c = rng.dirichlet(np.ones(5))
        D = rng.uniform(0.5, 2.0, size=5)
        a = recombine_code(c, h, D)
        assert is_simplex(a)
        Z = rng.uniform(-1, 1, size=(100, 3))
        active = build_F_matrix(Z, basis4, h, linear4) @ (c * D)
        decoded = linear4.evaluate(a, Z)
        # same field up to a positive factor
        ratio = active / decoded
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-10)
        assert ratio[0] > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(1, 12))
def test_lsq_kkt_certificate(seed, m, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, m))
    c, info = solve_simplex_lsq(A)
    assert is_simplex(c, 1e-9)
    grad = 2 * (A.T @ A + 1e-10 * np.eye(m)) @ c
    assert kkt_residual(c, grad, 1e-3 / (1 + np.linalg.norm(A) ** 2)) < 1e-6
    # no simplex vertex does better
    best_vertex = min(np.sum(A[:, j] ** 2) for j in range(m))
    assert info["objective"] <= best_vertex + 1e-12


class TestSolvers:
    def test_bcd_noiseless_ground_truth(self, clean_frame, linear4):
        res = bcd_correct([(clean_frame.X, clean_frame.gt_Z)], clean_frame.gt_alpha, linear4)
        assert res.objective_trace[-1] < 1e-10
        np.testing.assert_allclose(res.Z_hat[0], clean_frame.gt_Z, atol=1e-9)
        np.testing.assert_allclose(res.code, clean_frame.gt_alpha, atol=1e-9)

    @pytest.mark.parametrize("solver", ["bcd", "lsq"])
    def test_trace_monotone_and_feasible(self, solver, noisy_frames, basis4, linear4):
        for fr in noisy_frames:
            Z, h = synth_estimates(fr, PerturbationModel(rot_deg=8, trans_m=0.04, code_perturb=0.2, seed=2))
            if solver == "bcd":
                res = bcd_correct([(fr.X, Z)], h, linear4)
            else:
                res = lsq_correct([(fr.X, Z)], h, basis4, linear4)
                assert is_simplex(res.coeffs)
            tr = res.objective_trace
            assert all(b <= a * (1 + 1e-6) for a, b in zip(tr, tr[1:]))
            assert is_simplex(res.code)

    @pytest.mark.parametrize("solver", ["bcd", "lsq"])
    def test_relaxed_equivalence(self, solver, noisy_frames, basis4, linear4):
        fr = noisy_frames[3]
        Z, h = synth_estimates(fr, PerturbationModel(rot_deg=6, trans_m=0.03, code_perturb=0.1, seed=5))
        res = bcd_correct([(fr.X, Z)], h, linear4) if solver == "bcd" else lsq_correct([(fr.X, Z)], h, basis4, linear4)
        Zt = arun_fit(fr.X, res.Z_hat[0]).apply(fr.X)
        a = code_objective(res.Z_hat[0], res.code, linear4)
        b = code_objective(Zt, res.code, linear4)
        assert abs(a - b) <= 1e-12

    def test_lsq_improves_shape(self, basis4, linear4):
        from crisp.simulator import surface_model
        from crisp.geometry import chamfer

        better = 0
        for i in range(4):
            fr = make_scene(basis4, linear4, SceneConfig(n_points=200, noise_sigma=5e-4, seed=21), i)[0]
            Z, h = synth_estimates(fr, PerturbationModel(code_perturb=0.4, seed=i))
            res = lsq_correct([(fr.X, Z)], h, basis4, linear4)
            gt = surface_model(linear4, fr.gt_alpha, 300)
            better += chamfer(surface_model(linear4, res.code, 300), gt) < chamfer(surface_model(linear4, h, 300), gt)
        assert better == 4

    def test_multi_view_resolves_ambiguity(self, bump):
        dec = LinearBlend(bump)
        gt = np.array([0.2, 0.8])
        init = np.array([0.9, 0.1])
        cfg = SceneConfig(n_points=150, n_views=2, gt_alpha=gt.tolist(), view_dirs=[[-1, 0, 0], [1, 0, 0]], seed=8)
        frames = make_scene(bump, dec, cfg, 0)
        buf = [(f.X, f.gt_Z) for f in frames]
        single = bcd_correct(buf[:1], init, dec)
        multi = bcd_correct(buf, init, dec)
        assert np.linalg.norm(multi.code - gt) < np.linalg.norm(single.code - gt)
        assert np.linalg.norm(multi.code - gt) < 0.05

    def test_result_json(self, clean_frame, linear4):
        res = bcd_correct([(clean_frame.X, clean_frame.gt_Z)], clean_frame.gt_alpha, linear4)
        doc = json.loads(res.to_json())
        assert len(doc["poses"][0]) == 12
        assert doc["solver"] == "bcd"
        np.testing.assert_allclose(doc["code"], res.code)

    def test_empty_buffer(self, linear4):
        with pytest.raises(ValueError):
            bcd_correct([], np.full(4, 0.25), linear4)
