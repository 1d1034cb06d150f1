import numpy as np
import pytest

from diffopt import autodiff as ad
from diffopt.autodiff import Tensor
from diffopt.camera import (
    CameraCorrection,
    CameraTrajectory,
    CorrectionTensors,
    Keypoints2D,
    effective_camera,
    effective_camera_tensors,
    geman_mcclure,
    load_camera_json,
    load_keypoints_csv,
    project,
    reprojection_loss,
    reprojection_loss_tensors,
    save_camera_json,
    save_keypoints_csv,
)
from diffopt.kinematics import axis_angle_to_matrix, matrix_to_rot6d
from diffopt.synthdata import CorruptionSpec, ScenarioSpec, generate_gait, make_camera_trajectory, render_scene

from conftest import fd_gradient


def random_traj(rng, T=4):
    R = axis_angle_to_matrix(rng.standard_normal((T, 3)) * 0.4)
    return CameraTrajectory(
        R_slam=R,
        t_slam=rng.standard_normal((T, 3)) * 2 + 4,
        f_slam=np.full(T, 500.0),
        principal_point=np.array([320.0, 240.0]),
        image_size=(640, 480),
    )


def test_effective_camera_identity_correction(rng):
    traj = random_traj(rng)
    corr = CameraCorrection.identity(traj.T)
    for t in range(traj.T):
        R, tv, f = effective_camera(traj, corr, t)
        assert np.abs(R - traj.R_slam[t]).max() < 1e-12
        assert np.array_equal(tv, traj.t_slam[t])
        assert f == traj.f_slam[t]


def test_effective_camera_translation_scale(rng):
    traj = random_traj(rng)
    corr = CameraCorrection.identity(traj.T)
    corr.s_t[:] = 2.0
    for t in range(traj.T):
        _, tv, _ = effective_camera(traj, corr, t)
        assert np.allclose(tv, 2.0 * traj.t_slam[t])


def test_effective_camera_constructed_rotation_bias(rng):
    traj = random_traj(rng)
    corr = CameraCorrection.identity(traj.T)
    targets = axis_angle_to_matrix(rng.standard_normal((traj.T, 3)) * 0.5)
    corr.b_R = matrix_to_rot6d(targets) - matrix_to_rot6d(traj.R_slam)
    for t in range(traj.T):
        R, _, _ = effective_camera(traj, corr, t)
        assert np.abs(R - targets[t]).max() < 1e-6


def test_effective_camera_frame_out_of_range(rng):
    traj = random_traj(rng)
    with pytest.raises(ValueError):
        effective_camera(traj, CameraCorrection.identity(traj.T), traj.T)


def test_project_optical_axis_hits_principal_point():
    pp = np.array([320.0, 240.0])
    for d in (0.5, 2.0, 50.0):
        pix, ok = project(np.array([0.0, 0.0, d]), np.eye(3), np.zeros(3), 500.0, pp)
        assert ok and np.allclose(pix, pp)


def test_project_closed_form_pinhole():
    pix, ok = project(np.array([0.1, 0.0, 1.0]), np.eye(3), np.zeros(3), 500.0, [320.0, 240.0])
    assert ok and np.allclose(pix, [370.0, 240.0])


def test_project_linear_in_focal():
    pp = np.array([320.0, 240.0])
    p = np.array([0.3, -0.2, 2.0])
    pix1, _ = project(p, np.eye(3), np.zeros(3), 500.0, pp)
    pix2, _ = project(p, np.eye(3), np.zeros(3), 1000.0, pp)
    assert np.allclose(pix2 - pp, 2.0 * (pix1 - pp))


def test_project_behind_camera_flagged():
    pix, ok = project(np.array([0.0, 0.0, -1.0]), np.eye(3), np.zeros(3), 500.0, [0.0, 0.0])
    assert not ok


def test_geman_mcclure_basics():
    assert geman_mcclure(np.zeros(2), 100.0) == 0.0
    # half saturation exactly at ||r|| = sigma
    assert np.isclose(geman_mcclure(np.array([100.0, 0.0]), 100.0), 100.0**2 / 2)
    big = geman_mcclure(np.array([1e6 * 100.0, 0.0]), 100.0)
    assert abs(big - 100.0**2) < 1e-6 * 100.0**2


def test_geman_mcclure_monotone_and_bounded():
    sigma = 100.0
    rs = np.concatenate((np.linspace(0, 1e4, 2001), [1e6]))
    vals = np.array([geman_mcclure(np.array([r, 0.0]), sigma) for r in rs])
    assert np.all(np.diff(vals) >= 0)
    assert np.all(vals <= sigma**2)


def test_geman_mcclure_requires_positive_sigma():
    with pytest.raises(ValueError):
        geman_mcclure(np.zeros(2), 0.0)


def _gt_scene(T=12, kp_noise=0.0, seed=0):
    from diffopt.kinematics import build_default_skeleton

    skel = build_default_skeleton()
    gt = generate_gait(ScenarioSpec(kind="walk-line", T=T, seed=seed), skel)
    traj = make_camera_trajectory(ScenarioSpec(kind="walk-line", T=T, seed=seed), gt)
    spec = CorruptionSpec.none()
    spec.kp_noise_std = kp_noise
    scene = render_scene(gt, traj, skel, spec, seed=seed)
    return skel, gt, traj, scene


def test_reprojection_loss_zero_at_ground_truth():
    skel, gt, traj, scene = _gt_scene()
    loss = reprojection_loss(gt, skel, traj, CameraCorrection.identity(gt.T), scene.instance.kp)
    assert loss < 1e-10


def test_reprojection_loss_matches_noise_expectation():
    # 1 px isotropic noise: E[rho] ~= sigma^2 E[r2/(sigma^2+r2)] ~= E[r2] = 2 px^2
    skel, gt, traj, scene = _gt_scene(T=40, kp_noise=1.0, seed=5)
    kp = scene.instance.kp
    kp = Keypoints2D(kp.obs, np.ones_like(kp.conf))
    loss = reprojection_loss(gt, skel, traj, CameraCorrection.identity(gt.T), kp, sigma_gm=100.0)
    expected = 14 * 2.0  # 14 joints, E[||r||^2] = 2 sigma_noise^2 per joint
    assert abs(loss - expected) / expected < 0.20


def test_reprojection_loss_zero_confidence():
    skel, gt, traj, scene = _gt_scene()
    kp = Keypoints2D(scene.instance.kp.obs + 50.0, np.zeros_like(scene.instance.kp.conf))
    assert reprojection_loss(gt, skel, traj, CameraCorrection.identity(gt.T), kp) == 0.0


def test_outlier_boundedness_vs_squared_error():
    skel, gt, traj, scene = _gt_scene(T=10)
    kp = scene.instance.kp
    base = reprojection_loss(gt, skel, traj, CameraCorrection.identity(gt.T), kp, sigma_gm=100.0)
    obs = kp.obs.copy()
    obs[3, 5] += 1e4
    spoiled = Keypoints2D(obs, kp.conf)
    loss = reprojection_loss(gt, skel, traj, CameraCorrection.identity(gt.T), spoiled, sigma_gm=100.0)
    assert loss - base <= 100.0**2 / gt.T + 1e-6
    # a squared-error variant would grow without bound
    sq_delta = np.sum((obs - kp.obs) ** 2) / gt.T
    assert sq_delta > 1e6


def test_reprojection_gradient_wrt_corrections_fd(rng):
    skel, gt, traj, scene = _gt_scene(T=3, kp_noise=2.0, seed=2)
    kp = scene.instance.kp
    from diffopt.kinematics import fk_sequence

    majors = Tensor(fk_sequence(skel, gt.theta_seq, gt.phi_seq, gt.x_seq)["majors"])
    corr = CorrectionTensors(CameraCorrection.identity(gt.T))
    corr.b_R.data += rng.standard_normal(corr.b_R.shape) * 0.01
    corr.b_t.data += rng.standard_normal(corr.b_t.shape) * 0.05

    def loss_value():
        with ad.no_grad():
            R, tv, f = effective_camera_tensors(traj, corr)
            loss, _ = reprojection_loss_tensors(majors, R, tv, f, traj.principal_point, kp)
        return float(loss.data)

    ad.active_tape().clear()
    R, tv, f = effective_camera_tensors(traj, corr)
    loss, _ = reprojection_loss_tensors(majors, R, tv, f, traj.principal_point, kp)
    ad.backward(loss)
    for p in corr.parameters():
        fd = fd_gradient(loss_value, p.data, h=1e-6)
        scale = np.abs(fd) + 1e-3 * (np.abs(fd).max() + 1e-9)
        assert (np.abs(p.grad - fd) / scale).max() < 1e-4
        p.zero_grad()
    ad.active_tape().clear()


def test_camera_json_round_trip(tmp_path, rng):
    traj = random_traj(rng, T=5)
    save_camera_json(traj, tmp_path / "cam.json")
    loaded = load_camera_json(tmp_path / "cam.json")
    assert np.array_equal(loaded.R_slam, traj.R_slam)
    assert np.array_equal(loaded.t_slam, traj.t_slam)
    assert np.array_equal(loaded.f_slam, traj.f_slam)
    assert loaded.image_size == traj.image_size


def test_keypoints_csv_round_trip(tmp_path, rng):
    kp = Keypoints2D(rng.standard_normal((6, 14, 2)) * 100 + 300, rng.uniform(0, 1, (6, 14)))
    save_keypoints_csv(kp, tmp_path / "kp.csv")
    loaded = load_keypoints_csv(tmp_path / "kp.csv")
    assert np.array_equal(loaded.obs, kp.obs)
    assert np.array_equal(loaded.conf, kp.conf)
