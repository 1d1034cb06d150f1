"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with -s to see the lines as they complete:

    pytest tests/test_acceptance.py -s
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from diffopt import autodiff as ad
from diffopt.autodiff import Tensor
from diffopt.camera import (
    CameraCorrection,
    CorrectionTensors,
    effective_camera,
    effective_camera_tensors,
    geman_mcclure,
    reprojection_loss_tensors,
)
from diffopt.diffusion import (
    Denoiser,
    SdsConfig,
    add_noise,
    feature_tensors,
    gait_contact_statistic,
    make_schedule,
    sample_motion,
    sds_gradient,
)
from diffopt.kinematics import (
    NUM_JOINTS,
    Pose,
    axis_angle_to_matrix,
    build_default_skeleton,
    fk_tensors,
    forward_kinematics,
    matrix_to_axis_angle,
)
from diffopt.metrics import evaluate as evaluate_metrics
from diffopt.metrics import foot_skate
from diffopt.motionfield import (
    FreeMotionParams,
    MotionSequence,
    encode_phase,
    init_mlps,
    make_phase,
)
from diffopt.optimizer import ProblemInstance, StageConfig, solve, stage2_camera
from diffopt.synthdata import CorruptionSpec, ScenarioSpec, benchmark_scene, render_scene
from diffopt.synthdata import generate_gait, make_camera_trajectory

from conftest import fd_gradient

N_BENCH_SCENES = 10
BENCH_MODES = ("full", "single-stage", "no-mdm", "learnable-params")


def report(criterion: int, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness of every optimized loss path
# ---------------------------------------------------------------------------

def _tiny_setup(point_seed: int):
    skel = build_default_skeleton()
    T = 5
    rng = np.random.default_rng(point_seed)
    field = init_mlps(seed=point_seed, hidden=(6, 6), freq_pairs=4)
    # randomize all weights so each point is a genuinely different location;
    # the scale keeps poses away from the yaw-canonicalization singularity
    # (body pitched exactly +-90 deg), where no finite-difference check is
    # meaningful
    for p in field.parameters():
        p.data = rng.standard_normal(p.data.shape) * 0.05
    enc = Tensor(encode_phase(make_phase(T).tau, 4))
    gait = generate_gait(ScenarioSpec(kind="walk-line", T=T, seed=point_seed), skel)
    traj = make_camera_trajectory(ScenarioSpec(kind="walk-line", T=T, seed=point_seed), gait)
    scene = render_scene(gait, traj, skel, CorruptionSpec(), seed=point_seed)
    corr = CorrectionTensors(CameraCorrection.identity(T))
    corr.b_R.data += rng.standard_normal(corr.b_R.shape) * 0.01
    corr.b_t.data += rng.standard_normal(corr.b_t.shape) * 0.03
    return skel, T, field, enc, scene.instance, corr


def _check_leaves(build_loss, leaves, h=1e-6):
    ad.active_tape().clear()
    loss = build_loss()
    ad.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in leaves]
    for p in leaves:
        p.zero_grad()
    ad.active_tape().clear()

    def value():
        with ad.no_grad():
            return float(build_loss().data)

    # global floor: coordinates whose true gradient is zero compare as
    # zero-vs-FD-noise and must pass, while a dead gradient against a real
    # FD value still fails loudly
    gmax = max(float(np.abs(g).max()) for g in grads) + 1e-12
    worst = 0.0
    for p, g in zip(leaves, grads):
        fd = fd_gradient(value, p.data, h=h)
        scale = np.abs(fd) + 1e-4 * gmax + 1e-12
        worst = max(worst, float((np.abs(g - fd) / scale).max()))
    return worst


def test_criterion_1_gradient_correctness():
    t_start = time.perf_counter()
    worst = {"L_warmup": 0.0, "L_2D": 0.0, "L_Diff": 0.0}
    for point in range(3):
        skel, T, field, enc, inst, corr = _tiny_setup(point)

        def warmup_loss():
            from diffopt.optimizer import warmup_loss as wl

            return wl(field, enc, inst)

        worst["L_warmup"] = max(worst["L_warmup"], _check_leaves(warmup_loss, field.parameters()))

        def l2d_loss():
            theta, phi, x = field.forward(enc)
            _, _, majors = fk_tensors(skel, theta, phi, x)
            R_cam, t_cam, f_cam = effective_camera_tensors(inst.traj, corr)
            loss, _ = reprojection_loss_tensors(
                majors, R_cam, t_cam, f_cam, inst.traj.principal_point, inst.kp, 100.0
            )
            return loss

        worst["L_2D"] = max(
            worst["L_2D"], _check_leaves(l2d_loss, field.parameters() + corr.parameters())
        )

        # guidance path: the injected gradient is constant by convention
        # (denoiser Jacobian omitted), so the checked quantity is the chain
        # through the feature transform into the field weights
        den = Denoiser(window_len=T, feat_dim=48, width=32, blocks=1, seed=point)
        sched = make_schedule(100)
        with ad.no_grad():
            theta, phi, x = field.forward(enc)
            feats0 = feature_tensors(skel, theta, phi, x, inst.fps, 0, T)
        g_fixed, _ = sds_gradient(
            den, sched, SdsConfig(n_draws=2), feats0.data, np.random.default_rng(point)
        )

        def sds_path_loss():
            theta, phi, x = field.forward(enc)
            feats = feature_tensors(skel, theta, phi, x, inst.fps, 0, T)
            return ad.tsum(ad.mul(feats, Tensor(g_fixed)))

        worst["L_Diff"] = max(worst["L_Diff"], _check_leaves(sds_path_loss, field.parameters()))

    elapsed = time.perf_counter() - t_start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60.0
    report(1, ok, f"max rel err {max(worst.values()):.2e} across "
                  f"{sorted(worst)} at 3 points each, {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# criterion 2: forward kinematics against the naive matrix-chain oracle
# ---------------------------------------------------------------------------

def _naive_fk(skel, theta, phi, x_root):
    def homog(R, p):
        H = np.eye(4)
        H[:3, :3] = R
        H[:3, 3] = p
        return H

    R_local = axis_angle_to_matrix(theta)
    H = [None] * NUM_JOINTS
    H[0] = homog(axis_angle_to_matrix(phi) @ R_local[0], x_root)
    for j in range(1, NUM_JOINTS):
        H[j] = H[skel.parent[j]] @ homog(R_local[j], skel.rest_offsets[j])
    return np.stack([h[:3, 3] for h in H])


def test_criterion_2_fk_oracle():
    skel = build_default_skeleton()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        theta = rng.standard_normal((24, 3))
        phi = rng.standard_normal(3)
        x = rng.standard_normal(3) * 2
        body = forward_kinematics(skel, Pose(theta, phi, x))
        worst = max(worst, float(np.abs(body.joints3d - _naive_fk(skel, theta, phi, x)).max()))

    worst_equi = 0.0
    for _ in range(50):
        theta = rng.standard_normal((24, 3)) * 0.6
        phi = rng.standard_normal(3) * 0.6
        x = rng.standard_normal(3)
        R = axis_angle_to_matrix(rng.standard_normal(3))
        d = rng.standard_normal(3)
        base = forward_kinematics(skel, Pose(theta, phi, x))
        moved = forward_kinematics(
            skel, Pose(theta, matrix_to_axis_angle(R @ axis_angle_to_matrix(phi)), R @ x + d)
        )
        for attr in ("joints3d", "verts3d", "major_joints3d"):
            expect = getattr(base, attr) @ R.T + d
            worst_equi = max(worst_equi, float(np.abs(getattr(moved, attr) - expect).max()))

    ok = worst < 1e-10 and worst_equi < 1e-9
    report(2, ok, f"1000-pose oracle max err {worst:.2e} (< 1e-10), "
                  f"rigid equivariance {worst_equi:.2e} (< 1e-9)")


# ---------------------------------------------------------------------------
# criterion 3: schedule identity and Monte-Carlo noising marginals
# ---------------------------------------------------------------------------

def test_criterion_3_schedule_and_noising():
    sched = make_schedule(100)
    ident = float(np.abs(sched.alpha**2 + sched.sigma**2 - 1.0).max())
    t = 55
    x0 = np.array([1.3])
    g = np.random.default_rng(123)
    draws = np.array([add_noise(x0, t, g.standard_normal(1), sched)[0] for _ in range(100000)])
    mean_err = abs(draws.mean() - sched.alpha[t] * x0[0]) / abs(sched.alpha[t] * x0[0])
    std_err = abs(draws.std() - sched.sigma[t]) / sched.sigma[t]
    ok = ident < 1e-12 and mean_err < 0.01 and std_err < 0.01
    report(3, ok, f"alpha^2+sigma^2 dev {ident:.1e} (< 1e-12); 1e5-draw marginals: "
                  f"mean err {mean_err*100:.2f}%, std err {std_err*100:.2f}% (< 1%)")


# ---------------------------------------------------------------------------
# criterion 4: prior training and sampling sanity
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_prior_sanity(trained_prior):
    den, sched, curve, train_seconds = trained_prior
    t0 = time.perf_counter()
    passes = sum(gait_contact_statistic(sample_motion(den, sched, seed=s)) for s in range(16))
    sample_seconds = time.perf_counter() - t0
    ratio = curve[-1] / curve[0]
    total = train_seconds + sample_seconds
    ok = ratio <= 0.10 and passes >= 12 and total < 600.0
    report(4, ok, f"loss ratio {ratio:.3f} (<= 0.10), gait statistic {passes}/16 (>= 12), "
                  f"runtime {total:.0f}s (< 600s)")


# ---------------------------------------------------------------------------
# criterion 5: camera disentanglement under a 0.5x translation scale
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_camera_disentanglement():
    skel = build_default_skeleton()
    spec = ScenarioSpec(kind="walk-line", T=60, seed=0, camera_path="static")
    gt = generate_gait(spec, skel)
    gt_traj = make_camera_trajectory(spec, gt)
    results = []
    for kp_noise, tol in ((0.0, 0.05), (2.0, 0.15)):
        corr_spec = CorruptionSpec(
            0.0, 0.0, "gt-plus-drift", 0.0, slam_scale_error=0.5,
            slam_rot_walk_std=0.0, slam_trans_bias=0.0,
            kp_noise_std=kp_noise, kp_dropout_prob=0.0,
        )
        scene = render_scene(gt, gt_traj, skel, corr_spec, seed=7)
        inst = scene.instance
        human = FreeMotionParams(gt.theta_seq, gt.phi_seq, gt.x_seq)
        corr = CorrectionTensors(CameraCorrection.identity(inst.T))
        stage2_camera(corr, human, inst, StageConfig(), n_iters=6000)
        snap = corr.snapshot()
        s_eff = np.array(
            [
                np.linalg.norm(effective_camera(inst.traj, snap, t)[1])
                / np.linalg.norm(inst.traj.t_slam[t])
                for t in range(inst.T)
            ]
        )
        dev = float(np.abs(s_eff - 2.0).max()) / 2.0
        results.append((kp_noise, dev, tol))
    ok = all(dev <= tol for _, dev, tol in results)
    detail = "; ".join(f"noise {n}px: max scale dev {d*100:.1f}% (<= {t*100:.0f}%)"
                       for n, d, t in results)
    report(5, ok, detail)


# ---------------------------------------------------------------------------
# criteria 6 + 7: benchmark sweep (full pipeline and ablations)
# ---------------------------------------------------------------------------

_CKPT_PATH = None  # set by the fixture before workers fork


def _bench_worker(args):
    seed, mode, ckpt_path = args
    from diffopt.diffusion import load_checkpoint

    skel = build_default_skeleton()
    scene = benchmark_scene(skel, seed)
    den, sched = load_checkpoint(ckpt_path)
    inst = scene.instance
    init = MotionSequence(inst.theta_init, inst.phi_init, inst.x_init, inst.fps)
    e_init = evaluate_metrics(init, scene.gt, skel)
    t0 = time.perf_counter()
    rep = solve(inst, (den, sched), StageConfig(), mode=mode)
    wall = time.perf_counter() - t0
    e_final = evaluate_metrics(rep.motion, scene.gt, skel)
    row = {
        "seed": seed,
        "mode": mode,
        "wall": wall,
        "init_g": e_init.g_mpjpe,
        "init_skate": e_init.skate,
        "final_g": e_final.g_mpjpe,
        "final_skate": e_final.skate,
        "final_m": e_final.mpjpe,
    }
    for name, seq in rep.stage_motions.items():
        row[f"g_{name}"] = evaluate_metrics(seq, scene.gt, skel).g_mpjpe

    def anchor_dist(seq):
        d = (seq.theta_seq - inst.theta_init).reshape(inst.T, -1)
        return float(np.mean(np.linalg.norm(d, axis=1)))

    if mode == "full" and "stage1" in rep.stage_motions:
        row["anchor_stage1"] = anchor_dist(rep.stage_motions["stage1"])
        row["anchor_final"] = anchor_dist(rep.motion)
    return row


@pytest.fixture(scope="session")
def benchmark_results(trained_prior, tmp_path_factory):
    from diffopt.diffusion import save_checkpoint

    den, sched = trained_prior[:2]
    ckpt = tmp_path_factory.mktemp("bench") / "prior.dopt"
    save_checkpoint(den, sched, ckpt)
    tasks = [(seed, mode, str(ckpt)) for mode in BENCH_MODES for seed in range(N_BENCH_SCENES)]
    jobs = max(1, min(2, os.cpu_count() or 1))
    results: dict = {mode: [None] * N_BENCH_SCENES for mode in BENCH_MODES}
    if jobs == 1:
        rows = [_bench_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_bench_worker, tasks))
    for row in rows:
        results[row["mode"]][row["seed"]] = row
    return results


@pytest.mark.slow
def test_criterion_6_end_to_end_recovery(benchmark_results):
    rows = benchmark_results["full"]
    good = 0
    for r in rows:
        g_cut = r["final_g"] <= 0.60 * r["init_g"]
        sk_cut = r["final_skate"] <= 0.70 * r["init_skate"]
        good += bool(g_cut and sk_cut)
    max_wall = max(r["wall"] for r in rows)
    mean_drop = 1.0 - np.mean([r["final_g"] for r in rows]) / np.mean([r["init_g"] for r in rows])
    ok = good >= 7 and max_wall < 300.0
    report(6, ok, f"G-MPJPE>=40% and skate>=30% reductions on {good}/10 scenes (>= 7); "
                  f"mean G-MPJPE drop {mean_drop*100:.0f}%; slowest scene {max_wall:.0f}s (< 300s)")


@pytest.mark.slow
def test_criterion_7_ablation_orderings(benchmark_results):
    means = {mode: float(np.mean([r["final_g"] for r in rows]))
             for mode, rows in benchmark_results.items()}
    full = means["full"]
    ok = all(full < means[m] for m in ("single-stage", "no-mdm", "learnable-params"))
    detail = ", ".join(f"{m}: {v:.0f}mm" for m, v in means.items())
    report(7, ok, f"mean benchmark G-MPJPE: {detail}; full strictly lowest")


@pytest.mark.slow
def test_stage3_improves_on_most_scenes(benchmark_results):
    rows = benchmark_results["full"]
    usable = [r for r in rows if "g_stage2" in r and "g_stage3" in r]
    better = sum(r["g_stage3"] < r["g_stage2"] for r in usable)
    assert better >= 0.7 * len(usable), (
        f"fine-tuning lowered G-MPJPE on only {better}/{len(usable)} scenes"
    )


@pytest.mark.slow
def test_anchor_guarantee_after_finetune(benchmark_results):
    # the articulation anchor stays active through stage 3: the mean
    # distance to the initial articulation grows at most 3x over stage 1
    for r in benchmark_results["full"]:
        assert r["anchor_final"] <= 3.0 * r["anchor_stage1"] + 1e-9, (
            f"scene {r['seed']}: anchor {r['anchor_stage1']:.3f} -> {r['anchor_final']:.3f}"
        )


# ---------------------------------------------------------------------------
# criterion 8: byte-identical reruns
# ---------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    import json

    from diffopt.cli import main

    ckpt = tmp_path / "ckpt"
    scene = tmp_path / "scene"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "iters_warmup": 30, "iters_stage2_outer": 2, "inner_human": 3,
        "inner_camera": 3, "iters_finetune": 5, "seed": 0,
    }))
    assert main(["train-prior", "--corpus-seed", "0", "--epochs", "1",
                 "--corpus-size", "6", "--out", str(ckpt)]) == 0
    assert main(["make-scene", "--scenario", "walk-line", "--frames", "60",
                 "--seed", "0", "--out", str(scene)]) == 0
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["reconstruct", "--scene", str(scene), "--prior", str(ckpt),
                     "--config", str(cfg), "--out", str(out)]) == 0
        blobs.append((out / "motion.csv").read_bytes())
    ok = blobs[0] == blobs[1]
    report(8, ok, f"two serial reconstruct runs: motion CSVs identical ({len(blobs[0])} bytes)")


# ---------------------------------------------------------------------------
# criterion 9: robust-loss properties
# ---------------------------------------------------------------------------

def test_criterion_9_robust_loss():
    sigma = 100.0
    rs = np.concatenate((np.linspace(0, 1e4, 4001), [1e5, 1e6]))
    vals = np.array([geman_mcclure(np.array([r, 0.0]), sigma) for r in rs])
    monotone = bool(np.all(np.diff(vals) >= 0))
    bounded = bool(np.all(vals <= sigma**2))
    half = abs(geman_mcclure(np.array([sigma, 0.0]), sigma) - sigma**2 / 2) < 1e-12

    # outlier boundedness on a real instance
    skel = build_default_skeleton()
    scene = benchmark_scene(skel, 0, corruption=CorruptionSpec.none())
    from diffopt.camera import Keypoints2D, reprojection_loss

    kp = scene.instance.kp
    base = reprojection_loss(scene.gt, skel, scene.gt_traj,
                             CameraCorrection.identity(scene.gt.T), kp, sigma_gm=sigma)
    obs = kp.obs.copy()
    obs[5, 3] += 1e4
    spoiled = reprojection_loss(scene.gt, skel, scene.gt_traj,
                                CameraCorrection.identity(scene.gt.T),
                                Keypoints2D(obs, kp.conf), sigma_gm=sigma)
    outlier_bounded = spoiled - base <= sigma**2 / scene.gt.T + 1e-9
    ok = monotone and bounded and half and outlier_bounded
    report(9, ok, f"monotone={monotone}, bounded={bounded}, half-saturation exact={half}, "
                  f"outlier delta {spoiled-base:.2f} <= sigma^2/T={sigma**2/scene.gt.T:.2f}")
