"""Synthetic-scene oracle: procedural gait ground truth, camera paths,
keypoint rendering, and parameterized corruption of the initializations.

Gait construction works feet-first: stance feet are planted at fixed world
positions and the legs are solved by analytic two-link IK, so stance-foot
skate is zero by construction and contact ground truth is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import (
    CameraTrajectory,
    Keypoints2D,
    extrinsics_from_center,
    load_camera_json,
    load_keypoints_csv,
    lookat_rotation,
    project_points,
    save_camera_json,
    save_keypoints_csv,
)
from .diffusion import WINDOW_LEN, MotionFeatures, motion_to_features
from .kinematics import (
    JOINT_NAMES,
    MAJOR_JOINT_NAMES,
    Skeleton,
    axis_angle_to_matrix,
    fk_sequence,
    matrix_to_axis_angle,
    yaw_rotation,
)
from .motionfield import MotionSequence
from .optimizer import ProblemInstance, init_translation_frustum

SCENE_FORMAT_VERSION = 1

SCENARIO_KINDS = ("walk-line", "walk-circle", "jog", "side-step", "turn-in-place")
CAMERA_PATHS = ("static", "orbit", "follow", "handheld-jitter")

DEFAULT_IMAGE_SIZE = (640, 480)
DEFAULT_FOCAL = 500.0


@dataclass
class ScenarioSpec:
    kind: str = "walk-line"
    T: int = 100
    fps: float = 30.0
    seed: int = 0
    camera_path: str = "static"
    jitter_amplitude: float = 0.0
    speed: float = 1.2          # m/s, walking speed along the path
    circle_radius: float = 4.0  # m, walk-circle only
    cadence: float = 1.8        # steps per second

    def validate(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind: {self.kind}")
        if self.camera_path not in CAMERA_PATHS:
            raise ValueError(f"unknown camera path: {self.camera_path}")
        if self.T < 2:
            raise ValueError("scenario needs T >= 2")
        if self.jitter_amplitude < 0:
            raise ValueError("jitter amplitude must be >= 0")


@dataclass
class CorruptionSpec:
    theta_noise_std: float = 0.03     # rad
    phi_noise_std: float = 0.02       # rad
    x_init_mode: str = "gt-plus-drift"  # or "frustum-heuristic"
    x_drift_rate: float = 0.01        # m/frame, gt-plus-drift only
    slam_scale_error: float = 1.1
    slam_rot_walk_std: float = 0.002  # rad/frame
    slam_trans_bias: float = 0.05     # m
    kp_noise_std: float = 2.0         # px
    kp_dropout_prob: float = 0.05

    def validate(self):
        for name in ("theta_noise_std", "phi_noise_std", "x_drift_rate",
                     "slam_rot_walk_std", "slam_trans_bias", "kp_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.kp_dropout_prob <= 1.0:
            raise ValueError("kp_dropout_prob must lie in [0, 1]")
        if self.x_init_mode not in ("frustum-heuristic", "gt-plus-drift"):
            raise ValueError(f"unknown x_init mode: {self.x_init_mode}")

    @classmethod
    def none(cls) -> "CorruptionSpec":
        return cls(0.0, 0.0, "gt-plus-drift", 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Scene:
    gt: MotionSequence
    gt_traj: CameraTrajectory
    instance: ProblemInstance
    scenario: ScenarioSpec
    corruption: CorruptionSpec
    seed: int


# ---------------------------------------------------------------------------
# gait synthesis
# ---------------------------------------------------------------------------

_J = {n: i for i, n in enumerate(JOINT_NAMES)}

PELVIS_HEIGHT = 0.92     # m, walking pelvis height cap (standing is ~0.96)
ANKLE_LIFT = 0.15        # m, swing apex of the ankle above its stance height
STANCE_ANKLE_HEIGHT = 0.068
SWING_DWELL = 0.15       # fraction of the swing with no horizontal motion
REACH_MARGIN = 0.012     # m, kept between hip-ankle distance and full leg length


def _path_state(spec: ScenarioSpec, dist: float):
    """Arc-length parameterized path: (xz position, yaw) at distance `dist`."""
    if spec.kind in ("walk-line", "jog"):
        return np.array([0.0, dist]), 0.0
    if spec.kind == "walk-circle":
        # start at the origin heading +z, curving toward +x
        r = spec.circle_radius
        ang = dist / r
        return np.array([r - r * np.cos(ang), r * np.sin(ang)]), ang
    if spec.kind == "side-step":
        # facing +z, stepping sideways along +x
        return np.array([dist, 0.0]), 0.0
    # turn-in-place: no translation, yaw sweeps at a steady rate per meter of
    # "virtual" distance so cadence still drives the stepping
    return np.array([0.0, 0.0]), dist * 1.2


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _leg_ik(hip_local, ankle_local, forward_local, l1, l2):
    """Two-link IK in the root frame: exact ankle placement.

    Returns (hip rotation matrix, signed knee flexion about the local +x
    axis). The knee is pushed toward the body-forward direction.
    """
    v = ankle_local - hip_local
    d = np.clip(np.linalg.norm(v), abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6)
    vhat = v / np.linalg.norm(v)
    ankle_eff = hip_local + vhat * d

    # in-plane frame: vhat plus the forward component orthogonal to it
    u2 = forward_local - np.dot(forward_local, vhat) * vhat
    nu = np.linalg.norm(u2)
    u2 = u2 / nu if nu > 1e-9 else np.array([0.0, 0.0, 1.0])

    cos_gamma = (l1 * l1 + d * d - l2 * l2) / (2.0 * l1 * d)
    gamma = np.arccos(np.clip(cos_gamma, -1.0, 1.0))
    thigh = np.cos(gamma) * vhat + np.sin(gamma) * u2
    knee = hip_local + l1 * thigh
    shin = (ankle_eff - knee) / l2

    # hip frame: thigh along -y', knee axis x' normal to the leg plane
    y_axis = -thigh
    x_axis = np.cross(u2, vhat)
    nx = np.linalg.norm(x_axis)
    x_axis = x_axis / nx if nx > 1e-9 else np.array([1.0, 0.0, 0.0])
    z_axis = np.cross(x_axis, y_axis)
    z_axis /= np.linalg.norm(z_axis)
    x_axis = np.cross(y_axis, z_axis)
    R_hip = np.stack((x_axis, y_axis, z_axis), axis=-1)

    # signed flexion taking the thigh axis onto the shin: rotating (0,-1,0)
    # about +x by b gives (0, -cos b, -sin b)
    shin_local = R_hip.T @ shin
    knee_flex = np.arctan2(-shin_local[2], -shin_local[1])
    return R_hip, knee_flex


def generate_gait(spec: ScenarioSpec, skel: Skeleton) -> MotionSequence:
    """Procedural gait with exact foot plants; deterministic per spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    T, fps = spec.T, spec.fps
    speed = spec.speed if spec.kind != "jog" else max(spec.speed, 1.6)
    cadence = spec.cadence if spec.kind != "jog" else spec.cadence * 1.4
    step_period = 1.0 / cadence          # one step (single foot) per period
    duty = 0.60                          # fraction of the stride a foot is planted
    stride_t = 2.0 * step_period         # full cycle (both feet)

    rest = skel.rest_joint_positions()
    hip_l, hip_r = rest[_J["hip_l"]], rest[_J["hip_r"]]
    l1 = abs(skel.rest_offsets[_J["knee_l"]][1])
    l2 = abs(skel.rest_offsets[_J["ankle_l"]][1])

    tgrid = np.arange(T) / fps
    dist = speed * tgrid
    root_xz = np.zeros((T, 2))
    yaw = np.zeros(T)
    for t in range(T):
        root_xz[t], yaw[t] = _path_state(spec, dist[t])

    # per-foot plant schedule: foot f is planted during
    # [k*stride_t + phase_f, ... + duty*stride_t), swinging otherwise
    phase_off = {0: 0.0, 1: 0.5 * stride_t}
    lateral = {0: hip_l[0], 1: hip_r[0]}

    def plant_point(foot, k):
        """World (x, z, yaw) of plant k for this foot: under the hip at the
        root-path position at the middle of that stance interval."""
        t_mid = k * stride_t + phase_off[foot] + 0.5 * duty * stride_t
        d = speed * t_mid
        c_xz, c_yaw = _path_state(spec, d)
        R = yaw_rotation(c_yaw)
        side = R[:3, :3] @ np.array([lateral[foot], 0.0, 0.0])
        return np.array([c_xz[0] + side[0], c_xz[1] + side[2]]), c_yaw

    def ankle_traj(foot):
        # negative plant indices extrapolate the path backward, so frame 0
        # is already steady-state gait (no standing start)
        pos = np.zeros((T, 3))
        foot_yaw = np.zeros(T)
        for t in range(T):
            tt = tgrid[t] - phase_off[foot]
            k = int(np.floor(tt / stride_t))
            frac = (tt - k * stride_t) / stride_t
            if frac < duty:
                p, pyaw = plant_point(foot, k)
                pos[t] = (p[0], STANCE_ANKLE_HEIGHT, p[1])
                foot_yaw[t] = pyaw
            else:
                p0, y0 = plant_point(foot, k)
                p1, y1 = plant_point(foot, k + 1)
                u = (frac - duty) / (1.0 - duty)
                # vertical-first: the foot clears the contact threshold
                # before it moves horizontally (keeps skate near zero)
                sxz = _smoothstep((u - SWING_DWELL) / (1.0 - 2.0 * SWING_DWELL))
                xz = (1 - sxz) * p0 + sxz * p1
                h = STANCE_ANKLE_HEIGHT + ANKLE_LIFT * np.sin(np.pi * u)
                pos[t] = (xz[0], h, xz[1])
                foot_yaw[t] = (1 - sxz) * y0 + sxz * y1
        return pos, foot_yaw

    ankle_w = {}
    foot_yaw_w = {}
    for f in (0, 1):
        ankle_w[f], foot_yaw_w[f] = ankle_traj(f)

    # root height: as high as possible while keeping both ankle targets
    # reachable (natural inverted-pendulum bob falls out of this bound)
    phase = tgrid / stride_t
    max_len = l1 + l2 - REACH_MARGIN
    hip_rests = {0: hip_l, 1: hip_r}
    root_y = np.full(T, PELVIS_HEIGHT + 0.012)
    for t in range(T):
        Ry = yaw_rotation(yaw[t])
        for f in (0, 1):
            hip_w = Ry @ hip_rests[f]  # hip offset in world axes (y-part constant)
            dx = ankle_w[f][t][0] - (root_xz[t, 0] + hip_w[0])
            dz = ankle_w[f][t][2] - (root_xz[t, 1] + hip_w[2])
            horiz_sq = dx * dx + dz * dz
            if horiz_sq >= max_len * max_len:
                horiz_sq = max_len * max_len * 0.99
            bound = ankle_w[f][t][1] - hip_w[1] + np.sqrt(max_len * max_len - horiz_sq)
            root_y[t] = min(root_y[t], bound)
    # light smoothing; REACH_MARGIN absorbs the small bound violations
    kernel = np.array([0.25, 0.5, 0.25])
    padded = np.concatenate(([root_y[0]], root_y, [root_y[-1]]))
    root_y = np.convolve(padded, kernel, mode="valid")
    x_seq = np.stack((root_xz[:, 0], root_y, root_xz[:, 1]), axis=-1)
    phi_seq = np.zeros((T, 3))
    phi_seq[:, 1] = yaw

    theta = np.zeros((T, 24, 3))
    arm_swing = 0.45 * np.sin(2.0 * np.pi * phase)
    spine_sway = 0.04 * np.sin(2.0 * np.pi * phase)
    hang_l = axis_angle_to_matrix(np.array([0.0, 0.0, -1.35]))
    hang_r = axis_angle_to_matrix(np.array([0.0, 0.0, 1.35]))

    legs = (
        ("hip_l", "knee_l", "ankle_l", hip_l, 0),
        ("hip_r", "knee_r", "ankle_r", hip_r, 1),
    )
    for t in range(T):
        Ry = yaw_rotation(yaw[t])
        Ry_inv = Ry.T
        for hip_name, knee_name, ankle_name, hip_rest, f in legs:
            ankle_local = Ry_inv @ (ankle_w[f][t] - x_seq[t])
            R_hip, knee_flex = _leg_ik(hip_rest, ankle_local, np.array([0.0, 0.0, 1.0]), l1, l2)
            theta[t, _J[hip_name]] = matrix_to_axis_angle(R_hip)
            theta[t, _J[knee_name]] = np.array([knee_flex, 0.0, 0.0])
            # keep the foot level and pointed along its plant yaw
            R_shin = Ry @ R_hip @ axis_angle_to_matrix(np.array([knee_flex, 0.0, 0.0]))
            R_foot_target = yaw_rotation(foot_yaw_w[f][t])
            theta[t, _J[ankle_name]] = matrix_to_axis_angle(R_shin.T @ R_foot_target)
        sway = axis_angle_to_matrix(np.array([0.0, 0.0, spine_sway[t]]))
        theta[t, _J["spine1"]] = matrix_to_axis_angle(sway)
        swing = arm_swing[t]
        theta[t, _J["shoulder_l"]] = matrix_to_axis_angle(
            hang_l @ axis_angle_to_matrix(np.array([swing, 0.0, 0.0]))
        )
        theta[t, _J["shoulder_r"]] = matrix_to_axis_angle(
            hang_r @ axis_angle_to_matrix(np.array([-swing, 0.0, 0.0]))
        )
        theta[t, _J["elbow_l"]] = np.array([0.25 + 0.15 * swing, 0.0, 0.0])
        theta[t, _J["elbow_r"]] = np.array([0.25 - 0.15 * swing, 0.0, 0.0])

    seq = MotionSequence(theta, phi_seq, x_seq, fps)
    seq.validate()
    return seq


# ---------------------------------------------------------------------------
# camera paths
# ---------------------------------------------------------------------------

def _smooth_noise(rng, T, amplitude, tau=8.0):
    """Low-pass filtered random walk with roughly the given amplitude."""
    raw = rng.standard_normal((T, 3))
    out = np.zeros((T, 3))
    acc = np.zeros(3)
    k = 1.0 / tau
    for t in range(T):
        acc = (1 - k) * acc + k * raw[t]
        out[t] = acc
    denom = max(out.std(), 1e-9)
    return out / denom * amplitude


def make_camera_trajectory(spec: ScenarioSpec, gt: MotionSequence) -> CameraTrajectory:
    """Ground-truth camera matching the requested path kind, framing the
    walker for every frame."""
    T = gt.T
    roots = gt.x_seq
    centroid = roots.mean(axis=0)
    extent = max(np.linalg.norm(roots - centroid, axis=1).max(), 1.0)
    dist = max(3.5, 1.8 * extent)
    rng = np.random.default_rng(spec.seed + 1000)

    centers = np.zeros((T, 3))
    targets = np.zeros((T, 3))
    if spec.camera_path == "static":
        c = centroid + np.array([0.6 * dist, 0.8, -dist])
        centers[:] = c
        targets[:] = centroid + np.array([0.0, 0.2, 0.0])
    elif spec.camera_path == "orbit":
        ang0 = -np.pi / 3
        rate = 0.5 / gt.fps  # rad/frame
        for t in range(T):
            a = ang0 + rate * t
            centers[t] = centroid + np.array([dist * np.sin(a), 1.0, -dist * np.cos(a)])
            targets[t] = roots[t] + np.array([0.0, 0.1, 0.0])
    elif spec.camera_path in ("follow", "handheld-jitter"):
        for t in range(T):
            fwd = axis_angle_to_matrix(gt.phi_seq[t]) @ np.array([0.0, 0.0, 1.0])
            side = np.cross(np.array([0.0, 1.0, 0.0]), fwd)
            centers[t] = roots[t] - fwd * dist + side * 0.3 * dist + np.array([0.0, 0.6, 0.0])
            targets[t] = roots[t] + np.array([0.0, 0.1, 0.0])
        if spec.camera_path == "handheld-jitter":
            amp = spec.jitter_amplitude if spec.jitter_amplitude > 0 else 0.03
            centers = centers + _smooth_noise(rng, T, amp)
    else:
        raise ValueError(f"unknown camera path: {spec.camera_path}")

    R = np.zeros((T, 3, 3))
    tvec = np.zeros((T, 3))
    for t in range(T):
        R[t] = lookat_rotation(centers[t], targets[t])
        tvec[t] = extrinsics_from_center(R[t], centers[t])
    traj = CameraTrajectory(
        R_slam=R,
        t_slam=tvec,
        f_slam=np.full(T, DEFAULT_FOCAL),
        principal_point=np.array([DEFAULT_IMAGE_SIZE[0] / 2.0, DEFAULT_IMAGE_SIZE[1] / 2.0]),
        image_size=DEFAULT_IMAGE_SIZE,
    )
    traj.validate()
    return traj


# ---------------------------------------------------------------------------
# rendering and corruption
# ---------------------------------------------------------------------------

def render_keypoints(gt: MotionSequence, traj: CameraTrajectory, skel: Skeleton) -> Keypoints2D:
    """Noiseless 2D keypoints: GT major joints through GT cameras."""
    majors = fk_sequence(skel, gt.theta_seq, gt.phi_seq, gt.x_seq)["majors"]
    T = gt.T
    obs = np.zeros((T, majors.shape[1], 2))
    conf = np.ones((T, majors.shape[1]))
    for t in range(T):
        pix, valid = project_points(
            majors[t], traj.R_slam[t], traj.t_slam[t], traj.f_slam[t], traj.principal_point
        )
        obs[t] = pix
        conf[t] = valid.astype(np.float64)
    return Keypoints2D(obs, conf)


def render_scene(gt: MotionSequence, gt_traj: CameraTrajectory, skel: Skeleton,
                 corruption: CorruptionSpec, seed: int,
                 scenario: ScenarioSpec | None = None) -> Scene:
    """Project GT to keypoints, then corrupt observations, initializations,
    and the SLAM trajectory per the corruption spec."""
    corruption.validate()
    rng = np.random.default_rng(seed)
    T = gt.T
    clean = render_keypoints(gt, gt_traj, skel)

    # keypoint noise and dropout
    obs = clean.obs + rng.standard_normal(clean.obs.shape) * corruption.kp_noise_std
    conf = clean.conf.copy()
    if corruption.kp_noise_std > 0 or corruption.kp_dropout_prob > 0:
        conf = conf * rng.uniform(0.7, 1.0, conf.shape)
    drop = rng.uniform(size=conf.shape) < corruption.kp_dropout_prob
    conf = np.where(drop, 0.0, conf)
    kp = Keypoints2D(obs, conf)

    theta_init = gt.theta_seq + rng.standard_normal(gt.theta_seq.shape) * corruption.theta_noise_std
    phi_init = gt.phi_seq + rng.standard_normal(gt.phi_seq.shape) * corruption.phi_noise_std

    # SLAM corruption: rotation random walk, translation scale + constant bias
    R_slam = gt_traj.R_slam.copy()
    if corruption.slam_rot_walk_std > 0:
        walk = np.eye(3)
        for t in range(T):
            step = axis_angle_to_matrix(rng.standard_normal(3) * corruption.slam_rot_walk_std)
            walk = step @ walk
            R_slam[t] = walk @ R_slam[t]
    bias_dir = rng.standard_normal(3)
    bias_dir /= max(np.linalg.norm(bias_dir), 1e-12)
    t_slam = gt_traj.t_slam * corruption.slam_scale_error + bias_dir * corruption.slam_trans_bias
    traj = CameraTrajectory(
        R_slam=R_slam,
        t_slam=t_slam,
        f_slam=gt_traj.f_slam.copy(),
        principal_point=gt_traj.principal_point.copy(),
        image_size=gt_traj.image_size,
    )

    if corruption.x_init_mode == "gt-plus-drift":
        ddir = np.zeros(3)
        ddir[[0, 2]] = rng.standard_normal(2)
        ddir /= max(np.linalg.norm(ddir), 1e-12)
        drift = np.arange(T)[:, None] * corruption.x_drift_rate * ddir[None, :]
        x_init = gt.x_seq + drift
    else:
        x_init = init_translation_frustum(traj, kp, skel)

    instance = ProblemInstance(
        skel=skel, traj=traj, kp=kp,
        theta_init=theta_init, phi_init=phi_init, x_init=x_init,
        T=T, fps=gt.fps,
    )
    return Scene(
        gt=gt, gt_traj=gt_traj, instance=instance,
        scenario=scenario if scenario is not None else ScenarioSpec(T=T, fps=gt.fps),
        corruption=corruption, seed=seed,
    )


def make_scene(scenario: ScenarioSpec, corruption: CorruptionSpec, skel: Skeleton) -> Scene:
    gt = generate_gait(scenario, skel)
    gt_traj = make_camera_trajectory(scenario, gt)
    return render_scene(gt, gt_traj, skel, corruption, scenario.seed, scenario)


# ---------------------------------------------------------------------------
# prior corpus and the fixed benchmark
# ---------------------------------------------------------------------------

def build_corpus(n_sequences: int, skel: Skeleton, seed: int,
                 window_len: int = WINDOW_LEN) -> list[MotionFeatures]:
    """Gait variations windowed into canonicalized feature windows."""
    if n_sequences < 1:
        raise ValueError("corpus needs at least one sequence")
    rng = np.random.default_rng(seed)
    windows = []
    kinds = ("walk-line", "walk-circle", "jog", "side-step", "turn-in-place")
    i = 0
    while len(windows) < n_sequences:
        kind = kinds[i % len(kinds)]
        spec = ScenarioSpec(
            kind=kind,
            T=window_len + 30,
            fps=30.0,
            seed=int(rng.integers(0, 2**31)),
            speed=float(rng.uniform(0.6, 1.8)),
            circle_radius=float(rng.uniform(2.0, 8.0)),
            cadence=float(rng.uniform(1.5, 2.1)),
        )
        seq = generate_gait(spec, skel)
        start = int(rng.integers(0, seq.T - window_len + 1))
        feats = motion_to_features(seq, skel, start, window_len)
        feats.validate()
        windows.append(feats)
        i += 1
    return windows


def benchmark_scene(skel: Skeleton, seed: int, T: int = 60,
                    corruption: CorruptionSpec | None = None) -> Scene:
    """One scene of the fixed evaluation benchmark (seeds cycle the five
    scenario kinds and the camera paths; default corruption)."""
    corr = corruption if corruption is not None else CorruptionSpec()
    spec = ScenarioSpec(
        kind=SCENARIO_KINDS[seed % len(SCENARIO_KINDS)],
        T=T,
        fps=30.0,
        seed=seed,
        camera_path=CAMERA_PATHS[seed % len(CAMERA_PATHS)],
        speed=1.0 + 0.1 * (seed % 5),
    )
    return make_scene(spec, corr, skel)


def benchmark_scenes(skel: Skeleton, n_scenes: int = 10, T: int = 60,
                     corruption: CorruptionSpec | None = None) -> list[Scene]:
    return [benchmark_scene(skel, seed, T, corruption) for seed in range(n_scenes)]


# ---------------------------------------------------------------------------
# scene bundle serialization
# ---------------------------------------------------------------------------

def save_scene_bundle(scene: Scene, out_dir):
    from .motionfield import save_motion_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": SCENE_FORMAT_VERSION,
        "seed": scene.seed,
        "scenario": asdict(scene.scenario),
        "corruption": asdict(scene.corruption),
    }
    (out / "scene.json").write_text(json.dumps(doc, indent=2))
    save_motion_csv(scene.gt, out / "gt_motion.csv")
    save_camera_json(scene.gt_traj, out / "gt_camera.json")
    save_camera_json(scene.instance.traj, out / "camera.json")
    save_keypoints_csv(scene.instance.kp, out / "keypoints.csv")
    init_seq = MotionSequence(
        scene.instance.theta_init, scene.instance.phi_init, scene.instance.x_init, scene.instance.fps
    )
    save_motion_csv(init_seq, out / "init_motion.csv")


def load_scene_bundle(path, skel: Skeleton) -> Scene:
    from .motionfield import load_motion_csv

    p = Path(path)
    doc = json.loads((p / "scene.json").read_text())
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format version: {doc.get('version')}")
    gt = load_motion_csv(p / "gt_motion.csv")
    gt_traj = load_camera_json(p / "gt_camera.json")
    traj = load_camera_json(p / "camera.json")
    kp = load_keypoints_csv(p / "keypoints.csv")
    init_seq = load_motion_csv(p / "init_motion.csv")
    instance = ProblemInstance(
        skel=skel, traj=traj, kp=kp,
        theta_init=init_seq.theta_seq, phi_init=init_seq.phi_seq, x_init=init_seq.x_seq,
        T=gt.T, fps=gt.fps,
    )
    return Scene(
        gt=gt, gt_traj=gt_traj, instance=instance,
        scenario=ScenarioSpec(**doc["scenario"]),
        corruption=CorruptionSpec(**doc["corruption"]),
        seed=doc["seed"],
    )
