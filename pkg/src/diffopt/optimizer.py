"""Multi-stage recovery schedule: warm-up of the motion fields to the
initial estimates, alternating prior-guided human updates and 2D-anchored
camera updates, then joint fine-tuning of everything.

Parameter freezing per stage is enforced structurally (only the live
parameter group is stepped) and witnessed by checksums in the report.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import (
    CameraCorrection,
    CameraTrajectory,
    CorrectionTensors,
    Keypoints2D,
    effective_camera_tensors,
    reprojection_loss_tensors,
)
from .diffusion import (
    WINDOW_LEN,
    Denoiser,
    NoiseSchedule,
    SdsConfig,
    feature_tensors,
    sds_gradient,
)
from .kinematics import Skeleton, fk_tensors
from .motionfield import (
    FreeMotionParams,
    MotionField,
    MotionSequence,
    encode_phase,
    init_mlps,
    make_phase,
)

BODY_HEIGHT = 1.7        # m, nominal, for the frustum depth heuristic
CONF_THRESHOLD = 0.3

ABLATION_MODES = ("full", "learnable-params", "single-stage", "no-warmup", "no-mdm", "no-finetune")


@dataclass
class StageConfig:
    iters_warmup: int = 2000
    iters_stage2_outer: int = 20
    inner_human: int = 50
    inner_camera: int = 50
    iters_finetune: int = 1000
    lambda_diff: float = 1.0
    lambda_warm: float = 1.0
    lambda_2d: float = 1e-3   # applied to the raw pixel^2 reprojection loss
    lr_fields: float = 1e-3
    lr_camera: float = 1e-2
    seed: int = 0
    sigma_gm: float = 100.0
    sds: SdsConfig = field(default_factory=SdsConfig)

    def validate(self):
        for name in ("iters_warmup", "iters_stage2_outer", "inner_human",
                     "inner_camera", "iters_finetune"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lambda_diff", "lambda_warm", "lambda_2d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.sds.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        if "sds" in d and isinstance(d["sds"], dict):
            d["sds"] = SdsConfig(**d["sds"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def load_config(path) -> StageConfig:
    """Read a StageConfig from JSON, or TOML where the runtime supports it."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:  # Python 3.10
            raise RuntimeError("TOML configs need Python >= 3.11; use JSON instead") from exc
        return StageConfig.from_dict(tomllib.loads(text))
    return StageConfig.from_dict(json.loads(text))


@dataclass
class ProblemInstance:
    skel: Skeleton
    traj: CameraTrajectory
    kp: Keypoints2D
    theta_init: np.ndarray  # (T, 24, 3)
    phi_init: np.ndarray    # (T, 3)
    x_init: np.ndarray      # (T, 3)
    T: int
    fps: float

    def validate(self):
        if not (self.traj.T == self.T == self.kp.obs.shape[0] == self.theta_init.shape[0]
                == self.phi_init.shape[0] == self.x_init.shape[0]):
            raise ValueError("inconsistent frame counts across problem instance")


@dataclass
class SolveReport:
    curves: dict                      # stage name -> list of losses
    motion: MotionSequence
    correction: CameraCorrection
    wall_time: dict                   # stage name -> seconds
    warnings: dict
    checksums: dict
    stage_motions: dict = field(default_factory=dict)  # snapshots after each stage


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# translation initialization from the camera frustum
# ---------------------------------------------------------------------------

def init_translation_frustum(traj: CameraTrajectory, kp: Keypoints2D, skel: Skeleton) -> np.ndarray:
    """Back-project the keypoint bounding-box center at a similar-triangles
    depth f * H / h_bbox; frames without confident joints inherit the
    nearest valid frame's estimate."""
    T = traj.T
    x_init = np.zeros((T, 3))
    valid = np.zeros(T, dtype=bool)
    for t in range(T):
        mask = kp.conf[t] > CONF_THRESHOLD
        if mask.sum() < 2:
            continue
        pts = kp.obs[t, mask]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        h_bbox = hi[1] - lo[1]
        if h_bbox < 1e-6:
            continue
        center = (lo + hi) / 2.0
        depth = traj.f_slam[t] * BODY_HEIGHT / h_bbox
        ray = np.array(
            [
                (center[0] - traj.principal_point[0]) / traj.f_slam[t],
                (center[1] - traj.principal_point[1]) / traj.f_slam[t],
                1.0,
            ]
        )
        p_cam = ray * depth
        x_init[t] = traj.R_slam[t].T @ (p_cam + traj.t_slam[t])
        valid[t] = True
    if not valid.any():
        raise ValueError("no frame has confident keypoints for the frustum heuristic")
    idx = np.arange(T)
    good = idx[valid]
    for t in idx[~valid]:
        x_init[t] = x_init[good[np.argmin(np.abs(good - t))]]
    return x_init


# ---------------------------------------------------------------------------
# shared loss pieces
# ---------------------------------------------------------------------------

def _anchor_sq(pred: Tensor, target: np.ndarray) -> Tensor:
    """mean over frames of the squared L2 distance to the target."""
    d = ad.sub(ad.reshape(pred, (pred.shape[0], -1)), Tensor(np.reshape(target, (pred.shape[0], -1))))
    return ad.tmean(ad.tsum(ad.mul(d, d), axis=1))


def warmup_loss(human, enc: Tensor, instance: ProblemInstance) -> Tensor:
    theta, phi, x = human.forward(enc)
    return ad.add(
        ad.add(_anchor_sq(theta, instance.theta_init), _anchor_sq(phi, instance.phi_init)),
        _anchor_sq(x, instance.x_init),
    )


def _adam_loop(params, n_iters, lr, loss_fn, curve, abort_name, state=None):
    state = state if state is not None else ad.adam_init(params)
    tape = ad.active_tape()
    for _ in range(n_iters):
        tape.clear()
        loss = loss_fn()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"{abort_name} diverged (non-finite loss)")
        ad.backward(loss)
        grads = [p.grad for p in params]
        ad.sgd_adam_step(params, grads, state, lr)
        for p in params:
            p.zero_grad()
        curve.append(float(loss.data))
    tape.clear()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage1_warmup(human, instance: ProblemInstance, cfg: StageConfig, curve=None):
    """Fit the fields to the per-frame initial estimates (L2, all three nets)."""
    enc = Tensor(encode_phase(make_phase(instance.T).tau,
                              getattr(human, "pos_enc_freqs", 8)))
    curve = curve if curve is not None else []
    _adam_loop(
        human.parameters(), cfg.iters_warmup, cfg.lr_fields,
        lambda: warmup_loss(human, enc, instance),
        curve, "warm-up",
    )
    return human, curve


def stage2_human(human, instance: ProblemInstance, prior, cfg: StageConfig,
                 rng: np.random.Generator, n_iters=None, curve=None, state=None):
    """Prior-guided update of all three nets; only articulation is anchored.

    Pass `state` to keep Adam moments across alternation rounds.
    """
    den, sched = prior
    enc = Tensor(encode_phase(make_phase(instance.T).tau,
                              getattr(human, "pos_enc_freqs", 8)))
    n_iters = cfg.inner_human if n_iters is None else n_iters
    curve = curve if curve is not None else []
    params = human.parameters()
    state = state if state is not None else ad.adam_init(params)
    tape = ad.active_tape()
    L = den.window_len
    if instance.T < L:
        raise ValueError(
            f"sequence has {instance.T} frames but the prior window needs {L}"
        )
    for _ in range(n_iters):
        tape.clear()
        theta, phi, x = human.forward(enc)
        start = int(rng.integers(0, instance.T - L + 1))
        feats = feature_tensors(instance.skel, theta, phi, x, instance.fps, start, L)
        grad_feat, proxy = sds_gradient(den, sched, cfg.sds, feats.data, rng)
        sds_proxy = ad.tsum(ad.mul(feats, Tensor(grad_feat)))
        anchor = _anchor_sq(theta, instance.theta_init)
        loss = ad.add(ad.mul(sds_proxy, cfg.lambda_diff), anchor)
        if not np.isfinite(loss.data):
            raise FloatingPointError("stage 2 human update diverged (non-finite loss)")
        ad.backward(loss)
        grads = [p.grad for p in params]
        ad.sgd_adam_step(params, grads, state, cfg.lr_fields)
        for p in params:
            p.zero_grad()
        curve.append(cfg.lambda_diff * proxy + float(anchor.data))
    tape.clear()
    return human, curve, state


def stage2_camera(corr: CorrectionTensors, human, instance: ProblemInstance,
                  cfg: StageConfig, n_iters=None, curve=None, state=None):
    """2D-reprojection refinement of the four camera corrections; the human
    is frozen, so its joints are computed once as constants."""
    enc = Tensor(encode_phase(make_phase(instance.T).tau,
                              getattr(human, "pos_enc_freqs", 8)))
    with ad.no_grad():
        theta, phi, x = human.forward(enc)
        _, _, majors = fk_tensors(instance.skel, theta, phi, x)
    majors_const = Tensor(majors.data.copy())
    n_iters = cfg.inner_camera if n_iters is None else n_iters
    curve = curve if curve is not None else []
    warn = {"frames_all_behind": 0}
    state = state if state is not None else ad.adam_init(corr.parameters())

    def loss_fn():
        R_cam, t_cam, f_cam = effective_camera_tensors(instance.traj, corr)
        loss, dead = reprojection_loss_tensors(
            majors_const, R_cam, t_cam, f_cam,
            instance.traj.principal_point, instance.kp, cfg.sigma_gm,
        )
        warn["frames_all_behind"] += dead
        return loss

    _adam_loop(corr.parameters(), n_iters, cfg.lr_camera, loss_fn, curve,
               "camera update", state=state)
    return corr, curve, warn, state


def stage3_finetune(human, corr: CorrectionTensors, instance: ProblemInstance,
                    prior, cfg: StageConfig, rng: np.random.Generator,
                    n_iters=None, curve=None, warn=None):
    """Joint refinement: prior + warm-up anchors + 2D loss over fields and
    all four correction parameters, each group at its own learning rate."""
    n_iters = cfg.iters_finetune if n_iters is None else n_iters
    curve = curve if curve is not None else []
    warn = warn if warn is not None else {"frames_all_behind": 0}
    _grouped_adam(human, corr, instance, prior, cfg, rng, n_iters,
                  curve, warn, use_sds=True, abort_name="fine-tuning")
    return human, corr, curve, warn


def run_ablation(instance: ProblemInstance, prior, mode: str,
                 cfg: StageConfig | None = None) -> SolveReport:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode: {mode} (choose from {ABLATION_MODES})")
    return solve(instance, prior, cfg if cfg is not None else StageConfig(), mode=mode)


def make_human(instance: ProblemInstance, cfg: StageConfig, mode: str):
    if mode == "learnable-params":
        return FreeMotionParams(instance.theta_init, instance.phi_init, instance.x_init)
    return init_mlps(cfg.seed)


def solve(instance: ProblemInstance, prior, cfg: StageConfig | None = None,
          mode: str = "full") -> SolveReport:
    """Run the full schedule (or an ablation variant) and report everything."""
    cfg = cfg if cfg is not None else StageConfig()
    cfg.validate()
    instance.validate()
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode: {mode}")
    rng = np.random.default_rng(cfg.seed)
    human = make_human(instance, cfg, mode)
    corr = CorrectionTensors(CameraCorrection.identity(instance.T))
    tau = make_phase(instance.T)
    enc = Tensor(encode_phase(tau.tau, getattr(human, "pos_enc_freqs", 8)))

    curves: dict = {}
    times: dict = {}
    warnings: dict = {"frames_all_behind": 0}
    checksums: dict = {}
    stage_motions: dict = {}

    def snapshot() -> MotionSequence:
        with ad.no_grad():
            theta, phi, x = human.forward(enc)
        return MotionSequence(theta.data.copy(), phi.data.copy(), x.data.copy(), instance.fps)

    if mode == "single-stage":
        total = cfg.iters_warmup + cfg.iters_stage2_outer * (cfg.inner_human + cfg.inner_camera) + cfg.iters_finetune
        t0 = time.perf_counter()
        curves["single"] = []
        _single_stage(human, corr, instance, prior, cfg, rng, total, curves["single"], warnings)
        times["single"] = time.perf_counter() - t0
        stage_motions["single"] = snapshot()
        return SolveReport(curves, snapshot(), corr.snapshot(), times, warnings, checksums, stage_motions)

    run_warmup = mode not in ("no-warmup",)
    run_stage2 = mode not in ("no-mdm",)
    run_finetune = mode not in ("no-finetune",)

    if run_warmup and cfg.iters_warmup > 0:
        checksums["camera_before_stage1"] = params_checksum(corr.parameters())
        t0 = time.perf_counter()
        curves["stage1"] = []
        stage1_warmup(human, instance, cfg, curves["stage1"])
        times["stage1"] = time.perf_counter() - t0
        checksums["camera_after_stage1"] = params_checksum(corr.parameters())
        stage_motions["stage1"] = snapshot()

    if run_stage2:
        t0 = time.perf_counter()
        curves["stage2_human"] = []
        curves["stage2_camera"] = []
        human_state = ad.adam_init(human.parameters())
        camera_state = ad.adam_init(corr.parameters())
        for _outer in range(cfg.iters_stage2_outer):
            checksums["camera_before_2a"] = params_checksum(corr.parameters())
            stage2_human(human, instance, prior, cfg, rng,
                         curve=curves["stage2_human"], state=human_state)
            checksums["camera_after_2a"] = params_checksum(corr.parameters())
            checksums["fields_before_2b"] = params_checksum(human.parameters())
            _, _, warn, _ = stage2_camera(corr, human, instance, cfg,
                                          curve=curves["stage2_camera"], state=camera_state)
            warnings["frames_all_behind"] += warn["frames_all_behind"]
            checksums["fields_after_2b"] = params_checksum(human.parameters())
        times["stage2"] = time.perf_counter() - t0
        stage_motions["stage2"] = snapshot()

    if run_finetune and cfg.iters_finetune > 0:
        t0 = time.perf_counter()
        curves["stage3"] = []
        stage3_finetune(human, corr, instance, prior, cfg, rng,
                        curve=curves["stage3"], warn=warnings)
        times["stage3"] = time.perf_counter() - t0
        stage_motions["stage3"] = snapshot()

    return SolveReport(curves, snapshot(), corr.snapshot(), times, warnings, checksums, stage_motions)


def _joint_losses(human, corr, instance, prior, cfg, rng, enc, warnings, use_sds=True):
    """Shared combined-loss builder for fine-tuning and the single-stage mode."""
    den, sched = prior if prior is not None else (None, None)
    theta, phi, x = human.forward(enc)
    _, _, majors = fk_tensors(instance.skel, theta, phi, x)
    parts = []
    proxy_val = 0.0
    if use_sds and den is not None and cfg.lambda_diff > 0:
        L = den.window_len
        if instance.T < L:
            raise ValueError(
                f"sequence has {instance.T} frames but the prior window needs {L}"
            )
        start = int(rng.integers(0, instance.T - L + 1))
        feats = feature_tensors(instance.skel, theta, phi, x, instance.fps, start, L)
        grad_feat, proxy_val = sds_gradient(den, sched, cfg.sds, feats.data, rng)
        parts.append(ad.mul(ad.tsum(ad.mul(feats, Tensor(grad_feat))), cfg.lambda_diff))
    anchors = ad.add(
        ad.add(_anchor_sq(theta, instance.theta_init), _anchor_sq(phi, instance.phi_init)),
        _anchor_sq(x, instance.x_init),
    )
    parts.append(ad.mul(anchors, cfg.lambda_warm))
    R_cam, t_cam, f_cam = effective_camera_tensors(instance.traj, corr)
    l2d, dead = reprojection_loss_tensors(
        majors, R_cam, t_cam, f_cam, instance.traj.principal_point, instance.kp, cfg.sigma_gm
    )
    warnings["frames_all_behind"] += dead
    parts.append(ad.mul(l2d, cfg.lambda_2d))
    loss = parts[0]
    for p in parts[1:]:
        loss = ad.add(loss, p)
    scalar = (cfg.lambda_diff * proxy_val + cfg.lambda_warm * float(anchors.data)
              + cfg.lambda_2d * float(l2d.data))
    return loss, scalar


def _grouped_adam(human, corr, instance, prior, cfg, rng, n_iters, curve, warnings,
                  use_sds=True, abort_name="fine-tuning"):
    """Adam over both groups with per-group learning rates."""
    enc = Tensor(encode_phase(make_phase(instance.T).tau, getattr(human, "pos_enc_freqs", 8)))
    field_params = human.parameters()
    cam_params = corr.parameters()
    f_state = ad.adam_init(field_params)
    c_state = ad.adam_init(cam_params)
    tape = ad.active_tape()
    for _ in range(n_iters):
        tape.clear()
        loss, scalar = _joint_losses(human, corr, instance, prior, cfg, rng, enc, warnings, use_sds)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"{abort_name} diverged (non-finite loss)")
        ad.backward(loss)
        ad.sgd_adam_step(field_params, [p.grad for p in field_params], f_state, cfg.lr_fields)
        ad.sgd_adam_step(cam_params, [p.grad for p in cam_params], c_state, cfg.lr_camera)
        for p in field_params + cam_params:
            p.zero_grad()
        curve.append(scalar)
    tape.clear()


def _single_stage(human, corr, instance, prior, cfg, rng, n_iters, curve, warnings):
    _grouped_adam(human, corr, instance, prior, cfg, rng, n_iters,
                  curve, warnings, use_sds=True, abort_name="single-stage")


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def save_report(report: SolveReport, out_dir):
    import csv as _csv

    from .motionfield import save_motion_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_motion_csv(report.motion, out / "motion.csv")
    for name, seq in report.stage_motions.items():
        save_motion_csv(seq, out / f"motion_{name}.csv")
    corr = report.correction
    np.savez(out / "correction.npz", b_R=corr.b_R, s_t=corr.s_t, b_t=corr.b_t, s_f=corr.s_f)
    doc = {
        "wall_time": report.wall_time,
        "warnings": report.warnings,
        "checksums": report.checksums,
        "stages": sorted(report.curves.keys()),
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2))
    for name, curve in report.curves.items():
        with (out / f"curve_{name}.csv").open("w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(curve):
                w.writerow([i, repr(float(v))])
