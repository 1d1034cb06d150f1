"""Dynamic camera model: per-frame SLAM-style extrinsics/intrinsics, four
learnable per-frame corrections, pinhole projection, and the robust 2D
reprojection error.

Camera frame: +z is the optical axis (depth), so a point in front of the
camera has positive camera-frame z. World -> camera: p_cam = R @ p - t.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kinematics import matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_t

CAMERA_FORMAT_VERSION = 1

MIN_DEPTH = 1e-6
SCALE_CLAMP = (0.1, 10.0)
DEFAULT_SIGMA_GM = 100.0  # px


@dataclass
class CameraTrajectory:
    R_slam: np.ndarray           # (T, 3, 3) world -> camera
    t_slam: np.ndarray           # (T, 3)
    f_slam: np.ndarray           # (T,)
    principal_point: np.ndarray  # (2,)
    image_size: tuple            # (width, height)

    @property
    def T(self) -> int:
        return self.R_slam.shape[0]

    def validate(self):
        RRt = self.R_slam @ np.swapaxes(self.R_slam, -1, -2)
        if not np.allclose(RRt, np.eye(3), atol=1e-6):
            raise ValueError("camera rotations must be orthogonal")
        if not np.allclose(np.linalg.det(self.R_slam), 1.0, atol=1e-6):
            raise ValueError("camera rotations must have det +1")
        if np.any(self.f_slam <= 0):
            raise ValueError("focal lengths must be positive")


@dataclass
class CameraCorrection:
    b_R: np.ndarray  # (T, 6) rotation bias in the 6d representation
    s_t: np.ndarray  # (T,) translation scale
    b_t: np.ndarray  # (T, 3) translation bias
    s_f: np.ndarray  # (T,) focal scale

    @classmethod
    def identity(cls, T: int) -> "CameraCorrection":
        return cls(np.zeros((T, 6)), np.ones(T), np.zeros((T, 3)), np.ones(T))

    def copy(self) -> "CameraCorrection":
        return CameraCorrection(self.b_R.copy(), self.s_t.copy(), self.b_t.copy(), self.s_f.copy())


@dataclass
class Keypoints2D:
    obs: np.ndarray   # (T, 14, 2) pixels
    conf: np.ndarray  # (T, 14) in [0, 1]

    def validate(self):
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise ValueError("confidences must lie in [0, 1]")
        if not np.all(np.isfinite(self.obs)):
            raise ValueError("non-finite keypoint coordinates")


def lookat_rotation(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World->camera rotation for a camera at `center` looking at `target`."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=np.float64), fwd)
    right = right / np.linalg.norm(right)
    upv = np.cross(fwd, right)
    return np.stack((right, upv, fwd), axis=0)


def extrinsics_from_center(R: np.ndarray, center) -> np.ndarray:
    """t such that p_cam = R p - t places the camera at `center`."""
    return R @ np.asarray(center, dtype=np.float64)


# ---------------------------------------------------------------------------
# effective camera (tape-aware)
# ---------------------------------------------------------------------------

class CorrectionTensors:
    """Leaf tensors mirroring a CameraCorrection, for optimization."""

    def __init__(self, corr: CameraCorrection):
        self.b_R = Tensor(corr.b_R.copy(), requires_grad=True)
        self.s_t = Tensor(corr.s_t.copy(), requires_grad=True)
        self.b_t = Tensor(corr.b_t.copy(), requires_grad=True)
        self.s_f = Tensor(corr.s_f.copy(), requires_grad=True)

    def parameters(self):
        return [self.b_R, self.s_t, self.b_t, self.s_f]

    def snapshot(self) -> CameraCorrection:
        return CameraCorrection(
            self.b_R.data.copy(), self.s_t.data.copy(), self.b_t.data.copy(), self.s_f.data.copy()
        )


def effective_camera_tensors(traj: CameraTrajectory, corr: CorrectionTensors):
    """(T,3,3) R_cam, (T,3) t_cam, (T,) f_cam as tape tensors."""
    r6_slam = matrix_to_rot6d(traj.R_slam)  # constant (T, 6)
    R_cam = rot6d_to_matrix_t(ad.add(Tensor(r6_slam), corr.b_R))
    s_t = ad.clamp(corr.s_t, *SCALE_CLAMP)
    t_cam = ad.add(ad.mul(Tensor(traj.t_slam), ad.reshape(s_t, (-1, 1))), corr.b_t)
    s_f = ad.clamp(corr.s_f, *SCALE_CLAMP)
    f_cam = ad.mul(Tensor(traj.f_slam), s_f)
    return R_cam, t_cam, f_cam


def effective_camera(traj: CameraTrajectory, corr: CameraCorrection, t: int):
    """Apply the four corrections at frame t (numpy)."""
    if t >= traj.T:
        raise ValueError(f"frame {t} out of range for trajectory of length {traj.T}")
    r6 = matrix_to_rot6d(traj.R_slam[t]) + corr.b_R[t]
    R_cam = rot6d_to_matrix(r6)
    s_t = float(np.clip(corr.s_t[t], *SCALE_CLAMP))
    s_f = float(np.clip(corr.s_f[t], *SCALE_CLAMP))
    t_cam = traj.t_slam[t] * s_t + corr.b_t[t]
    f_cam = float(traj.f_slam[t]) * s_f
    return R_cam, t_cam, f_cam


# ---------------------------------------------------------------------------
# projection and robust loss
# ---------------------------------------------------------------------------

def project(point3d, R_cam, t_cam, f_cam, principal_point):
    """Pinhole projection of one world point; returns (pixel, valid).

    Points at or behind the camera plane are flagged invalid rather than
    raising: mid-optimization cameras transiently swing past geometry.
    """
    p_cam = np.asarray(R_cam) @ np.asarray(point3d, dtype=np.float64) - np.asarray(t_cam)
    depth = p_cam[2]
    if depth <= MIN_DEPTH:
        return np.zeros(2), False
    pix = f_cam * p_cam[:2] / depth + np.asarray(principal_point, dtype=np.float64)
    return pix, True


def project_points(points, R_cam, t_cam, f_cam, principal_point):
    """Vectorized projection: (..., 3) world points -> (..., 2) pixels, valid mask."""
    points = np.asarray(points, dtype=np.float64)
    p_cam = points @ np.asarray(R_cam).T - np.asarray(t_cam)
    depth = p_cam[..., 2]
    valid = depth > MIN_DEPTH
    safe = np.where(valid, depth, 1.0)
    pix = f_cam * p_cam[..., :2] / safe[..., None] + np.asarray(principal_point)
    return np.where(valid[..., None], pix, 0.0), valid


def geman_mcclure(residual, sigma_gm: float = DEFAULT_SIGMA_GM) -> float:
    """rho(r) = sigma^2 ||r||^2 / (sigma^2 + ||r||^2); bounded by sigma^2."""
    if sigma_gm <= 0:
        raise ValueError("sigma_gm must be positive")
    r2 = float(np.sum(np.square(np.asarray(residual, dtype=np.float64))))
    s2 = sigma_gm * sigma_gm
    return s2 * r2 / (s2 + r2)


def reprojection_loss_tensors(
    majors: Tensor,
    R_cam: Tensor,
    t_cam: Tensor,
    f_cam: Tensor,
    principal_point,
    kp: Keypoints2D,
    sigma_gm: float = DEFAULT_SIGMA_GM,
):
    """Tape version of the robust 2D loss.

    majors (T,14,3) world joints; returns (scalar loss tensor, warn counter).
    Behind-camera joints get zero weight; a frame with no valid joint
    contributes nothing and bumps the warning counter.
    """
    T = majors.shape[0]
    p_cam = ad.sub(
        ad.transpose(ad.matmul(R_cam, ad.transpose(majors, (0, 2, 1))), (0, 2, 1)),
        ad.reshape(t_cam, (T, 1, 3)),
    )
    depth = p_cam[..., 2:3]
    valid = (depth.data[..., 0] > MIN_DEPTH).astype(np.float64)  # (T, 14)
    safe_depth = ad.clamp(depth, MIN_DEPTH, np.inf)
    pix = ad.add(
        ad.mul(ad.div(p_cam[..., 0:2], safe_depth), ad.reshape(f_cam, (T, 1, 1))),
        np.asarray(principal_point, dtype=np.float64),
    )
    res = ad.sub(pix, Tensor(kp.obs))
    r2 = ad.tsum(ad.mul(res, res), axis=-1)  # (T, 14)
    s2 = sigma_gm * sigma_gm
    rho = ad.div(ad.mul(r2, s2), ad.add(r2, s2))
    w = kp.conf * valid
    loss = ad.div(ad.tsum(ad.mul(rho, Tensor(w))), float(T))
    dead_frames = int(np.sum(valid.sum(axis=1) == 0))
    return loss, dead_frames


def reprojection_loss(seq, skel, traj: CameraTrajectory, corr: CameraCorrection, kp: Keypoints2D,
                      sigma_gm: float = DEFAULT_SIGMA_GM) -> float:
    """L_2D = (1/T) sum_t sum_j conf * rho(project(joint) - obs). Numpy path."""
    from .kinematics import fk_sequence

    if seq.T != traj.T or seq.T != kp.obs.shape[0]:
        raise ValueError("sequence, trajectory, and keypoints must share T")
    majors = fk_sequence(skel, seq.theta_seq, seq.phi_seq, seq.x_seq)["majors"]
    with ad.no_grad():
        ct = CorrectionTensors(corr)
        R_cam, t_cam, f_cam = effective_camera_tensors(traj, ct)
        loss, _ = reprojection_loss_tensors(
            Tensor(majors), R_cam, t_cam, f_cam, traj.principal_point, kp, sigma_gm
        )
    return float(loss.data)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_camera_json(traj: CameraTrajectory, path):
    doc = {
        "version": CAMERA_FORMAT_VERSION,
        "principal_point": traj.principal_point.tolist(),
        "image_size": list(traj.image_size),
        "frames": [
            {
                "R": traj.R_slam[t].reshape(9).tolist(),
                "t": traj.t_slam[t].tolist(),
                "f": float(traj.f_slam[t]),
            }
            for t in range(traj.T)
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_camera_json(path) -> CameraTrajectory:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CAMERA_FORMAT_VERSION:
        raise ValueError(f"unsupported camera format version: {doc.get('version')}")
    frames = doc["frames"]
    traj = CameraTrajectory(
        R_slam=np.array([f["R"] for f in frames]).reshape(-1, 3, 3),
        t_slam=np.array([f["t"] for f in frames]),
        f_slam=np.array([f["f"] for f in frames]),
        principal_point=np.array(doc["principal_point"]),
        image_size=tuple(doc["image_size"]),
    )
    traj.validate()
    return traj


def save_keypoints_csv(kp: Keypoints2D, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "u", "v", "conf"])
        T, J = kp.conf.shape
        for t in range(T):
            for j in range(J):
                w.writerow([t, j, repr(float(kp.obs[t, j, 0])), repr(float(kp.obs[t, j, 1])),
                            repr(float(kp.conf[t, j]))])


def load_keypoints_csv(path) -> Keypoints2D:
    rows = []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["frame", "joint", "u", "v", "conf"]:
            raise ValueError("unexpected keypoints CSV header")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    T = max(r[0] for r in rows) + 1
    J = max(r[1] for r in rows) + 1
    obs = np.zeros((T, J, 2))
    conf = np.zeros((T, J))
    for t, j, u, v, c in rows:
        obs[t, j] = (u, v)
        conf[t, j] = c
    kp = Keypoints2D(obs, conf)
    kp.validate()
    return kp
