"""Evaluation metrics: per-joint and per-vertex position errors in local
(root-aligned) and global (first-frame yaw+translation aligned) variants,
plus a foot-skate diagnostic.

All metrics are pure functions of (pred, gt, skeleton); prediction is
aligned onto ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import FOOT_JOINTS, Skeleton, fk_sequence, yaw_rotation
from .motionfield import MotionSequence

SKATE_CONTACT_HEIGHT = 0.05  # m


@dataclass
class EvalResult:
    mpjpe: float      # mm
    g_mpjpe: float    # mm
    mpvpe: float      # mm
    g_mpvpe: float    # mm
    skate: float      # cm/frame
    per_frame: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "mpjpe_mm": self.mpjpe,
            "g_mpjpe_mm": self.g_mpjpe,
            "mpvpe_mm": self.mpvpe,
            "g_mpvpe_mm": self.g_mpvpe,
            "skate_cm_per_frame": self.skate,
        }


def _check_lengths(pred: MotionSequence, gt: MotionSequence):
    if pred.T != gt.T:
        raise ValueError(f"sequence lengths differ: {pred.T} vs {gt.T}")


def _points(seq: MotionSequence, skel: Skeleton, what: str) -> np.ndarray:
    out = fk_sequence(skel, seq.theta_seq, seq.phi_seq, seq.x_seq)
    return out[what]


def _local_error(pred_pts, gt_pts, pred_root, gt_root) -> tuple[float, np.ndarray]:
    p = pred_pts - pred_root[:, None, :]
    g = gt_pts - gt_root[:, None, :]
    d = np.linalg.norm(p - g, axis=-1)
    return float(d.mean() * 1000.0), d.mean(axis=1) * 1000.0


def first_frame_alignment(pred_joints0: np.ndarray, gt_joints0: np.ndarray):
    """Yaw (about +y) plus translation aligning pred frame 0 onto gt frame 0."""
    pc = pred_joints0.mean(axis=0)
    gc = gt_joints0.mean(axis=0)
    p = pred_joints0 - pc
    g = gt_joints0 - gc
    # planar Procrustes in the xz-plane
    num = np.sum(p[:, 2] * g[:, 0] - p[:, 0] * g[:, 2])
    den = np.sum(p[:, 0] * g[:, 0] + p[:, 2] * g[:, 2])
    yaw = np.arctan2(num, den)
    R = yaw_rotation(yaw)
    d = gc - R @ pc
    return R, d


def _global_error(pred_pts, gt_pts, pred_joints0, gt_joints0) -> tuple[float, np.ndarray]:
    R, d = first_frame_alignment(pred_joints0, gt_joints0)
    p = pred_pts @ R.T + d
    dist = np.linalg.norm(p - gt_pts, axis=-1)
    return float(dist.mean() * 1000.0), dist.mean(axis=1) * 1000.0


def mpjpe_local(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> float:
    """Per-frame root-aligned mean joint error, mm."""
    _check_lengths(pred, gt)
    pj = _points(pred, skel, "joints")
    gj = _points(gt, skel, "joints")
    err, _ = _local_error(pj, gj, pj[:, 0], gj[:, 0])
    return err


def mpjpe_global(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> float:
    """World-frame mean joint error after first-frame yaw+translation alignment, mm."""
    _check_lengths(pred, gt)
    pj = _points(pred, skel, "joints")
    gj = _points(gt, skel, "joints")
    err, _ = _global_error(pj, gj, pj[0], gj[0])
    return err


def mpvpe_local(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> float:
    _check_lengths(pred, gt)
    pj = _points(pred, skel, "joints")
    gj = _points(gt, skel, "joints")
    pv = _points(pred, skel, "verts")
    gv = _points(gt, skel, "verts")
    err, _ = _local_error(pv, gv, pj[:, 0], gj[:, 0])
    return err


def mpvpe_global(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> float:
    _check_lengths(pred, gt)
    pj = _points(pred, skel, "joints")
    gj = _points(gt, skel, "joints")
    pv = _points(pred, skel, "verts")
    gv = _points(gt, skel, "verts")
    err, _ = _global_error(pv, gv, pj[0], gj[0])
    return err


def foot_skate(seq: MotionSequence, skel: Skeleton) -> float:
    """Mean horizontal foot displacement (cm/frame) over contact frames
    (foot joint below 5 cm)."""
    if seq.T < 2:
        raise ValueError("skate needs at least two frames")
    joints = _points(seq, skel, "joints")
    total, count = 0.0, 0
    for j in FOOT_JOINTS:
        foot = joints[:, j]
        contact = foot[:-1, 1] < SKATE_CONTACT_HEIGHT
        step = np.linalg.norm(foot[1:, [0, 2]] - foot[:-1, [0, 2]], axis=-1)
        total += float(step[contact].sum())
        count += int(contact.sum())
    if count == 0:
        return 0.0
    return total / count * 100.0


def evaluate(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> EvalResult:
    _check_lengths(pred, gt)
    pj = _points(pred, skel, "joints")
    gj = _points(gt, skel, "joints")
    pv = _points(pred, skel, "verts")
    gv = _points(gt, skel, "verts")
    mpjpe, pf_local = _local_error(pj, gj, pj[:, 0], gj[:, 0])
    g_mpjpe, pf_global = _global_error(pj, gj, pj[0], gj[0])
    mpvpe, _ = _local_error(pv, gv, pj[:, 0], gj[:, 0])
    g_mpvpe, _ = _global_error(pv, gv, pj[0], gj[0])
    return EvalResult(
        mpjpe=mpjpe,
        g_mpjpe=g_mpjpe,
        mpvpe=mpvpe,
        g_mpvpe=g_mpvpe,
        skate=foot_skate(pred, skel),
        per_frame={"mpjpe_mm": pf_local, "g_mpjpe_mm": pf_global},
    )


# ---------------------------------------------------------------------------
# results table (CSV + text, full row first then variants with deltas)
# ---------------------------------------------------------------------------

_COLS = ("mpjpe_mm", "g_mpjpe_mm", "mpvpe_mm", "g_mpvpe_mm", "skate_cm_per_frame")


def save_results_csv(rows: dict[str, dict], path):
    """rows: name -> metric dict (EvalResult.row())."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", *_COLS])
        for name, r in rows.items():
            w.writerow([name] + [repr(float(r[c])) for c in _COLS])


def format_results_table(rows: dict[str, dict], reference: str | None = None) -> str:
    """Text table; when a reference row is given the other rows carry deltas."""
    names = list(rows.keys())
    ref = rows.get(reference) if reference else None
    header = f"{'name':<18}" + "".join(f"{c:>22}" for c in _COLS)
    lines = [header, "-" * len(header)]
    for name in names:
        r = rows[name]
        cells = []
        for c in _COLS:
            v = float(r[c])
            if ref is not None and name != reference:
                cells.append(f"{v:>12.1f} ({v - float(ref[c]):+8.1f})")
            else:
                cells.append(f"{v:>22.1f}")
        lines.append(f"{name:<18}" + "".join(cells))
    return "\n".join(lines)
