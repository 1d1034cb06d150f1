"""Simplified differentiable body model: a fixed 24-joint tree, a sparse
skinned vertex set, and a linear regressor selecting 14 major body joints.

Axis convention (used everywhere in this package): right-handed, +y up,
body faces +z at rest. Body joints use axis-angle; the 6d representation
is reserved for camera rotation corrections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NUM_JOINTS = 24
NUM_VERTICES = 64
NUM_MAJOR_JOINTS = 14

SKELETON_FORMAT_VERSION = 1

JOINT_NAMES = [
    "pelvis", "hip_l", "hip_r", "spine1", "knee_l", "knee_r", "spine2",
    "ankle_l", "ankle_r", "spine3", "foot_l", "foot_r", "neck", "collar_l",
    "collar_r", "head", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
    "wrist_l", "wrist_r", "hand_l", "hand_r",
]

# 14 major body joints, in the order used by keypoints, the regressor,
# and the motion-feature transform.
MAJOR_JOINT_NAMES = [
    "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
    "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "wrist_l", "wrist_r",
    "neck", "head",
]

# foot (toe) joints used for contact labels and the skate diagnostic
FOOT_JOINTS = (JOINT_NAMES.index("foot_l"), JOINT_NAMES.index("foot_r"))


@dataclass
class Skeleton:
    parent: np.ndarray        # (24,) int, parent[0] == -1, parent[j] < j
    rest_offsets: np.ndarray  # (24, 3) bone offsets in meters
    vert_rest: np.ndarray     # (V, 3) rest-pose vertex positions
    vert_joints: np.ndarray   # (V, 4) int, influencing joints
    vert_weights: np.ndarray  # (V, 4) blend weights, rows sum to 1
    regressor_W: np.ndarray   # (14, V) rows sum to 1

    def validate(self):
        if self.parent[0] != -1:
            raise ValueError("root joint must have parent -1")
        for j in range(1, NUM_JOINTS):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j} breaks topological parent order")
        if not np.allclose(self.vert_weights.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("blend weight rows must sum to 1")
        if np.any(self.vert_weights < 0):
            raise ValueError("blend weights must be nonnegative")
        if not np.allclose(self.regressor_W.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("regressor rows must sum to 1")

    def rest_joint_positions(self) -> np.ndarray:
        """(24, 3) world joint positions in the rest pose, pelvis at origin."""
        pos = np.zeros((NUM_JOINTS, 3))
        for j in range(1, NUM_JOINTS):
            pos[j] = pos[self.parent[j]] + self.rest_offsets[j]
        return pos

    def dense_vertex_weights(self) -> np.ndarray:
        """(V, 24) dense blend-weight matrix."""
        W = np.zeros((len(self.vert_rest), NUM_JOINTS))
        for v in range(len(self.vert_rest)):
            for k in range(4):
                W[v, self.vert_joints[v, k]] += self.vert_weights[v, k]
        return W


@dataclass
class Pose:
    theta: np.ndarray   # (24, 3) per-joint axis-angle, radians
    phi: np.ndarray     # (3,) root orientation axis-angle
    x_root: np.ndarray  # (3,) root translation, meters


@dataclass
class PosedBody:
    joints3d: np.ndarray        # (24, 3)
    verts3d: np.ndarray         # (V, 3)
    major_joints3d: np.ndarray  # (14, 3)


# ---------------------------------------------------------------------------
# rotation representations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt the two embedded 3-vectors of a 6d rotation (batched ok)."""
    r6 = np.asarray(r6, dtype=np.float64)
    a, b = r6[..., 0:3], r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-8):
        raise ValueError("degenerate 6d rotation")
    x = a / na
    b_perp = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < 1e-8):
        raise ValueError("degenerate 6d rotation")
    y = b_perp / nb
    z = np.cross(x, y)
    return np.stack((x, y, z), axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    """First two columns of a rotation matrix, stacked to a 6-vector."""
    R = np.asarray(R, dtype=np.float64)
    if not np.allclose(R @ np.swapaxes(R, -1, -2), np.eye(3), atol=1e-6):
        raise ValueError("input is not a rotation matrix")
    det = np.linalg.det(R)
    if not np.allclose(det, 1.0, atol=1e-6):
        raise ValueError("input is not a rotation matrix")
    return np.concatenate((R[..., :, 0], R[..., :, 1]), axis=-1)


def rot6d_to_matrix_t(r6: Tensor) -> Tensor:
    """Differentiable Gram-Schmidt for (..., 6) tensors on the tape."""
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = ad.norm(a, axis=-1, keepdims=True)
    if np.any(na.data < 1e-8):
        raise ValueError("degenerate 6d rotation")
    x = ad.div(a, na)
    dot = ad.tsum(ad.mul(x, b), axis=-1, keepdims=True)
    b_perp = ad.sub(b, ad.mul(dot, x))
    nb = ad.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb.data < 1e-8):
        raise ValueError("degenerate 6d rotation")
    y = ad.div(b_perp, nb)
    z = ad.cross(x, y)
    return ad.stack((x, y, z), axis=-1)


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues, numpy only (no tape), batched over leading axes."""
    with ad.no_grad():
        return ad.rodrigues(np.asarray(aa, dtype=np.float64)).data


def matrix_to_axis_angle(R) -> np.ndarray:
    """Log map SO(3) -> axis-angle with |angle| <= pi, batched."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(tr)
    vee = np.stack(
        (R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]),
        axis=-1,
    )
    sin_a = np.sin(angle)
    small = angle < 1e-7
    near_pi = angle > np.pi - 1e-5
    scale = np.where(small | near_pi, 0.5, angle / np.where(sin_a == 0, 1.0, 2.0 * sin_a))
    aa = vee * scale[..., None]
    if np.any(near_pi):
        # vee degenerates near pi; recover the axis from R + I instead
        M = (R + np.broadcast_to(np.eye(3), R.shape)) / 2.0
        axis_sq = np.clip(np.stack([M[..., 0, 0], M[..., 1, 1], M[..., 2, 2]], axis=-1), 0.0, None)
        axis = np.sqrt(axis_sq)
        # fix signs from the off-diagonal products
        axis[..., 1] = np.copysign(axis[..., 1], M[..., 0, 1] * axis[..., 0] + 1e-30)
        axis[..., 2] = np.copysign(axis[..., 2], M[..., 0, 2] * axis[..., 0] + 1e-30)
        nrm = np.linalg.norm(axis, axis=-1, keepdims=True)
        axis = axis / np.where(nrm == 0, 1.0, nrm)
        aa = np.where(near_pi[..., None], axis * angle[..., None], aa)
    return aa


def canonicalize_axis_angle(aa) -> np.ndarray:
    """Wrap axis-angle magnitudes into [0, pi]; metrics only, never on tape."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(angle, 2.0 * np.pi)
    flip = wrapped > np.pi
    wrapped = np.where(flip, wrapped - 2.0 * np.pi, wrapped)
    scale = np.where(angle > 1e-12, wrapped / np.where(angle == 0, 1.0, angle), 1.0)
    return aa * scale


def yaw_rotation(yaw) -> np.ndarray:
    """Rotation about +y by yaw (batched over leading axes)."""
    yaw = np.asarray(yaw, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    z = np.zeros_like(yaw)
    o = np.ones_like(yaw)
    return np.stack(
        (
            np.stack((c, z, s), axis=-1),
            np.stack((z, o, z), axis=-1),
            np.stack((-s, z, c), axis=-1),
        ),
        axis=-2,
    )


# ---------------------------------------------------------------------------
# forward kinematics and skinning
# ---------------------------------------------------------------------------

def fk_tensors(skel: Skeleton, theta: Tensor, phi: Tensor, x_root: Tensor):
    """Batched FK + skinning on the tape.

    theta (T, 24, 3), phi (T, 3), x_root (T, 3) ->
    joints (T, 24, 3), verts (T, V, 3), majors (T, 14, 3).
    """
    T = theta.shape[0]
    R_local = ad.rodrigues(theta)                      # (T, 24, 3, 3)
    R_root = ad.rodrigues(phi)                         # (T, 3, 3)

    R_world = [None] * NUM_JOINTS
    p_world = [None] * NUM_JOINTS
    R_world[0] = ad.matmul(R_root, R_local[:, 0])
    p_world[0] = x_root
    for j in range(1, NUM_JOINTS):
        par = int(skel.parent[j])
        off = skel.rest_offsets[j].reshape(3, 1)
        step = ad.reshape(ad.matmul(R_world[par], off), (T, 3))
        p_world[j] = ad.add(p_world[par], step)
        R_world[j] = ad.matmul(R_world[par], R_local[:, j])

    joints = ad.stack(p_world, axis=1)                 # (T, 24, 3)
    R_all = ad.stack(R_world, axis=1)                  # (T, 24, 3, 3)

    # LBS: vert_v = sum_j W[v,j] * (R_j (x_v - c_j) + p_j)
    Wd = skel.dense_vertex_weights()                   # (V, 24)
    c = skel.rest_joint_positions()                    # (24, 3)
    Rc = ad.reshape(ad.matmul(R_all, c.reshape(NUM_JOINTS, 3, 1)), (T, NUM_JOINTS, 3))
    b = ad.sub(joints, Rc)                             # (T, 24, 3)
    M = ad.reshape(ad.matmul(Wd, ad.reshape(R_all, (T, NUM_JOINTS, 9))), (T, -1, 3, 3))
    d = ad.matmul(Wd, b)                               # (T, V, 3)
    Vx = skel.vert_rest.reshape(-1, 3, 1)              # (V, 3, 1)
    verts = ad.add(ad.reshape(ad.matmul(M, Vx), (T, -1, 3)), d)
    majors = ad.matmul(skel.regressor_W, verts)        # (T, 14, 3)
    return joints, verts, majors


def forward_kinematics(skel: Skeleton, pose: Pose) -> PosedBody:
    """Pose a single frame. Raises on non-finite input."""
    theta = np.asarray(pose.theta, dtype=np.float64)
    phi = np.asarray(pose.phi, dtype=np.float64)
    x_root = np.asarray(pose.x_root, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi)) and np.all(np.isfinite(x_root))):
        raise ValueError("invalid pose")
    with ad.no_grad():
        joints, verts, majors = fk_tensors(
            skel,
            Tensor(theta[None]),
            Tensor(phi[None]),
            Tensor(x_root[None]),
        )
    return PosedBody(joints.data[0], verts.data[0], majors.data[0])


def fk_sequence(skel: Skeleton, theta_seq, phi_seq, x_seq):
    """Numpy FK over a whole sequence: (T,24,3),(T,3),(T,3) -> dict of arrays."""
    with ad.no_grad():
        joints, verts, majors = fk_tensors(
            skel, Tensor(theta_seq), Tensor(phi_seq), Tensor(x_seq)
        )
    return {"joints": joints.data, "verts": verts.data, "majors": majors.data}


# ---------------------------------------------------------------------------
# default skeleton
# ---------------------------------------------------------------------------

_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)

_OFFSETS = np.array(
    [
        [0.000, 0.000, 0.000],    # pelvis
        [0.100, -0.050, 0.000],   # hip_l
        [-0.100, -0.050, 0.000],  # hip_r
        [0.000, 0.120, 0.000],    # spine1
        [0.000, -0.420, 0.000],   # knee_l
        [0.000, -0.420, 0.000],   # knee_r
        [0.000, 0.140, 0.000],    # spine2
        [0.000, -0.430, 0.000],   # ankle_l
        [0.000, -0.430, 0.000],   # ankle_r
        [0.000, 0.140, 0.000],    # spine3
        [0.000, -0.060, 0.130],   # foot_l (toe)
        [0.000, -0.060, 0.130],   # foot_r (toe)
        [0.000, 0.120, 0.000],    # neck
        [0.080, 0.060, 0.000],    # collar_l
        [-0.080, 0.060, 0.000],   # collar_r
        [0.000, 0.140, 0.000],    # head
        [0.100, 0.020, 0.000],    # shoulder_l
        [-0.100, 0.020, 0.000],   # shoulder_r
        [0.260, 0.000, 0.000],    # elbow_l
        [-0.260, 0.000, 0.000],   # elbow_r
        [0.250, 0.000, 0.000],    # wrist_l
        [-0.250, 0.000, 0.000],   # wrist_r
        [0.080, 0.000, 0.000],    # hand_l
        [-0.080, 0.000, 0.000],   # hand_r
    ]
)

# (parent_joint, child_joint, fractions along the bone) for filler vertices
_SEGMENT_SPECS = [
    ("hip_l", "knee_l", (0.25, 0.5, 0.75)),
    ("hip_r", "knee_r", (0.25, 0.5, 0.75)),
    ("knee_l", "ankle_l", (0.3, 0.6, 0.9)),
    ("knee_r", "ankle_r", (0.3, 0.6, 0.9)),
    ("ankle_l", "foot_l", (0.5,)),
    ("ankle_r", "foot_r", (0.5,)),
    ("pelvis", "spine1", (0.5,)),
    ("spine1", "spine2", (0.5,)),
    ("spine2", "spine3", (0.5,)),
    ("spine3", "neck", (0.4, 0.8)),
    ("neck", "head", (0.5,)),
    ("collar_l", "shoulder_l", (0.5,)),
    ("collar_r", "shoulder_r", (0.5,)),
    ("shoulder_l", "elbow_l", (0.33, 0.66)),
    ("shoulder_r", "elbow_r", (0.33, 0.66)),
    ("elbow_l", "wrist_l", (0.33, 0.66)),
    ("elbow_r", "wrist_r", (0.33, 0.66)),
    ("wrist_l", "hand_l", (0.5,)),
    ("wrist_r", "hand_r", (0.5,)),
]

# radial nudges (meters) cycling over filler vertices so the cloud has volume
_RADIAL = np.array(
    [[0.03, 0.0, 0.0], [0.0, 0.0, 0.03], [-0.03, 0.0, 0.0], [0.0, 0.0, -0.03]]
)


def build_default_skeleton() -> Skeleton:
    """Deterministic humanoid: 24 joints, 64 skinned vertices, 14-joint regressor."""
    rest = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        rest[j] = rest[_PARENTS[j]] + _OFFSETS[j]

    name_to_idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    positions, joints, weights = [], [], []

    # one vertex pinned exactly on each major joint -> the regressor can
    # select it and regressed majors coincide with the true joints
    major_idx = [name_to_idx[n] for n in MAJOR_JOINT_NAMES]
    for j in major_idx:
        positions.append(rest[j])
        joints.append([j, 0, 0, 0])
        weights.append([1.0, 0.0, 0.0, 0.0])

    k = 0
    for pname, cname, fracs in _SEGMENT_SPECS:
        p, c = name_to_idx[pname], name_to_idx[cname]
        for f in fracs:
            pos = (1.0 - f) * rest[p] + f * rest[c] + _RADIAL[k % 4]
            positions.append(pos)
            joints.append([p, c, 0, 0])
            weights.append([1.0 - f, f, 0.0, 0.0])
            k += 1

    # pad to exactly V with pelvis-weighted torso shell points
    while len(positions) < NUM_VERTICES:
        i = len(positions)
        pos = rest[name_to_idx["spine1"]] + _RADIAL[i % 4] * 2.5
        positions.append(pos)
        joints.append([name_to_idx["spine1"], name_to_idx["pelvis"], 0, 0])
        weights.append([0.7, 0.3, 0.0, 0.0])
    if len(positions) != NUM_VERTICES:
        raise AssertionError(f"vertex construction produced {len(positions)} != {NUM_VERTICES}")

    W = np.zeros((NUM_MAJOR_JOINTS, NUM_VERTICES))
    for row in range(NUM_MAJOR_JOINTS):
        W[row, row] = 1.0  # pinned vertices come first, in major-joint order

    skel = Skeleton(
        parent=_PARENTS.copy(),
        rest_offsets=_OFFSETS.copy(),
        vert_rest=np.array(positions),
        vert_joints=np.array(joints, dtype=np.int64),
        vert_weights=np.array(weights),
        regressor_W=W,
    )
    skel.validate()
    return skel


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_skeleton(skel: Skeleton, path):
    doc = {
        "version": SKELETON_FORMAT_VERSION,
        "parents": skel.parent.tolist(),
        "rest_offsets": skel.rest_offsets.tolist(),
        "vertices": {
            "positions": skel.vert_rest.tolist(),
            "joints": skel.vert_joints.tolist(),
            "weights": skel.vert_weights.tolist(),
        },
        "regressor": skel.regressor_W.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_skeleton(path) -> Skeleton:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SKELETON_FORMAT_VERSION:
        raise ValueError(f"unsupported skeleton format version: {doc.get('version')}")
    skel = Skeleton(
        parent=np.array(doc["parents"], dtype=np.int64),
        rest_offsets=np.array(doc["rest_offsets"]),
        vert_rest=np.array(doc["vertices"]["positions"]),
        vert_joints=np.array(doc["vertices"]["joints"], dtype=np.int64),
        vert_weights=np.array(doc["vertices"]["weights"]),
        regressor_W=np.array(doc["regressor"]),
    )
    skel.validate()
    return skel
