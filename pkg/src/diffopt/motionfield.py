"""Implicit neural representation of one motion sequence: three small MLPs
map a normalized phase scalar to articulation, root orientation, and root
translation. tanh activations and a sinusoidal phase encoding keep the
represented motion smooth across frames.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MOTION_FORMAT_VERSION = 1

DEFAULT_HIDDEN = (256, 256, 256)
DEFAULT_FREQ_PAIRS = 8

THETA_DIM = 72  # 24 joints x 3 axis-angle coords
PHI_DIM = 3
X_DIM = 3


@dataclass
class PhaseVector:
    tau: np.ndarray  # (T,), tau[0] == 0, tau[-1] == 1, strictly increasing


def make_phase(T: int) -> PhaseVector:
    """Uniform phase: tau[t] = t / (T - 1)."""
    if T < 2:
        raise ValueError("phase vector needs T >= 2")
    return PhaseVector(np.arange(T, dtype=np.float64) / (T - 1))


def encode_phase(tau: np.ndarray, freq_pairs: int = DEFAULT_FREQ_PAIRS) -> np.ndarray:
    """(T,) -> (T, 1 + 2K): raw phase plus sin/cos at octave frequencies."""
    tau = np.asarray(tau, dtype=np.float64)
    cols = [tau]
    for k in range(freq_pairs):
        w = (2.0 ** k) * np.pi
        cols.append(np.sin(w * tau))
        cols.append(np.cos(w * tau))
    return np.stack(cols, axis=-1)


class Mlp:
    """Fully connected tanh network; weights are autodiff leaf tensors."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.sizes = tuple(sizes)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (n_in + n_out))
            self.weights.append(Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(n_out), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, W), b)
            if i < len(self.weights) - 1:
                x = ad.tanh(x)
        return x

    def parameters(self):
        return self.weights + self.biases

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def mlp_param_count(sizes) -> int:
    """Closed-form parameter count for a dense MLP with biases."""
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


@dataclass
class MotionField:
    net_theta: Mlp
    net_phi: Mlp
    net_x: Mlp
    pos_enc_freqs: int = DEFAULT_FREQ_PAIRS

    def forward(self, enc: Tensor):
        """Encoded phase (T, 1+2K) -> theta (T,24,3), phi (T,3), x (T,3) tensors."""
        T = enc.shape[0]
        theta = ad.reshape(self.net_theta.forward(enc), (T, 24, 3))
        phi = self.net_phi.forward(enc)
        x = self.net_x.forward(enc)
        return theta, phi, x

    def parameters(self):
        return self.net_theta.parameters() + self.net_phi.parameters() + self.net_x.parameters()


class FreeMotionParams:
    """Per-frame free tensors: the drop-in used by the learnable-params
    ablation (and by tests that need an exactly pinned human)."""

    def __init__(self, theta_seq, phi_seq, x_seq):
        self.theta = Tensor(np.array(theta_seq, dtype=np.float64), requires_grad=True)
        self.phi = Tensor(np.array(phi_seq, dtype=np.float64), requires_grad=True)
        self.x = Tensor(np.array(x_seq, dtype=np.float64), requires_grad=True)

    def forward(self, enc: Tensor):
        return self.theta, self.phi, self.x

    def parameters(self):
        return [self.theta, self.phi, self.x]


def init_mlps(seed: int, hidden=DEFAULT_HIDDEN, freq_pairs: int = DEFAULT_FREQ_PAIRS) -> MotionField:
    """Deterministic field initialization for a given seed."""
    rng = np.random.default_rng(seed)
    n_in = 1 + 2 * freq_pairs
    return MotionField(
        net_theta=Mlp((n_in, *hidden, THETA_DIM), rng),
        net_phi=Mlp((n_in, *hidden, PHI_DIM), rng),
        net_x=Mlp((n_in, *hidden, X_DIM), rng),
        pos_enc_freqs=freq_pairs,
    )


@dataclass
class MotionSequence:
    theta_seq: np.ndarray  # (T, 24, 3) radians
    phi_seq: np.ndarray    # (T, 3)
    x_seq: np.ndarray      # (T, 3) meters
    fps: float

    @property
    def T(self) -> int:
        return self.theta_seq.shape[0]

    def validate(self):
        T = self.T
        if self.phi_seq.shape != (T, 3) or self.x_seq.shape != (T, 3):
            raise ValueError("inconsistent frame counts across sequence fields")
        for arr in (self.theta_seq, self.phi_seq, self.x_seq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite values in motion sequence")

    def copy(self) -> "MotionSequence":
        return MotionSequence(
            self.theta_seq.copy(), self.phi_seq.copy(), self.x_seq.copy(), self.fps
        )


def eval_field(field, tau: PhaseVector, fps: float = 30.0) -> MotionSequence:
    """Evaluate the field at every phase; returns a detached numpy snapshot.

    The differentiable path is ``field.forward`` on an encoded phase tensor.
    """
    enc = encode_phase(tau.tau, getattr(field, "pos_enc_freqs", DEFAULT_FREQ_PAIRS))
    with ad.no_grad():
        theta, phi, x = field.forward(Tensor(enc))
    return MotionSequence(theta.data.copy(), phi.data.copy(), x.data.copy(), fps)


# ---------------------------------------------------------------------------
# serialization: CSV + JSON metadata sidecar
# ---------------------------------------------------------------------------

def _motion_header():
    cols = ["frame"]
    for j in range(24):
        for ax in "xyz":
            cols.append(f"theta_{j}_{ax}")
    cols += ["phi_x", "phi_y", "phi_z", "x_x", "x_y", "x_z"]
    return cols


def save_motion_csv(seq: MotionSequence, csv_path, meta_path=None):
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_motion_header())
        for t in range(seq.T):
            row = [t]
            row += [repr(float(v)) for v in seq.theta_seq[t].reshape(-1)]
            row += [repr(float(v)) for v in seq.phi_seq[t]]
            row += [repr(float(v)) for v in seq.x_seq[t]]
            w.writerow(row)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".json")
    Path(meta_path).write_text(
        json.dumps({"version": MOTION_FORMAT_VERSION, "fps": seq.fps, "T": seq.T})
    )


def load_motion_csv(csv_path, meta_path=None) -> MotionSequence:
    csv_path = Path(csv_path)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".json")
    meta = json.loads(Path(meta_path).read_text())
    if meta.get("version") != MOTION_FORMAT_VERSION:
        raise ValueError(f"unsupported motion format version: {meta.get('version')}")
    rows = []
    with csv_path.open() as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != _motion_header():
            raise ValueError("unexpected motion CSV header")
        for row in reader:
            rows.append([float(v) for v in row[1:]])
    arr = np.array(rows)
    T = arr.shape[0]
    if T != meta["T"]:
        raise ValueError("motion CSV frame count disagrees with sidecar")
    return MotionSequence(
        theta_seq=arr[:, :72].reshape(T, 24, 3),
        phi_seq=arr[:, 72:75],
        x_seq=arr[:, 75:78],
        fps=float(meta["fps"]),
    )
