"""Motion diffusion prior: variance-preserving noise schedule, a residual-MLP
denoiser trained on a gait corpus, the differentiable motion-feature
transform, score-distillation guidance, and ancestral sampling.

The denoiser is trained to predict clean features (x0 parameterization) in
z-normalized feature space; guidance converts its prediction to a noise
residual internally.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kinematics import FOOT_JOINTS, Skeleton, fk_tensors
from .motionfield import MotionSequence

CHECKPOINT_MAGIC = b"DOPT"
CHECKPOINT_VERSION = 1

WINDOW_LEN = 60
FEAT_DIM = 48
F_JOINTS = slice(0, 42)
F_ROOT_VEL = slice(42, 45)
F_YAW_VEL = slice(45, 46)
F_CONTACTS = slice(46, 48)

CONTACT_HEIGHT = 0.05   # m
CONTACT_SPEED = 0.10    # m/s
CONTACT_H_TEMP = 0.01
CONTACT_V_TEMP = 0.05

DEFAULT_STEPS = 100
DEFAULT_EPOCHS = 200
DEFAULT_WIDTH = 512
DEFAULT_BLOCKS = 4
TEMB_FREQS = 16


@dataclass
class NoiseSchedule:
    steps: int
    alpha: np.ndarray  # (N,), strictly decreasing in (0, 1)
    sigma: np.ndarray  # (N,), alpha^2 + sigma^2 == 1

    def validate(self):
        if np.any(self.alpha <= 0) or np.any(self.alpha >= 1):
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha) >= 0):
            raise ValueError("alpha must be strictly decreasing")
        if not np.allclose(self.alpha**2 + self.sigma**2, 1.0, atol=1e-12):
            raise ValueError("alpha^2 + sigma^2 must equal 1")


def make_schedule(steps: int = DEFAULT_STEPS) -> NoiseSchedule:
    """Cosine alpha-bar schedule under the variance-preserving constraint."""
    s = 0.008
    t = np.arange(steps, dtype=np.float64) / steps
    alpha = np.cos((t + s) / (1.0 + s) * np.pi / 2.0)
    sigma = np.sqrt(1.0 - alpha * alpha)
    sched = NoiseSchedule(steps, alpha, sigma)
    sched.validate()
    return sched


@dataclass
class MotionFeatures:
    """Per-frame features over a fixed window: root-relative major joints
    (14x3), canonical root velocity (3), yaw rate (1), soft contacts (2)."""

    values: np.ndarray  # (L, 48)

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite feature values")
        c = self.values[:, F_CONTACTS]
        if np.any(c < -1e-9) or np.any(c > 1 + 1e-9):
            raise ValueError("contact labels must lie in [0, 1]")


def add_noise(x0: MotionFeatures | np.ndarray, t: int, eps, sched: NoiseSchedule):
    """Forward noising: alpha[t] * x0 + sigma[t] * eps."""
    if not 0 <= t < sched.steps:
        raise ValueError(f"timestep {t} outside [0, {sched.steps})")
    x = x0.values if isinstance(x0, MotionFeatures) else np.asarray(x0, dtype=np.float64)
    return sched.alpha[t] * x + sched.sigma[t] * np.asarray(eps, dtype=np.float64)


@dataclass
class SdsConfig:
    t_min: float = 0.02
    t_max: float = 0.98
    weight_mode: str = "sigma_sq"  # or "uniform"
    guidance_scale: float = 1.0
    n_draws: int = 8  # (t, eps) draws averaged per guidance evaluation

    def validate(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError("need 0 <= t_min < t_max <= 1")
        if self.weight_mode not in ("sigma_sq", "uniform"):
            raise ValueError(f"unknown weight mode: {self.weight_mode}")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")


# ---------------------------------------------------------------------------
# motion features (differentiable transform)
# ---------------------------------------------------------------------------

_EZ = np.array([0.0, 0.0, 1.0]).reshape(3, 1)


def _canonical_frame(phi0: Tensor) -> Tensor:
    """Yaw-only world->canonical rotation from the window-start orientation."""
    R0 = ad.rodrigues(ad.reshape(phi0, (1, 3)))
    f0 = ad.reshape(ad.matmul(R0, _EZ), (3,))
    fx, fz = f0[0:1], f0[2:3]
    n = ad.sqrt(ad.add(ad.add(ad.mul(fx, fx), ad.mul(fz, fz)), 1e-12))
    c, s = ad.div(fz, n), ad.div(fx, n)
    zero, one = Tensor(np.zeros(1)), Tensor(np.ones(1))
    return ad.stack(
        (
            ad.concat((c, zero, ad.mul(s, -1.0)), axis=0),
            ad.concat((zero, one, zero), axis=0),
            ad.concat((s, zero, c), axis=0),
        ),
        axis=0,
    )


def _pad_last(x: Tensor) -> Tensor:
    return ad.concat((x, x[-1:]), axis=0)


def feature_tensors(skel: Skeleton, theta: Tensor, phi: Tensor, x_root: Tensor,
                    fps: float, start: int, window_len: int = WINDOW_LEN) -> Tensor:
    """(L, 48) feature tensor for frames [start, start+L), on the tape."""
    T = theta.shape[0]
    if start < 0 or start + window_len > T:
        raise ValueError("window overrun")
    th = theta[start:start + window_len]
    ph = phi[start:start + window_len]
    xr = x_root[start:start + window_len]
    L = window_len

    joints, _, majors = fk_tensors(skel, th, ph, xr)

    Rinv = _canonical_frame(ph[0])
    RinvT = ad.transpose(Rinv, (1, 0))

    rel = ad.sub(majors, ad.reshape(xr, (L, 1, 3)))
    rel_c = ad.reshape(ad.matmul(rel, RinvT), (L, 42))

    vel = ad.mul(ad.sub(xr[1:], xr[:-1]), fps)
    vel_c = ad.matmul(_pad_last(vel), RinvT)

    fwd = ad.reshape(ad.matmul(ad.rodrigues(ph), _EZ), (L, 3))
    fx_t, fz_t = fwd[:, 0], fwd[:, 2]
    cross_y = ad.sub(ad.mul(fz_t[:-1], fx_t[1:]), ad.mul(fx_t[:-1], fz_t[1:]))
    dot_f = ad.add(ad.mul(fx_t[:-1], fx_t[1:]), ad.mul(fz_t[:-1], fz_t[1:]))
    yaw_rate = ad.reshape(_pad_last(ad.mul(ad.atan2(cross_y, dot_f), fps)), (L, 1))

    contacts = []
    for jidx in FOOT_JOINTS:
        toe = joints[:, jidx, :]
        height = toe[:, 1]
        horiz = ad.stack((toe[:, 0], toe[:, 2]), axis=-1)
        spd = _pad_last(ad.mul(ad.norm(ad.sub(horiz[1:], horiz[:-1]), axis=-1), fps))
        c_h = ad.sigmoid(ad.div(ad.sub(CONTACT_HEIGHT, height), CONTACT_H_TEMP))
        c_v = ad.sigmoid(ad.div(ad.sub(CONTACT_SPEED, spd), CONTACT_V_TEMP))
        contacts.append(ad.reshape(ad.mul(c_h, c_v), (L, 1)))

    return ad.concat((rel_c, vel_c, yaw_rate, contacts[0], contacts[1]), axis=1)


def motion_to_features(seq: MotionSequence, skel: Skeleton, window_start: int,
                       window_len: int = WINDOW_LEN) -> MotionFeatures:
    """Feature transform on a sequence window; numpy snapshot of the
    differentiable path used inside the optimizer."""
    with ad.no_grad():
        vals = feature_tensors(
            skel,
            Tensor(seq.theta_seq), Tensor(seq.phi_seq), Tensor(seq.x_seq),
            seq.fps, window_start, window_len,
        )
    feats = MotionFeatures(vals.data.copy())
    feats.validate()
    return feats


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def timestep_embedding(t_norm: np.ndarray, freqs: int = TEMB_FREQS) -> np.ndarray:
    """(B,) normalized timesteps -> (B, 2*freqs) sinusoidal embedding."""
    t_norm = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    k = np.arange(freqs)
    ang = t_norm[:, None] * (2.0 ** k)[None, :] * np.pi
    return np.concatenate((np.sin(ang), np.cos(ang)), axis=1)


class Denoiser:
    """Residual MLP over the flattened window, conditioned on the timestep.

    Operates in z-normalized feature space; norm_mean/norm_std map between
    raw and normalized features. The final layer is zero-initialized, so an
    untrained denoiser predicts the corpus mean.
    """

    def __init__(self, window_len=WINDOW_LEN, feat_dim=FEAT_DIM, width=DEFAULT_WIDTH,
                 blocks=DEFAULT_BLOCKS, seed=0):
        self.window_len = window_len
        self.feat_dim = feat_dim
        self.width = width
        self.blocks = blocks
        self.norm_mean = np.zeros(feat_dim)
        self.norm_std = np.ones(feat_dim)
        self.trained = False
        rng = np.random.default_rng(seed)
        d_in = window_len * feat_dim + 2 * TEMB_FREQS
        d_out = window_len * feat_dim

        def dense(n_in, n_out, zero=False):
            if zero:
                W = np.zeros((n_in, n_out))
            else:
                W = rng.uniform(-1, 1, (n_in, n_out)) * np.sqrt(6.0 / (n_in + n_out))
            return Tensor(W, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True)

        self.w_in, self.b_in = dense(d_in, width)
        self.block_params = [
            (dense(width, width) + dense(width, width)) for _ in range(blocks)
        ]
        self.w_out, self.b_out = dense(width, d_out, zero=True)

    def parameters(self):
        ps = [self.w_in, self.b_in]
        for w1, b1, w2, b2 in self.block_params:
            ps += [w1, b1, w2, b2]
        ps += [self.w_out, self.b_out]
        return ps

    def forward(self, z_flat: Tensor, t_norm: np.ndarray) -> Tensor:
        """(B, L*F) noised z-features + (B,) timesteps -> (B, L*F) clean z."""
        temb = timestep_embedding(t_norm)
        h = ad.concat((z_flat, Tensor(temb)), axis=1)
        h = ad.tanh(ad.add(ad.matmul(h, self.w_in), self.b_in))
        for w1, b1, w2, b2 in self.block_params:
            u = ad.tanh(ad.add(ad.matmul(h, w1), b1))
            u = ad.add(ad.matmul(u, w2), b2)
            h = ad.tanh(ad.add(h, u))
        return ad.add(ad.matmul(h, self.w_out), self.b_out)

    def predict_x0(self, z_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
        """Numpy convenience: one window (L, F) in z-space -> predicted clean z."""
        with ad.no_grad():
            out = self.forward(
                Tensor(z_t.reshape(1, -1)), np.array([t / sched.steps])
            )
        return out.data.reshape(self.window_len, self.feat_dim)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.norm_mean) / self.norm_std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.norm_std + self.norm_mean


def _corpus_array(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        arr = corpus
    else:
        arr = np.stack([c.values if isinstance(c, MotionFeatures) else np.asarray(c) for c in corpus])
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("corpus must be a non-empty stack of feature windows")
    return np.asarray(arr, dtype=np.float64)


def corpus_hash(corpus) -> str:
    arr = _corpus_array(corpus)
    return hashlib.sha256(arr.astype("<f8").tobytes()).hexdigest()


def train_denoiser(corpus, sched: NoiseSchedule, epochs: int, seed: int,
                   batch_size: int = 32, lr: float = 1e-3,
                   width: int = DEFAULT_WIDTH, blocks: int = DEFAULT_BLOCKS):
    """Fit the x0-prediction objective with Adam. Returns (Denoiser, loss curve).

    Deterministic for a given seed; aborts with diagnostics on a non-finite
    loss. epochs == 0 returns an untrained (mean-predicting) model.
    """
    data = _corpus_array(corpus)
    n, L, F = data.shape
    den = Denoiser(window_len=L, feat_dim=F, width=width, blocks=blocks, seed=seed)
    den.norm_mean = data.reshape(-1, F).mean(axis=0)
    std = data.reshape(-1, F).std(axis=0)
    den.norm_std = np.where(std < 1e-8, 1.0, std)

    z_data = ((data - den.norm_mean) / den.norm_std).reshape(n, L * F)
    rng = np.random.default_rng(seed)
    params = den.parameters()
    state = ad.adam_init(params)

    # curve[0] is the pre-training loss of the untrained model; one epoch
    # entry follows per training epoch
    eval_t = rng.integers(0, sched.steps, size=n)
    eval_eps = rng.standard_normal(z_data.shape)
    def _eval_loss():
        z_t = sched.alpha[eval_t][:, None] * z_data + sched.sigma[eval_t][:, None] * eval_eps
        total = 0.0
        with ad.no_grad():
            for i0 in range(0, n, batch_size):
                sl = slice(i0, min(i0 + batch_size, n))
                pred = den.forward(Tensor(z_t[sl]), eval_t[sl] / sched.steps)
                total += float(np.sum((pred.data - z_data[sl]) ** 2))
        return total / z_data.size

    curve = [_eval_loss()]
    for _epoch in range(epochs):
        # cosine decay to lr/10 sharpens the fit without extra epochs
        lr_e = lr * (0.55 + 0.45 * np.cos(np.pi * _epoch / max(epochs, 1)))
        order = rng.permutation(n)
        epoch_losses = []
        for i0 in range(0, n, batch_size):
            idx = order[i0:i0 + batch_size]
            z0 = z_data[idx]
            t = rng.integers(0, sched.steps, size=len(idx))
            eps = rng.standard_normal(z0.shape)
            a = sched.alpha[t][:, None]
            s = sched.sigma[t][:, None]
            z_t = a * z0 + s * eps

            tape = ad.active_tape()
            tape.clear()
            pred = den.forward(Tensor(z_t), t / sched.steps)
            diff = ad.sub(pred, Tensor(z0))
            loss = ad.tmean(ad.mul(diff, diff))
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"denoiser training diverged at epoch {_epoch} (loss={loss.data})"
                )
            ad.backward(loss)
            grads = [p.grad for p in params]
            ad.sgd_adam_step(params, grads, state, lr_e)
            for p in params:
                p.zero_grad()
            tape.clear()
            epoch_losses.append(float(loss.data))
        curve.append(float(np.mean(epoch_losses)))
    den.trained = epochs > 0
    return den, curve


# ---------------------------------------------------------------------------
# score-distillation guidance
# ---------------------------------------------------------------------------

def _weight(sched: NoiseSchedule, t: int, mode: str) -> float:
    if mode == "uniform":
        return 1.0
    return float(sched.sigma[t] ** 2)


def sds_gradient(den: Denoiser, sched: NoiseSchedule, cfg: SdsConfig,
                 x: MotionFeatures | np.ndarray, rng: np.random.Generator):
    """Guidance estimate: returns (gradient w.r.t. raw features, loss proxy).

    Each draw samples (t, eps), noisifies, converts the denoiser's clean
    prediction to a noise estimate, and contributes
    w(t) * (eps_hat - eps) * alpha[t]; draws are averaged (a batched
    estimator of the same expectation) and chained through the
    z-normalization. The denoiser Jacobian is omitted.
    """
    cfg.validate()
    raw = x.values if isinstance(x, MotionFeatures) else np.asarray(x, dtype=np.float64)
    z = den.normalize(raw)
    lo = int(round(cfg.t_min * sched.steps))
    hi = max(lo + 1, int(round(cfg.t_max * sched.steps)))
    grad_z = np.zeros_like(z)
    proxy = 0.0
    for _draw in range(cfg.n_draws):
        for _ in range(64):
            t = int(rng.integers(lo, hi))
            if sched.sigma[t] >= 1e-8:
                break
        else:
            raise RuntimeError("could not sample a timestep with usable noise level")
        eps = rng.standard_normal(z.shape)
        a, s = sched.alpha[t], sched.sigma[t]
        z_t = a * z + s * eps
        z0_hat = den.predict_x0(z_t, t, sched)
        eps_hat = (z_t - a * z0_hat) / s
        w = _weight(sched, t, cfg.weight_mode)
        resid = eps_hat - eps
        grad_z += w * a * resid
        proxy += w * float(np.mean(resid * resid))
    grad_raw = cfg.guidance_scale * grad_z / (cfg.n_draws * den.norm_std)
    return grad_raw, proxy / cfg.n_draws


def sample_motion(den: Denoiser, sched: NoiseSchedule, seed: int) -> MotionFeatures:
    """Ancestral x0-parameterized sampling; prior sanity inspection only."""
    rng = np.random.default_rng(seed)
    L, F = den.window_len, den.feat_dim
    abar = sched.alpha ** 2
    z = rng.standard_normal((L, F))
    for t in range(sched.steps - 1, -1, -1):
        z0 = den.predict_x0(z, t, sched)
        if t == 0:
            z = z0
            break
        abar_t, abar_prev = abar[t], abar[t - 1]
        beta_t = 1.0 - abar_t / abar_prev
        mean = (
            np.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * z0
            + np.sqrt(abar_t / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_t) * z
        )
        var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
        z = mean + np.sqrt(max(var, 0.0)) * rng.standard_normal(z.shape)
    vals = den.denormalize(z)
    vals[:, F_CONTACTS] = np.clip(vals[:, F_CONTACTS], 0.0, 1.0)
    return MotionFeatures(vals)


def gait_contact_statistic(feats: MotionFeatures) -> bool:
    """True when both feet show alternating stance: duty cycle in [0.3, 0.9]
    and at least two contact transitions over the window."""
    c = feats.values[:, F_CONTACTS] > 0.5
    for foot in range(2):
        duty = float(np.mean(c[:, foot]))
        switches = int(np.sum(c[1:, foot] != c[:-1, foot]))
        if not (0.3 <= duty <= 0.9 and switches >= 2):
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    return data.reshape(shape).copy()


def save_checkpoint(den: Denoiser, sched: NoiseSchedule, path, manifest: dict | None = None):
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<IIIII", sched.steps, den.window_len, den.feat_dim,
                             den.width, den.blocks))
        fh.write(struct.pack("<I", 1 if den.trained else 0))
        _write_array(fh, sched.alpha)
        _write_array(fh, sched.sigma)
        _write_array(fh, den.norm_mean)
        _write_array(fh, den.norm_std)
        params = den.parameters()
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_array(fh, p.data)
    if manifest is not None:
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest))


def load_checkpoint(path):
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a denoiser checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version}")
        steps, L, F, width, blocks = struct.unpack("<IIIII", fh.read(20))
        (trained,) = struct.unpack("<I", fh.read(4))
        alpha = _read_array(fh)
        sigma = _read_array(fh)
        norm_mean = _read_array(fh)
        norm_std = _read_array(fh)
        (n_params,) = struct.unpack("<I", fh.read(4))
        arrays = [_read_array(fh) for _ in range(n_params)]
    sched = NoiseSchedule(steps, alpha, sigma)
    sched.validate()
    den = Denoiser(window_len=L, feat_dim=F, width=width, blocks=blocks, seed=0)
    den.norm_mean = norm_mean
    den.norm_std = norm_std
    den.trained = bool(trained)
    params = den.parameters()
    if len(params) != len(arrays):
        raise ValueError("checkpoint parameter count mismatch")
    for p, a in zip(params, arrays):
        if p.data.shape != a.shape:
            raise ValueError("checkpoint parameter shape mismatch")
        p.data = a
    return den, sched
