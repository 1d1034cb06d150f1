import numpy as np
import pytest

from diffopt import autodiff as ad
from diffopt.autodiff import Tensor
from diffopt.motionfield import (
    MotionSequence,
    encode_phase,
    eval_field,
    init_mlps,
    load_motion_csv,
    make_phase,
    mlp_param_count,
    save_motion_csv,
)

from conftest import fd_gradient


def test_make_phase_endpoints_and_spacing():
    assert np.array_equal(make_phase(2).tau, [0.0, 1.0])
    assert np.allclose(make_phase(5).tau, [0.0, 0.25, 0.5, 0.75, 1.0])
    for T in (2, 3, 17, 100):
        tau = make_phase(T).tau
        assert tau[0] == 0.0 and tau[-1] == 1.0
        assert np.all(np.diff(tau) > 0)


def test_make_phase_rejects_short():
    with pytest.raises(ValueError):
        make_phase(1)


def test_eval_field_output_shapes():
    field = init_mlps(seed=0, hidden=(32, 32))
    for T in (2, 7, 40):
        seq = eval_field(field, make_phase(T), fps=30.0)
        assert seq.theta_seq.shape == (T, 24, 3)
        assert seq.phi_seq.shape == (T, 3)
        assert seq.x_seq.shape == (T, 3)


def test_zero_final_layers_give_zero_motion():
    field = init_mlps(seed=3, hidden=(16, 16))
    for net in (field.net_theta, field.net_phi, field.net_x):
        net.weights[-1].data[:] = 0.0
        net.biases[-1].data[:] = 0.0
    seq = eval_field(field, make_phase(9))
    assert np.all(seq.theta_seq == 0) and np.all(seq.phi_seq == 0) and np.all(seq.x_seq == 0)


def test_init_determinism_and_seed_sensitivity():
    a, b, c = init_mlps(0), init_mlps(0), init_mlps(1)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()))


def test_parameter_count_matches_closed_form():
    field = init_mlps(seed=0)
    n_in = 1 + 2 * field.pos_enc_freqs
    expected = (
        mlp_param_count((n_in, 256, 256, 256, 72))
        + 2 * mlp_param_count((n_in, 256, 256, 256, 3))
    )
    assert sum(p.size for p in field.parameters()) == expected


def test_hidden_weight_perturbation_has_global_support():
    field = init_mlps(seed=0, hidden=(16, 16))
    tau = make_phase(12)
    before = eval_field(field, tau).theta_seq.copy()
    field.net_theta.weights[1].data[0, 0] += 0.05  # hidden layer: all phases
    after = eval_field(field, tau).theta_seq
    per_frame_change = np.abs(after - before).reshape(12, -1).max(axis=1)
    assert np.all(per_frame_change > 0)


def test_eval_field_pure_function_of_weights_and_phase():
    field = init_mlps(seed=0, hidden=(16, 16))
    tau = make_phase(8)
    a = eval_field(field, tau)
    b = eval_field(field, tau)
    assert np.array_equal(a.theta_seq, b.theta_seq)
    assert np.array_equal(a.x_seq, b.x_seq)


def test_field_gradient_matches_fd(rng):
    field = init_mlps(seed=1, hidden=(8, 8), freq_pairs=3)
    enc = encode_phase(make_phase(5).tau, 3)
    w_t = rng.standard_normal((5, 24, 3))
    w_p = rng.standard_normal((5, 3))
    w_x = rng.standard_normal((5, 3))

    def loss_value():
        with ad.no_grad():
            th, ph, x = field.forward(Tensor(enc))
        return float(np.sum(th.data * w_t) + np.sum(ph.data * w_p) + np.sum(x.data * w_x))

    ad.active_tape().clear()
    th, ph, x = field.forward(Tensor(enc))
    loss = ad.add(ad.add(ad.tsum(ad.mul(th, w_t)), ad.tsum(ad.mul(ph, w_p))), ad.tsum(ad.mul(x, w_x)))
    ad.backward(loss)
    for p in field.parameters():
        fd = fd_gradient(loss_value, p.data, h=1e-6)
        scale = np.abs(fd) + 1e-3 * (np.abs(fd).max() + 1e-9)
        assert (np.abs(p.grad - fd) / scale).max() < 1e-4
        p.zero_grad()
    ad.active_tape().clear()


def test_motion_csv_round_trip(tmp_path, rng):
    seq = MotionSequence(
        rng.standard_normal((7, 24, 3)),
        rng.standard_normal((7, 3)),
        rng.standard_normal((7, 3)),
        fps=30.0,
    )
    save_motion_csv(seq, tmp_path / "m.csv")
    loaded = load_motion_csv(tmp_path / "m.csv")
    assert np.array_equal(loaded.theta_seq, seq.theta_seq)
    assert np.array_equal(loaded.phi_seq, seq.phi_seq)
    assert np.array_equal(loaded.x_seq, seq.x_seq)
    assert loaded.fps == 30.0
