import numpy as np
import pytest

from qntrack.plants import LtiPlant, PlantConfig
from qntrack.policies import (
    JacobianBundle,
    ParameterVector,
    PolicySpec,
    TwoDofController,
    build_window,
    concat_parameters,
    eval_window,
    init_parameters,
    load_checkpoint,
    policy_forward,
    policy_jacobians,
    save_checkpoint,
    split_parameters,
    two_dof_compose,
)
from qntrack.trajectories import Trajectory


def random_params(spec, seed, scale=0.7):
    rng = np.random.default_rng(seed)
    pv = ParameterVector(rng.normal(0, scale, spec.n_parameters()), spec.layout())
    return pv


def fd_jacobian_omega(spec, omega, signal, eps=1e-6):
    n = omega.size
    base = policy_forward(spec, omega, signal).stacked()
    J = np.zeros((base.size, n))
    for i in range(n):
        up = omega.copy()
        up.data[i] += eps
        dn = omega.copy()
        dn.data[i] -= eps
        J[:, i] = (
            policy_forward(spec, up, signal).stacked() - policy_forward(spec, dn, signal).stacked()
        ) / (2 * eps)
    return J


def fd_jacobian_signal(spec, omega, signal, eps=1e-6):
    flat = signal.stacked()
    base = policy_forward(spec, omega, signal).stacked()
    J = np.zeros((base.size, flat.size))
    for i in range(flat.size):
        up = flat.copy()
        up[i] += eps
        dn = flat.copy()
        dn[i] -= eps
        tu = Trajectory.from_stacked(up, signal.dt, signal.channels)
        td = Trajectory.from_stacked(dn, signal.dt, signal.channels)
        J[:, i] = (
            policy_forward(spec, omega, tu).stacked() - policy_forward(spec, omega, td).stacked()
        ) / (2 * eps)
    return J


def away_from_kinks(spec, omega, signal, margin=1e-3):
    if spec.kind == "linear":
        return True
    if spec.kind == "latent":
        x = spec.input_map @ signal.stacked()
        z = omega.block("w1") @ x + omega.block("b1")
        return np.min(np.abs(z)) > margin
    from qntrack.policies import _window_matrix

    X = _window_matrix(signal.as_2d(), spec)
    Z = X @ omega.block("w1").T + omega.block("b1")
    return np.min(np.abs(Z)) > margin


class TestBuildWindow:
    def test_left_padding(self):
        s = Trajectory(np.array([1.0, 2.0, 3.0]), 0.1)
        assert np.allclose(build_window(s, 0, 2, 0), [0, 0, 1])

    def test_right_padding(self):
        s = Trajectory(np.array([1.0, 2.0, 3.0]), 0.1)
        assert np.allclose(build_window(s, 2, 0, 2), [3, 0, 0])

    def test_interior_exact_slice(self):
        s = Trajectory(np.arange(1.0, 8.0), 0.1)
        assert np.allclose(build_window(s, 3, 1, 2), [3, 4, 5, 6])

    def test_multichannel_interleaving(self):
        s = Trajectory(np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]), 0.1)
        assert np.allclose(build_window(s, 1, 1, 0), [1, 10, 2, 20])

    def test_out_of_range_k(self):
        s = Trajectory(np.arange(3.0), 0.1)
        with pytest.raises(ValueError):
            build_window(s, 3, 1, 1)


class TestForward:
    def test_linear_zero_weights(self):
        spec = PolicySpec("linear", h1=2, h2=1)
        omega = init_parameters(spec)
        sig = Trajectory(np.arange(6.0), 0.1)
        assert np.allclose(policy_forward(spec, omega, sig).values, 0.0)

    def test_single_tap_gain(self):
        spec = PolicySpec("linear", h1=0, h2=0)
        omega = ParameterVector(np.array([2.0]), spec.layout())
        sig = Trajectory(np.array([1.0, -2.0, 0.5]), 0.1)
        assert np.allclose(policy_forward(spec, omega, sig).values, [2.0, -4.0, 1.0])

    def test_mlp_matches_per_sample_oracle(self):
        spec = PolicySpec("mlp", h1=2, h2=1, hidden=5)
        omega = random_params(spec, 0)
        sig = Trajectory(np.random.default_rng(1).normal(size=9), 0.1)
        got = policy_forward(spec, omega, sig).values
        w1, b1 = omega.block("w1"), omega.block("b1")
        w2, b2 = omega.block("w2"), omega.block("b2")
        for k in range(9):
            win = build_window(sig, k, 2, 1)
            z = w1 @ win + b1
            expect = w2 @ np.where(z > 0, z, 0.0) + b2
            assert abs(got[k] - expect[0]) < 1e-12

    def test_initial_policy_outputs_zero(self):
        spec = PolicySpec("mlp", h1=3, h2=3, hidden=8)
        omega = init_parameters(spec, 3)
        sig = Trajectory(np.random.default_rng(4).normal(size=12), 0.1)
        assert np.allclose(policy_forward(spec, omega, sig).values, 0.0)

    def test_layout_mismatch_rejected(self):
        spec = PolicySpec("linear", h1=1, h2=1)
        other = PolicySpec("linear", h1=2, h2=2)
        with pytest.raises(ValueError):
            policy_forward(spec, init_parameters(other), Trajectory(np.zeros(5), 0.1))

    def test_shift_equivariance_interior(self):
        spec = PolicySpec("mlp", h1=2, h2=2, hidden=4)
        omega = random_params(spec, 5)
        rng = np.random.default_rng(6)
        base = rng.normal(size=20)
        shifted = np.roll(base, 3)
        out_base = policy_forward(spec, omega, Trajectory(base, 0.1)).values
        out_shift = policy_forward(spec, omega, Trajectory(shifted, 0.1)).values
        # interior samples where both windows avoid the padded edges
        for k in range(5, 15):
            assert abs(out_shift[k + 3] - out_base[k]) < 1e-12


class TestJacobians:
    @pytest.mark.parametrize("kind,hidden", [("linear", 0), ("mlp", 6)])
    def test_matches_finite_differences(self, kind, hidden):
        spec = PolicySpec(kind, h1=2, h2=1, hidden=hidden)
        seed = 0
        while True:
            omega = random_params(spec, seed)
            sig = Trajectory(np.random.default_rng(seed + 100).normal(size=8), 0.1)
            if away_from_kinks(spec, omega, sig):
                break
            seed += 1
        bundle = policy_jacobians(spec, omega, sig)
        J_fd = fd_jacobian_omega(spec, omega, sig)
        S_fd = fd_jacobian_signal(spec, omega, sig)
        tol = 1e-10 if kind == "linear" else 1e-5
        scale = max(1.0, np.max(np.abs(J_fd)))
        assert np.max(np.abs(bundle.d_pi_d_omega - J_fd)) / scale < tol
        sscale = max(1.0, np.max(np.abs(S_fd)))
        assert np.max(np.abs(bundle.d_pi_d_signal - S_fd)) / sscale < tol

    def test_zero_output_layer_kills_w1_gradient(self):
        spec = PolicySpec("mlp", h1=1, h2=1, hidden=4)
        omega = init_parameters(spec, 0)  # w2 = 0
        sig = Trajectory(np.random.default_rng(2).normal(size=6), 0.1)
        bundle = policy_jacobians(spec, omega, sig)
        n_w1 = 4 * spec.window_size + 4
        assert np.allclose(bundle.d_pi_d_omega[:, :n_w1], 0.0)
        assert np.allclose(bundle.d_pi_d_signal, 0.0)

    def test_jacobian_vector_consistency(self):
        spec = PolicySpec("mlp", h1=1, h2=2, hidden=5)
        omega = random_params(spec, 7)
        sig = Trajectory(np.random.default_rng(8).normal(size=10), 0.1)
        if not away_from_kinks(spec, omega, sig):
            omega.data *= 1.1
        bundle = policy_jacobians(spec, omega, sig)
        rng = np.random.default_rng(9)
        for _ in range(5):
            v = rng.normal(size=omega.size)
            eps = 1e-6
            up, dn = omega.copy(), omega.copy()
            up.data += eps * v
            dn.data -= eps * v
            fd = (
                policy_forward(spec, up, sig).stacked() - policy_forward(spec, dn, sig).stacked()
            ) / (2 * eps)
            jv = bundle.d_pi_d_omega @ v
            assert np.max(np.abs(fd - jv)) / max(1.0, np.max(np.abs(jv))) < 1e-5

    def test_strict_past_causality(self):
        spec = PolicySpec("linear", h1=3, strict_past=True)
        omega = random_params(spec, 10)
        rng = np.random.default_rng(11)
        sig = rng.normal(size=12)
        out = policy_forward(spec, omega, Trajectory(sig, 0.1)).values
        for k in range(12):
            poked = sig.copy()
            poked[k:] += rng.normal(size=12 - k)  # perturb sample k and later
            out2 = policy_forward(spec, omega, Trajectory(poked, 0.1)).values
            assert np.allclose(out2[: k + 1], out[: k + 1])

    def test_strict_past_signal_jacobian_strictly_lower(self):
        spec = PolicySpec("linear", h1=4, strict_past=True)
        omega = random_params(spec, 12)
        sig = Trajectory(np.random.default_rng(13).normal(size=9), 0.1)
        S = policy_jacobians(spec, omega, sig).d_pi_d_signal
        assert np.allclose(S, np.tril(S, k=-1))

    def test_latent_policy_forward_and_jacobians(self):
        rng = np.random.default_rng(14)
        q, n_feat, n_code = 7, 3, 4
        spec = PolicySpec(
            "latent",
            hidden=5,
            input_map=rng.normal(size=(n_feat, q)),
            output_map=rng.normal(size=(q, n_code)),
        )
        omega = random_params(spec, 15)
        sig = Trajectory(rng.normal(size=q), 0.1)
        bundle = policy_jacobians(spec, omega, sig)
        J_fd = fd_jacobian_omega(spec, omega, sig)
        S_fd = fd_jacobian_signal(spec, omega, sig)
        assert np.max(np.abs(bundle.d_pi_d_omega - J_fd)) < 1e-5
        assert np.max(np.abs(bundle.d_pi_d_signal - S_fd)) < 1e-5


class TestTwoDof:
    def test_compose_pure_feedforward(self):
        ff = Trajectory(np.array([1.0, 2.0]), 0.1)
        fb = Trajectory(np.zeros(2), 0.1)
        assert np.allclose(two_dof_compose(ff, fb).values, ff.values)

    def test_compose_pure_feedback(self):
        ff = Trajectory(np.zeros(3), 0.1)
        fb = Trajectory(np.array([1.0, -1.0, 0.5]), 0.1)
        assert np.allclose(two_dof_compose(ff, fb).values, fb.values)

    def test_compose_random_sum(self):
        rng = np.random.default_rng(16)
        a, b = rng.normal(size=5), rng.normal(size=5)
        out = two_dof_compose(Trajectory(a, 0.1), Trajectory(b, 0.1))
        assert np.allclose(out.values, a + b)

    def test_compose_length_mismatch(self):
        with pytest.raises(ValueError):
            two_dof_compose(Trajectory(np.zeros(2), 0.1), Trajectory(np.zeros(3), 0.1))

    def test_closed_loop_matches_manual_simulation(self):
        rng = np.random.default_rng(17)
        g = np.array([0.8, 0.3, -0.1])
        plant = LtiPlant(g, PlantConfig(dt=0.1, horizon=15))
        ff_spec = PolicySpec("linear", h1=1, h2=1)
        fb_spec = PolicySpec("linear", h1=2, strict_past=True)
        ff = random_params(ff_spec, 18)
        fb = random_params(fb_spec, 19, scale=0.2)
        ctrl = TwoDofController(ff_spec, ff, fb_spec, fb)
        ref = Trajectory(rng.normal(size=15), 0.1)
        u, y, err = ctrl.run(plant, ref)
        # manual re-simulation
        u_ff = policy_forward(ff_spec, ff, ref).values
        w_fb = fb.block("weight")[0]
        y2 = np.zeros(15)
        u2 = np.zeros(15)
        e2 = np.zeros(15)
        for k in range(15):
            win = np.zeros(2)
            if k >= 1:
                win[1] = e2[k - 1]
            if k >= 2:
                win[0] = e2[k - 2]
            u2[k] = u_ff[k] + w_fb @ win
            lo = max(0, k - 2)
            y2[k] = g[: k - lo + 1][::-1] @ u2[lo : k + 1]
            e2[k] = y2[k] - ref.values[k]
        assert np.allclose(u.values, u2, atol=1e-12)
        assert np.allclose(y.values, y2, atol=1e-12)
        assert np.allclose(err.values, e2, atol=1e-12)

    def test_combined_parameter_roundtrip(self):
        ff_spec = PolicySpec("linear", h1=1, h2=0)
        fb_spec = PolicySpec("linear", h1=2, strict_past=True)
        ctrl = TwoDofController(ff_spec, random_params(ff_spec, 20), fb_spec, random_params(fb_spec, 21))
        combined = ctrl.combined_parameters()
        combined2 = combined.copy()
        combined2.data[:] = np.arange(combined.size, dtype=float)
        ctrl.set_combined(combined2)
        assert np.allclose(ctrl.combined_parameters().data, combined2.data)
        ff_back = split_parameters(combined2, "ff")
        assert np.allclose(ctrl.ff_params.data, ff_back.data)


class TestParameterVector:
    def test_block_views(self):
        spec = PolicySpec("mlp", h1=1, h2=1, hidden=3)
        pv = init_parameters(spec, 0)
        pv.block("b2")[...] = 5.0
        assert pv.data[-1] == 5.0

    def test_rejects_wrong_size(self):
        with pytest.raises(ValueError):
            ParameterVector(np.zeros(3), [("w", (2, 2))])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ParameterVector(np.array([np.nan]), [("w", (1,))])

    def test_concat_and_split(self):
        a = ParameterVector(np.array([1.0, 2.0]), [("w", (2,))])
        b = ParameterVector(np.array([3.0]), [("w", (1,))])
        both = concat_parameters([("ff", a), ("fb", b)])
        assert np.allclose(both.data, [1, 2, 3])
        assert np.allclose(split_parameters(both, "fb").data, [3.0])

    def test_json_export(self):
        import json

        spec = PolicySpec("linear", h1=0, h2=0)
        pv = ParameterVector(np.array([2.5]), spec.layout())
        assert json.loads(pv.to_json()) == {"weight": [[2.5]]}


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        spec = PolicySpec("mlp", h1=2, h2=1, hidden=4)
        pv = random_params(spec, 22)
        path = tmp_path / "policy.ckpt"
        save_checkpoint(path, spec, pv)
        back, header, spec_hash = load_checkpoint(path, expected_spec=spec)
        assert np.array_equal(back.data, pv.data)
        assert [(n, tuple(s)) for n, s in back.layout] == pv.layout
        assert spec_hash == spec.spec_hash()

    def test_hash_mismatch_detected(self, tmp_path):
        spec = PolicySpec("linear", h1=1, h2=1)
        pv = random_params(spec, 23)
        path = tmp_path / "policy.ckpt"
        save_checkpoint(path, spec, pv)
        other = PolicySpec("linear", h1=2, h2=1)
        with pytest.raises(ValueError):
            load_checkpoint(path, expected_spec=other)
