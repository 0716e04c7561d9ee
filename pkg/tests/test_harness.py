import json
import math
import os

import numpy as np
import pytest

from qntrack.gradest import StaticGradientEstimator
from qntrack.harness import (
    ExperimentConfig,
    IlcConfig,
    StagnationError,
    evaluate_checkpoint,
    held_out_evaluation,
    identify_static_gradient,
    ilc_ideal_input,
    make_controller,
    make_distribution,
    make_estimator,
    make_optimizer_config,
    make_plant,
    noise_free,
    pilot_constants,
    preset_config,
    pretrain_latent,
    run_experiment,
    sweep,
)
from qntrack.numerics import convolution_matrix
from qntrack.plants import BeamParameters, BeamPlant, LtiPlant, PlantConfig
from qntrack.trajectories import (
    BeamReferenceDistribution,
    EpochSampler,
    Trajectory,
    sample_beam_reference,
)


def small_lti_config(tmp_path, seed=3, iterations=25, noise_std=0.0):
    g = (0.3 * np.exp(-0.25 * np.arange(30))).tolist()
    return ExperimentConfig(
        seed=seed,
        plant={"type": "lti", "impulse_response": g, "dt": 0.05, "horizon": 110,
               "noise_std": noise_std},
        distribution={"type": "beam", "v_range": [-0.5, 0.5]},
        policies={"feedforward": {"kind": "linear", "h1": 12, "h2": 12}},
        estimator={"type": "oracle"},
        optimizer={"epsilon": 1.0, "alpha": 0.1, "step": {"type": "constant", "eta": 1.0},
                   "iterations": iterations},
        output={"directory": str(tmp_path / "run")},
        evaluation={"test_references": 5},
    )


class TestConfig:
    def test_yaml_roundtrip(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        path = tmp_path / "cfg.yaml"
        cfg.to_yaml(path)
        back = ExperimentConfig.from_yaml(path)
        assert back.to_dict() == cfg.to_dict()
        assert back.config_hash() == cfg.config_hash()

    def test_builders(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        plant = make_plant(cfg)
        assert isinstance(plant, LtiPlant) and plant.horizon == 110
        sampler = make_distribution(cfg)
        ref = sampler.sample(np.random.default_rng(0))
        assert len(ref) == 110
        ctrl = make_controller(cfg)
        assert not ctrl.has_feedback
        est = make_estimator(cfg, plant)
        assert np.allclose(est.gradient(None, None), plant.exact_jacobian())
        ocfg = make_optimizer_config(cfg)
        assert ocfg.epsilon == 1.0 and ocfg.iterations == 25

    def test_infinite_epsilon_parsing(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        cfg.optimizer["epsilon"] = "inf"
        assert math.isinf(make_optimizer_config(cfg).epsilon)

    def test_step_schedules_parsing(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        cfg.optimizer["step"] = {"type": "diminishing", "c": 2.0}
        assert make_optimizer_config(cfg).step.value(4) == pytest.approx(1.0)
        cfg.optimizer["step"] = {"type": "theorem1", "f1": 1.0, "smoothness": 2.0,
                                 "grad_bound": 1.0, "horizon": 1}
        assert make_optimizer_config(cfg).step.value(1) == pytest.approx(1.0)


class TestPresets:
    @pytest.mark.parametrize("name", ["exp1", "exp2", "exp3", "exp4", "exp5", "exp6"])
    def test_presets_build(self, name):
        cfg = preset_config(name, scale="desk", seed=1)
        assert cfg.plant["n_units"] == 10
        assert cfg.optimizer["iterations"] == 300
        make_plant(cfg)
        make_controller(cfg)

    def test_full_scale_matches_reference_table(self):
        for name, eps, eta, hidden in (
            ("exp1", "inf", 0.1, None),
            ("exp2", 1.0, 15.0, None),
            ("exp4", 1.0, 15.0, 40),
        ):
            cfg = preset_config(name, scale="full")
            assert cfg.plant["n_units"] == 50
            assert cfg.optimizer["iterations"] == 1000
            assert cfg.policies["feedforward"]["h1"] == 100
            assert cfg.optimizer["epsilon"] == eps
            assert cfg.optimizer["step"]["eta"] == eta
            if hidden:
                assert cfg.policies["feedforward"]["hidden"] == hidden

    def test_experiment_six_has_feedback(self):
        cfg = preset_config("exp6", scale="full")
        assert cfg.policies["feedback"]["h1"] == 25
        assert cfg.plant["noise_std"] > 0
        ctrl = make_controller(cfg)
        assert ctrl.has_feedback

    def test_noise_flags(self):
        assert preset_config("exp4").plant["noise_std"] == 0.0
        assert preset_config("exp5").plant["noise_std"] > 0

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_config("exp9")


class TestStaticIdentificationPipeline:
    def test_identify_on_lti_recovers_plant(self, tmp_path):
        # plant built from a known stable second-order response
        from qntrack.gradest import RationalTransferFunction, zoh_impulse_sequence

        wn = 2 * np.pi * 1.0
        tf0 = RationalTransferFunction([wn**2], [1, 2 * 0.5 * wn, wn**2])
        dt, q = 0.01, 400
        g = zoh_impulse_sequence(tf0, dt, q)
        cfg = ExperimentConfig(
            seed=0,
            plant={"type": "lti", "impulse_response": g.tolist(), "dt": dt, "horizon": q},
            estimator={"type": "static",
                       "frequencies": {"start": 0.2, "stop": 3.0, "step": 0.2},
                       "excitation_amplitude": 1.0, "settle": 3.0, "measure": 4.0,
                       "fit_orders": [[0, 2]]},
        )
        plant = make_plant(cfg)
        G, frs, tf = identify_static_gradient(plant, cfg.estimator)
        exact = plant.exact_jacobian()
        rel = np.linalg.norm(G - exact) / np.linalg.norm(exact)
        assert rel < 0.05

    def test_cache_hit_returns_same_object(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        cfg.estimator = {"type": "static",
                         "frequencies": {"start": 0.2, "stop": 1.0, "step": 0.2},
                         "settle": 1.0, "measure": 2.0, "fit_orders": [[0, 1], [1, 2]]}
        plant = make_plant(cfg)
        a = identify_static_gradient(plant, cfg.estimator)
        b = identify_static_gradient(plant, cfg.estimator)
        assert a[0] is b[0]


class TestIlc:
    def test_exact_model_converges_in_one_step(self):
        rng = np.random.default_rng(0)
        q = 40
        g = np.concatenate([[1.0], 0.4 * np.exp(-np.arange(1, 6))])
        plant = LtiPlant(g, PlantConfig(dt=0.1, horizon=q))
        ref = Trajectory(np.sin(np.linspace(0, 3, q)), 0.1)
        ilc = IlcConfig(gain=1.0, max_iterations=10, tolerance=1e-9,
                        gradient_model=plant.exact_jacobian())
        result = ilc_ideal_input(plant, ref, ilc)
        assert result.converged
        assert len(result.rms_history) == 2  # initial miss, then exact tracking
        assert result.rms_history[1] < 1e-12

    def test_scaled_model_contracts_geometrically(self):
        q = 30
        g = np.concatenate([[1.0], 0.3 * np.exp(-np.arange(1, 5))])
        plant = LtiPlant(g, PlantConfig(dt=0.1, horizon=q))
        ref = Trajectory(np.cos(np.linspace(0, 2, q)), 0.1)
        ilc = IlcConfig(gain=1.0, max_iterations=12, tolerance=1e-12,
                        gradient_model=2.0 * plant.exact_jacobian())
        result = ilc_ideal_input(plant, ref, ilc)
        h = np.array(result.rms_history)
        ratios = h[1:6] / h[:5]
        assert np.allclose(ratios, 0.5, atol=1e-6)

    def test_beam_rms_reduced_tenfold(self):
        params = BeamParameters(n_units=10, unit_length=0.15)
        plant = BeamPlant(params, PlantConfig(dt=0.01, horizon=550))
        cfg = preset_config("exp2", scale="desk")
        G, _, _ = identify_static_gradient(plant, cfg.estimator)
        dist = BeamReferenceDistribution(v_range=(-0.5, 0.5))
        ref = sample_beam_reference(dist, 5, 0.01)
        ilc = IlcConfig(gain=0.5, max_iterations=60, tolerance=1e-6, gradient_model=G)
        try:
            result = ilc_ideal_input(plant, ref, ilc)
            history = result.rms_history
        except StagnationError:
            pytest.fail("beam ILC stagnated before reaching 10x reduction")
        assert min(history) <= history[0] / 10.0

    def test_stagnation_detected(self):
        q = 20
        plant = LtiPlant([1.0], PlantConfig(dt=0.1, horizon=q))
        ref = Trajectory(np.ones(q), 0.1)
        # orthogonal-garbage model: updates cannot reduce the error
        bad = np.triu(np.ones((q, q)), k=1) * 1e-9 + np.eye(q) * 1e-12
        ilc = IlcConfig(gain=1.0, max_iterations=100, tolerance=1e-12, gradient_model=bad)
        with pytest.raises(StagnationError):
            ilc_ideal_input(plant, ref, ilc)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IlcConfig(gain=0.0)
        with pytest.raises(ValueError):
            IlcConfig(gain=0.5, tolerance=0.0)


class TestPretrain:
    def test_planted_low_rank_roundtrip(self):
        rng = np.random.default_rng(1)
        r = 3
        U0 = rng.normal(size=(12, r))
        V0 = rng.normal(size=(10, r))
        R0 = U0 @ V0.T
        pairs = []
        for _ in range(50):
            y = Trajectory(rng.normal(size=10), 0.1)
            pairs.append((y, Trajectory(R0 @ y.values, 0.1)))
        U, V = pretrain_latent(pairs, rho=1e-8, latent=r)
        assert np.max(np.abs(U @ V.T - R0)) < 1e-6

    def test_full_rank_exact(self):
        rng = np.random.default_rng(2)
        R0 = rng.normal(size=(6, 6))
        pairs = []
        for _ in range(40):
            y = Trajectory(rng.normal(size=6), 0.1)
            pairs.append((y, Trajectory(R0 @ y.values, 0.1)))
        U, V = pretrain_latent(pairs, rho=1e-10, latent=6)
        assert np.max(np.abs(U @ V.T - R0)) < 1e-6

    def test_zero_ideal_inputs_degenerate(self):
        rng = np.random.default_rng(3)
        pairs = [
            (Trajectory(rng.normal(size=5), 0.1), Trajectory(np.zeros(4), 0.1))
            for _ in range(10)
        ]
        U, V = pretrain_latent(pairs, rho=1e-6, latent=2)
        assert np.allclose(U @ V.T, 0.0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            pretrain_latent([], rho=1.0, latent=1)


class TestEpochSampler:
    def test_visits_each_reference_once_per_epoch(self):
        refs = [Trajectory(np.full(3, float(i)), 0.1) for i in range(7)]
        sampler = EpochSampler(refs)
        rng = np.random.default_rng(4)
        for _ in range(3):
            seen = sorted(int(sampler.sample(rng).values[0]) for _ in range(7))
            assert seen == list(range(7))

    def test_requires_references(self):
        with pytest.raises(ValueError):
            EpochSampler([])


class TestRunExperiment:
    def test_artifacts_and_summary(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        summary = run_experiment(cfg)
        out = tmp_path / "run"
        for fname in ("config.yaml", "run_log.csv", "heldout.csv", "summary.json",
                      "policy_final.ckpt", "policy_final.json"):
            assert (out / fname).exists()
        assert summary["iterations"] == 25
        assert summary["heldout_mean_loss"] > 0
        assert summary["skipped"] == 0
        on_disk = json.loads((out / "summary.json").read_text())
        assert on_disk == summary

    def test_rerun_byte_identical_modulo_timestamp(self, tmp_path):
        cfg_a = small_lti_config(tmp_path)
        cfg_a.output["directory"] = str(tmp_path / "a")
        cfg_b = small_lti_config(tmp_path)
        cfg_b.output["directory"] = str(tmp_path / "b")
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        log_a = (tmp_path / "a" / "run_log.csv").read_bytes().split(b"\n", 1)[1]
        log_b = (tmp_path / "b" / "run_log.csv").read_bytes().split(b"\n", 1)[1]
        assert log_a == log_b
        assert (tmp_path / "a" / "heldout.csv").read_bytes() == (tmp_path / "b" / "heldout.csv").read_bytes()
        assert (tmp_path / "a" / "policy_final.ckpt").read_bytes() == (
            tmp_path / "b" / "policy_final.ckpt"
        ).read_bytes()

    def test_checkpoint_cadence(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        cfg.output["checkpoint_every"] = 10
        run_experiment(cfg)
        out = tmp_path / "run"
        assert (out / "policy_00010.ckpt").exists()
        assert (out / "policy_00020.ckpt").exists()

    def test_evaluate_checkpoint_leaves_file_untouched(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        run_experiment(cfg)
        ckpt = tmp_path / "run" / "policy_final.ckpt"
        before = ckpt.read_bytes()
        result = evaluate_checkpoint(cfg, str(ckpt))
        assert ckpt.read_bytes() == before
        assert result["mean"] > 0
        assert "checkpoint_sha" in result

    def test_eval_matches_training_heldout(self, tmp_path):
        cfg = small_lti_config(tmp_path)
        summary = run_experiment(cfg)
        result = evaluate_checkpoint(cfg, str(tmp_path / "run" / "policy_final.ckpt"))
        assert result["mean"] == pytest.approx(summary["heldout_mean_loss"], rel=1e-12)


def test_pilot_constants(tmp_path):
    cfg = small_lti_config(tmp_path)
    plant = make_plant(cfg)
    est = make_estimator(cfg, plant)
    consts = pilot_constants(plant, make_distribution(cfg), make_controller(cfg), est, n=8, seed=0)
    assert consts["smoothness"] > 0
    assert consts["grad_bound"] > 0
    assert consts["f1"] > 0


def test_sweep_serial_ordering(tmp_path):
    cfg = small_lti_config(tmp_path, iterations=10)
    cfg.output["directory"] = str(tmp_path / "sweep")
    results = sweep(cfg, seeds=[2, 0, 1], workers=1)
    assert [r["seed"] for r in results] == [0, 1, 2]
    assert (tmp_path / "sweep" / "seed_2" / "summary.json").exists()
