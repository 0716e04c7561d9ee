"""Command-line interface.

Subcommands:

* ``identify``  frequency sweep on the configured plant, transfer-function
  fit, Bode CSV, and the lifted static gradient shape report
* ``train``     one online learning run from a config file or preset
* ``eval``      held-out evaluation of a stored policy checkpoint
* ``ilc``       ideal-input computation for one sampled reference
* ``pretrain``  ILC over several references, then ridge + SVD factors
* ``diagnose``  theory checks on the synthetic oracle problems
* ``sweep``     several seeded runs of one configuration

``train``, ``eval``, ``ilc``, ``pretrain``, and ``identify`` accept either
``--config file.yaml`` or ``--preset exp1..exp6 [--scale desk|full]``.
"""

from __future__ import annotations

import argparse
import json
import math
import os

import numpy as np

from . import diagnostics, harness
from .gradest import estimate_kappa
from .optimizer import ConstantStep, OptimizerConfig, theorem1_step_size
from .trajectories import sample_beam_reference


def _load_config(args):
    if args.config:
        cfg = harness.ExperimentConfig.from_yaml(args.config)
    elif args.preset:
        cfg = harness.preset_config(args.preset, scale=args.scale, seed=args.seed or 0)
    else:
        raise SystemExit("provide --config or --preset")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output = dict(cfg.output)
        cfg.output["directory"] = args.out
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="experiment YAML file")
    p.add_argument("--preset", help="named experiment (exp1..exp6)")
    p.add_argument("--scale", default="desk", choices=["desk", "full"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory override")


def cmd_train(args):
    cfg = _load_config(args)
    summary = harness.run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_identify(args):
    cfg = _load_config(args)
    plant = harness.make_plant(cfg)
    G, frs, tf = harness.identify_static_gradient(plant, cfg.estimator)
    out = cfg.output.get("directory", "runs/identify")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "frequency_response.json"), "w") as f:
        f.write(frs.to_json())
    with open(os.path.join(out, "transfer_function.json"), "w") as f:
        f.write(tf.to_json())
    with open(os.path.join(out, "bode.csv"), "w") as f:
        f.write("freq_hz,amplitude,phase_rad,nonlinearity_rms,fit_amplitude,fit_phase_rad\n")
        H = tf.eval(1j * 2 * np.pi * frs.frequencies)
        for i, fr in enumerate(frs.frequencies):
            f.write(
                f"{fr:.17g},{frs.amplitude[i]:.17g},{frs.phase[i]:.17g},"
                f"{frs.nonlinearity[i]:.17g},{abs(H[i]):.17g},{np.angle(H[i]):.17g}\n"
            )
    print(json.dumps({
        "output": out,
        "fit_error": tf.fit_error,
        "num_order": len(tf.num) - 1,
        "den_order": len(tf.den) - 1,
        "gradient_shape": list(G.shape),
    }, indent=2))


def cmd_eval(args):
    cfg = _load_config(args)
    result = harness.evaluate_checkpoint(cfg, args.checkpoint, n_references=args.n)
    result.pop("losses", None)
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_ilc(args):
    cfg = _load_config(args)
    plant = harness.noise_free(harness.make_plant(cfg))
    G, _, _ = harness.identify_static_gradient(plant, cfg.estimator)
    sampler = harness.make_distribution(cfg)
    ref = sampler.sample(np.random.default_rng(cfg.seed))
    ilc_cfg = harness.IlcConfig(
        gain=args.gain, max_iterations=args.iterations, tolerance=args.tolerance,
        gradient_model=G,
    )
    result = harness.ilc_ideal_input(plant, ref, ilc_cfg)
    out = cfg.output.get("directory", "runs/ilc")
    os.makedirs(out, exist_ok=True)
    result.input.to_csv(os.path.join(out, "ideal_input.csv"))
    ref.to_csv(os.path.join(out, "reference.csv"))
    print(json.dumps({
        "output": out,
        "iterations": len(result.rms_history),
        "initial_rms": result.rms_history[0],
        "final_rms": min(result.rms_history),
        "converged": result.converged,
    }, indent=2))


def cmd_pretrain(args):
    cfg = _load_config(args)
    plant = harness.noise_free(harness.make_plant(cfg))
    G, _, _ = harness.identify_static_gradient(plant, cfg.estimator)
    sampler = harness.make_distribution(cfg)
    rng = np.random.default_rng(cfg.seed)
    ilc_cfg = harness.IlcConfig(gain=args.gain, max_iterations=args.iterations,
                                tolerance=args.tolerance, gradient_model=G)
    pairs = []
    for i in range(args.n):
        ref = sampler.sample(rng)
        result = harness.ilc_ideal_input(plant, ref, ilc_cfg)
        pairs.append((ref, result.input))
    U, V = harness.pretrain_latent(pairs, rho=args.rho, latent=args.latent)
    out = cfg.output.get("directory", "runs/pretrain")
    os.makedirs(out, exist_ok=True)
    np.savez(os.path.join(out, "latent_maps.npz"), U=U, V=V)
    print(json.dumps({
        "output": out, "pairs": len(pairs), "latent": args.latent,
        "U_shape": list(U.shape), "V_shape": list(V.shape),
    }, indent=2))


def cmd_diagnose(args):
    out = args.out or "runs/diagnose"
    os.makedirs(out, exist_ok=True)
    prob = diagnostics.NonconvexTrackingProblem()
    horizons = [100, 1000, args.horizon]
    finals, slope, constants, big_runs = diagnostics.rate_over_horizons(
        prob, horizons, n_seeds=args.seeds, epsilon=1.0, alpha=0.1
    )
    f1 = prob.objective(prob.omega_start)
    rate_rep = diagnostics.verify_rate(big_runs, constants, f1)

    qprob = diagnostics.QuadraticTrackingProblem()
    pilot_cfg = OptimizerConfig(epsilon=1.0, alpha=0.1, step=ConstantStep(0.05), iterations=200)
    pilot = [diagnostics.run_synthetic(qprob, pilot_cfg, seed=s) for s in range(3)]
    consts_q = diagnostics.measure_constants(qprob, pilot, 1.0, 0.1, mu=1.0, theta=0.5, safety=1.2)
    fq = qprob.objective(qprob.omega_start)
    eta = theorem1_step_size(fq, consts_q.smoothness, consts_q.grad_bound, args.horizon)
    cfg_q = OptimizerConfig(epsilon=1.0, alpha=0.1, step=ConstantStep(eta), iterations=args.horizon)
    runs_q = [diagnostics.run_synthetic(qprob, cfg_q, seed=100 + s) for s in range(args.seeds)]
    regret_rep = diagnostics.regret_report(runs_q, consts_q, qprob, eta=eta)

    t = np.arange(1, len(rate_rep.lhs) + 1)
    with open(os.path.join(out, "rate_curves.csv"), "w") as f:
        f.write("t,lhs,rhs\n")
        for i in range(len(t)):
            f.write(f"{t[i]},{rate_rep.lhs[i]:.17g},{rate_rep.rhs[i]:.17g}\n")
    with open(os.path.join(out, "regret_curves.csv"), "w") as f:
        f.write("t,regret,bound\n")
        for i in range(len(regret_rep.regret_empirical)):
            f.write(f"{i + 1},{regret_rep.regret_empirical[i]:.17g},{regret_rep.regret_bound[i]:.17g}\n")
    report = {
        "rate": {"finals_per_horizon": {str(k): v for k, v in finals.items()},
                 "horizon_slope": slope, **rate_rep.summary()},
        "regret": regret_rep.summary(),
        "constants": {
            "smoothness": constants.smoothness,
            "grad_bound": constants.grad_bound,
            "lambda_bound": constants.lambda_bound,
        },
    }
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_sweep(args):
    cfg = _load_config(args)
    seeds = list(range(args.seeds)) if args.seed is None else list(
        range(args.seed, args.seed + args.seeds)
    )
    results = harness.sweep(cfg, seeds, workers=args.workers)
    med = float(np.median([r["heldout_mean_loss"] for r in results]))
    print(json.dumps({"runs": results, "heldout_mean_loss_median": med}, indent=2, sort_keys=True))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="qntrack", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one online learning experiment")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("identify", help="frequency-domain identification")
    _add_config_args(p)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    _add_config_args(p)
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=None, help="number of test references")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ilc", help="ideal-input computation for one reference")
    _add_config_args(p)
    p.add_argument("--gain", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_ilc)

    p = sub.add_parser("pretrain", help="ILC + ridge/SVD latent factors")
    _add_config_args(p)
    p.add_argument("--n", type=int, default=10, help="number of references")
    p.add_argument("--latent", type=int, default=8)
    p.add_argument("--rho", type=float, default=1e-6)
    p.add_argument("--gain", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("diagnose", help="empirical theory checks")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--horizon", type=int, default=10000)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="multiple seeded runs of one config")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
