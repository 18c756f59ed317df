"""Batch command-line harness.

Subcommands: collect (emit training datasets), train (meta-train a kernel
model), fly (run one scenario), eval (kernel-comparison table), and
check-bound (convergence-envelope report).  Outputs are CSV and JSON
files under --out-dir; exit code is 0 on success and nonzero with a
machine-parsable ``ERROR <Type>: <message>`` line on failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adapt, dynamics, harness, kernels, metalearn
from .errors import BadParams


def _load_config(path) -> harness.RunConfig:
    return harness.parse_config(path) if path else harness.RunConfig()


def _models_dict(models_dir) -> dict:
    models_dir = Path(models_dir)
    out = {}
    for choice in ("vector", "scalar"):
        path = models_dir / f"kernel_{choice}.json"
        if path.exists():
            out[choice] = str(path)
    return out


def cmd_collect(args) -> int:
    cfg = _load_config(args.config)
    plant = cfg.plant()
    conditions = [dynamics.wind_condition(v, **cfg.wind_family(),
                                          label=f"wind_{v:g}")
                  for v in cfg.collect_speeds]
    datasets = metalearn.collect_training_data(
        plant, conditions, cfg.gains(), harness.constant_kernel(),
        duration=cfg.collect_duration, dt=cfg.dt,
        traj_params={"center": cfg.center, "half_width": cfg.cube_half_width,
                     "hold": cfg.hold_interval},
        seed=args.seed)
    out_dir = Path(args.out_dir) / "datasets"
    for ds in datasets:
        path = metalearn.save_dataset(ds, out_dir)
        print(f"wrote {path} ({len(ds)} samples)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.kernel not in ("vector", "scalar"):
        raise BadParams("train --kernel must be vector or scalar")
    datasets = metalearn.load_datasets(args.data_dir)
    mcfg = metalearn.MetaConfig(
        formulation=args.kernel, m=cfg.train_m,
        widths=tuple(int(w) for w in cfg.train_widths),
        sigma_bar=cfg.train_sigma_bar, lr=cfg.train_lr,
        epochs=cfg.train_epochs, optimizer=cfg.train_optimizer,
        seed=args.seed)
    model, curve = metalearn.meta_train(datasets, mcfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / f"kernel_{args.kernel}.json"
    kernels.save_kernel_model(model, model_path)
    curve_path = out_dir / f"curve_{args.kernel}.csv"
    with open(curve_path, "w") as fh:
        fh.write("epoch,train_cost,val_cost\n")
        for epoch, tc, vc in curve:
            fh.write(f"{int(epoch)},{tc!r},{vc!r}\n")
    print(f"wrote {model_path}")
    print(f"wrote {curve_path} ({curve.shape[0]} epochs, "
          f"final train cost {curve[-1, 1]:.3e})")
    return 0


def cmd_fly(args) -> int:
    cfg = _load_config(args.config)
    models = _models_dict(args.models_dir) if args.models_dir else None
    log, metrics = harness.run_scenario(args.scenario, args.kernel, cfg,
                                        args.seed, models)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"episode_{args.scenario}_{args.kernel}_seed{args.seed}"
    adapt.episode_to_csv(log, out_dir / f"{stem}.csv")
    harness.write_json({
        "scenario": args.scenario, "kernel": args.kernel, "seed": args.seed,
        "dt": cfg.dt,
        "metrics": {
            "mean_pred_err": metrics.mean_pred_err,
            "max_pred_err": metrics.max_pred_err,
            "rms_s": metrics.rms_s,
            "rms_pos_err": metrics.rms_pos_err,
            "min_cov_eig": metrics.min_cov_eig,
        },
        "gains": {"pos_gain": cfg.pos_gain, "fb_gain": cfg.fb_gain,
                  "forgetting": cfg.forgetting,
                  "regularization": cfg.regularization,
                  "filter_tau": cfg.filter_tau},
    }, out_dir / f"{stem}.json")
    print(f"wrote {out_dir / stem}.csv")
    print(f"mean pred err {metrics.mean_pred_err:.4f} N, "
          f"rms pos err {metrics.rms_pos_err:.4f} m")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    models = _models_dict(args.models_dir) if args.models_dir else {}
    kernels_run = [k for k in harness.KERNEL_CHOICES
                   if k == "constant" or k in models]
    if args.kernel:
        kernels_run = [args.kernel]
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    result = harness.compare_kernels(harness.SCENARIOS, kernels_run, cfg,
                                     seeds, models)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.comparison_to_csv(result, out_dir / "comparison.csv")
    with open(out_dir / "comparison.txt", "w") as fh:
        fh.write(harness.comparison_to_text(result) + "\n")

    # per-step prediction-error histogram for the setpoint scenario
    hist_logs = [harness.run_scenario("randomwalk", k, cfg, args.seed,
                                      models)[0] for k in kernels_run]
    harness.histogram_to_csv(harness.prediction_error_histogram(hist_logs),
                             out_dir / "prederr_hist_randomwalk.csv")
    print(harness.comparison_to_text(result))
    print(f"wrote {out_dir / 'comparison.csv'} "
          f"({result.elapsed:.1f} s for {len(result.reports)} episodes)")
    return 0


def cmd_check_bound(args) -> int:
    cfg = _load_config(args.config)
    plant = cfg.plant()
    gains = cfg.gains()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj = harness.gen_trajectory("fig8", {"center": cfg.center}, args.seed)
    horizon = 30.0

    # disturbance-free run: calm wind, constant kernel, offset start
    calm = dynamics.WindSchedule(times=np.array([0.0]),
                                 conditions=[dynamics.calm_condition()],
                                 t_final=horizon + 1.0)
    q0, dq0, _ = traj.ref(0.0)
    init = dynamics.State(np.asarray(q0) + np.array([0.2, -0.2, 0.1]),
                          np.asarray(dq0))
    log_free = adapt.run_controller(plant, harness.constant_kernel(), gains,
                                    traj, calm, horizon, cfg.dt,
                                    seed=args.seed, init_state=init,
                                    capture=True)
    rep_free = adapt.theorem_bound(gains, plant, log_free,
                                   a_ref=np.zeros(3))

    # realizable run: the true force is the deployed model's span
    model = kernels.build_kernel_model("vector", n=3, m=4, widths=(16,),
                                       seed=args.seed)
    a_true = 0.5 * np.ones(model.dim_a)
    force = lambda st, t: kernels.eval_kernel(model, st.q, st.dq) @ a_true
    log_real = adapt.run_controller(plant, model, gains, traj, None, horizon,
                                    cfg.dt, seed=args.seed, init_state=init,
                                    true_force=force, capture=True)
    rep_real = adapt.theorem_bound(gains, plant, log_real, a_ref=a_true)

    for tag, rep in (("disturbance_free", rep_free), ("realizable", rep_real)):
        with open(out_dir / f"envelope_{tag}.csv", "w") as fh:
            fh.write("t,measured,envelope\n")
            for t, m, e in zip(rep.times, rep.measured, rep.envelope):
                fh.write(f"{t!r},{m!r},{e!r}\n")
    harness.write_json({
        "disturbance_free": rep_free.summary(),
        "realizable": rep_real.summary(),
        "dt": cfg.dt, "horizon": horizon,
    }, out_dir / "bound_report.json")
    print(f"disturbance-free violation fraction: "
          f"{rep_free.violation_fraction:.4f}")
    print(f"realizable violation fraction: {rep_real.violation_fraction:.4f}")
    print(f"wrote {out_dir / 'bound_report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windadapt",
        description="Meta-learned kernel adaptive control, batch harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="out")

    p = sub.add_parser("collect", help="simulate and emit training datasets")
    common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="meta-train a kernel model file")
    common(p)
    p.add_argument("--kernel", choices=("vector", "scalar"), required=True)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fly", help="run one closed-loop scenario")
    common(p)
    p.add_argument("--kernel", choices=harness.KERNEL_CHOICES,
                   default="constant")
    p.add_argument("--scenario", choices=harness.SCENARIOS, required=True)
    p.add_argument("--models-dir", default=None)
    p.set_defaults(func=cmd_fly)

    p = sub.add_parser("eval", help="3-kernel x 3-scenario comparison table")
    common(p)
    p.add_argument("--kernel", choices=harness.KERNEL_CHOICES, default=None,
                   help="restrict to one kernel")
    p.add_argument("--models-dir", default=None)
    p.add_argument("--n-seeds", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-bound", help="convergence-envelope report")
    common(p)
    p.set_defaults(func=cmd_check_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single machine-parsable failure line
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
