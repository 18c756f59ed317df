"""Experiment harness: trajectory generators, the three flight scenarios,
error metrics, and the kernel-comparison reducer.

Scenarios (wind is synthetic, pointing along +x by default):

hover       fixed setpoint; wind stepped 2.5 m/s for 15 s, then 4.3 m/s
            for 10 s, then 6.2 m/s for 10 s.
randomwalk  a new uniform setpoint inside a cube every second for 60 s;
            wind stepped 2.5 / 4.3 / 6.2 m/s for 20 s each.  Setpoint
            draws are seeded so every kernel sees the same stream.
fig8        figure-eight in the x-z plane, 8 s per loop, one minute at a
            constant 4.3 m/s.

Metrics per episode: mean and max prediction error ||phi a_hat - f||,
RMS composite velocity error ||s||, and RMS position error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .adapt import EpisodeLog, make_gains, run_controller
from .dynamics import (QuadrotorPlant, State, WindSchedule, constant_schedule,
                       stepped_schedule)
from .errors import BadParams
from .kernels import KernelModel, build_kernel_model, load_kernel_model
from .numerics import rng_from_seed

SCENARIOS = ("hover", "randomwalk", "fig8")
KERNEL_CHOICES = ("constant", "vector", "scalar")


# ---------------------------------------------------------------------------
# trajectories

class HoverTrajectory:
    tag = "hover"

    def __init__(self, center=(0.0, 0.0, 1.5)):
        self.center = np.asarray(center, dtype=float)
        zeros = np.zeros(3)
        self._ref = (self.center, zeros, zeros)

    def ref(self, t: float):
        return self._ref


class RandomWalkTrajectory:
    """Piecewise-constant setpoints drawn uniformly inside a cube.

    Between jumps the desired velocity and acceleration are zero, so the
    jumps are genuine discontinuities in the desired trajectory.
    """

    tag = "randomwalk"

    def __init__(self, center=(0.0, 0.0, 1.5), half_width: float = 0.5,
                 hold: float = 1.0, t_final: float = 60.0, seed: int = 0):
        if half_width <= 0.0 or hold <= 0.0 or t_final <= 0.0:
            raise BadParams("half_width, hold, t_final must be > 0")
        self.center = np.asarray(center, dtype=float)
        self.hold = float(hold)
        n_points = int(round(t_final / hold))
        rng = rng_from_seed(seed)
        self.setpoints = self.center + rng.uniform(
            -half_width, half_width, size=(n_points, 3))
        self._zeros = np.zeros(3)

    def ref(self, t: float):
        idx = min(int(t / self.hold), len(self.setpoints) - 1)
        return (self.setpoints[idx], self._zeros, self._zeros)


class Fig8Trajectory:
    """Lissajous figure-eight in the x-z plane with exact derivatives."""

    tag = "fig8"

    def __init__(self, center=(0.0, 0.0, 1.5), amp_x: float = 1.0,
                 amp_z: float = 0.5, period: float = 8.0):
        if period <= 0.0:
            raise BadParams("period must be > 0")
        self.center = np.asarray(center, dtype=float)
        self.amp_x = float(amp_x)
        self.amp_z = float(amp_z)
        self.omega = 2.0 * np.pi / period

    def ref(self, t: float):
        w = self.omega
        q = self.center + np.array([self.amp_x * np.sin(w * t), 0.0,
                                    self.amp_z * np.sin(2.0 * w * t)])
        dq = np.array([self.amp_x * w * np.cos(w * t), 0.0,
                       2.0 * self.amp_z * w * np.cos(2.0 * w * t)])
        ddq = np.array([-self.amp_x * w * w * np.sin(w * t), 0.0,
                        -4.0 * self.amp_z * w * w * np.sin(2.0 * w * t)])
        return (q, dq, ddq)


def gen_trajectory(tag: str, params: dict, seed: int = 0):
    """Build a trajectory generator by tag; raises BadParams on bad input."""
    params = dict(params)
    if tag == "hover":
        return HoverTrajectory(center=params.get("center", (0.0, 0.0, 1.5)))
    if tag == "randomwalk":
        return RandomWalkTrajectory(
            center=params.get("center", (0.0, 0.0, 1.5)),
            half_width=params.get("half_width", 0.5),
            hold=params.get("hold", 1.0),
            t_final=params.get("t_final", 60.0),
            seed=seed,
        )
    if tag == "fig8":
        return Fig8Trajectory(
            center=params.get("center", (0.0, 0.0, 1.5)),
            amp_x=params.get("amp_x", 1.0),
            amp_z=params.get("amp_z", 0.5),
            period=params.get("period", 8.0),
        )
    raise BadParams(f"unknown trajectory tag {tag!r}")


# ---------------------------------------------------------------------------
# run configuration (flat key = value text file)

@dataclass
class RunConfig:
    # plant
    mass: float = 1.47
    gravity: float = 9.81
    dt: float = 0.01
    # controller gains
    pos_gain: float = 2.0
    fb_gain: float = 4.0
    forgetting: float = 0.5
    regularization: float = 0.01
    filter_tau: float = 0.2
    noise_std: float = 0.05
    cov_cap: float = 1e6
    init_jitter: float = 0.05
    # synthetic wind family
    drag_quad: tuple = (0.20, 0.20, 0.25)
    drag_lin: tuple = (0.35, 0.35, 0.45)
    ground_coeff: float = 0.12
    ground_scale: float = 1.0
    wind_direction: tuple = (1.0, 0.0, 0.0)
    # trajectory geometry
    center: tuple = (0.0, 0.0, 1.5)
    cube_half_width: float = 0.5
    hold_interval: float = 1.0
    fig8_amp_x: float = 1.0
    fig8_amp_z: float = 0.5
    fig8_period: float = 8.0
    # data collection
    collect_speeds: tuple = (0.0, 1.3, 2.5, 3.7, 4.9)
    collect_duration: float = 120.0
    # training
    train_m: int = 10
    train_widths: tuple = (32, 32)
    train_sigma_bar: float = 2.0
    train_lr: float = 0.02
    train_epochs: int = 150
    train_optimizer: str = "momentum"

    def plant(self) -> QuadrotorPlant:
        return QuadrotorPlant(mass=self.mass, g0=self.gravity)

    def gains(self):
        return make_gains(n=3, pos=self.pos_gain, fb=self.fb_gain,
                          forgetting=self.forgetting, reg=self.regularization,
                          filter_tau=self.filter_tau)

    def wind_family(self) -> dict:
        return {
            "direction": tuple(self.wind_direction),
            "drag_quad": tuple(self.drag_quad),
            "drag_lin": tuple(self.drag_lin),
            "ground_coeff": self.ground_coeff,
            "z0": self.ground_scale,
        }


def parse_config(path) -> RunConfig:
    """Read a flat `key = value` text config; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadParams(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise BadParams(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = _parse_value(value)
    return replace(RunConfig(), **overrides)


def _parse_value(text: str):
    if "," in text:
        return tuple(float(v) for v in text.split(","))
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


# ---------------------------------------------------------------------------
# scenarios

def scenario_setup(name: str, cfg: RunConfig, seed: int):
    """Trajectory, wind schedule, and horizon for a named scenario."""
    family = cfg.wind_family()
    geom = {"center": cfg.center}
    if name == "hover":
        traj = gen_trajectory("hover", geom, seed)
        schedule = stepped_schedule([2.5, 4.3, 6.2], [15.0, 10.0, 10.0],
                                    t_pad=1.0, **family)
        t_f = 35.0
    elif name == "randomwalk":
        traj = gen_trajectory("randomwalk", {**geom,
                                             "half_width": cfg.cube_half_width,
                                             "hold": cfg.hold_interval,
                                             "t_final": 60.0}, seed)
        schedule = stepped_schedule([2.5, 4.3, 6.2], [20.0, 20.0, 20.0],
                                    t_pad=1.0, **family)
        t_f = 60.0
    elif name == "fig8":
        traj = gen_trajectory("fig8", {**geom, "amp_x": cfg.fig8_amp_x,
                                       "amp_z": cfg.fig8_amp_z,
                                       "period": cfg.fig8_period}, seed)
        schedule = constant_schedule(4.3, 61.0, **family)
        t_f = 60.0
    else:
        raise BadParams(f"unknown scenario {name!r}")
    return traj, schedule, t_f


@dataclass
class MetricsReport:
    scenario: str
    kernel: str
    seed: int
    mean_pred_err: float
    max_pred_err: float
    rms_s: float
    rms_pos_err: float
    min_cov_eig: float

    def row(self):
        return [self.scenario, self.kernel, self.seed, self.mean_pred_err,
                self.max_pred_err, self.rms_s, self.rms_pos_err,
                self.min_cov_eig]


def compute_metrics(log: EpisodeLog, scenario: str, seed: int) -> MetricsReport:
    pred = log.pred_err
    return MetricsReport(
        scenario=scenario, kernel=log.kernel, seed=seed,
        mean_pred_err=float(np.mean(pred)),
        max_pred_err=float(np.max(pred)),
        rms_s=float(np.sqrt(np.mean(log.s_norm ** 2))),
        rms_pos_err=float(np.sqrt(np.mean(log.pos_err_norm ** 2))),
        min_cov_eig=float(np.min(log.cov_eig_min)),
    )


def constant_kernel() -> KernelModel:
    return build_kernel_model("constant", n=3)


def resolve_kernel(choice: str, models: dict | None = None) -> KernelModel:
    """Kernel by name; learned kernels come from trained model objects/files."""
    if choice == "constant":
        return constant_kernel()
    if models is None or choice not in models:
        raise BadParams(f"no trained model provided for kernel {choice!r}")
    entry = models[choice]
    if isinstance(entry, KernelModel):
        return entry
    return load_kernel_model(entry)


def run_scenario(name: str, kernel_choice: str, cfg: RunConfig, seed: int,
                 models: dict | None = None, capture: bool = False):
    """One closed-loop episode; identical seeds give identical setpoint
    streams and initial states across kernel choices."""
    model = resolve_kernel(kernel_choice, models)
    traj, schedule, t_f = scenario_setup(name, cfg, seed)
    plant = cfg.plant()
    gains = cfg.gains()
    # initial hover state near the first setpoint; jitter is seeded and
    # kernel-independent so comparisons stay paired
    q0, dq0, _ = traj.ref(0.0)
    jit = rng_from_seed(seed + 777_000).uniform(-cfg.init_jitter,
                                                cfg.init_jitter, size=3)
    init = State(np.asarray(q0) + jit, np.asarray(dq0))
    log = run_controller(plant, model, gains, traj, schedule, t_f, cfg.dt,
                         seed=seed, noise_std=cfg.noise_std, init_state=init,
                         capture=capture, cov_cap=cfg.cov_cap)
    log.meta.update({"scenario": name, "kernel": kernel_choice, "seed": seed})
    return log, compute_metrics(log, name, seed)


# ---------------------------------------------------------------------------
# kernel comparison

COMPARISON_COLUMNS = (
    "scenario,kernel,n_seeds,mean_pred_err_mean,mean_pred_err_std,"
    "max_pred_err_mean,rms_s_mean,rms_s_std,rms_pos_err_mean,rms_pos_err_std"
)


@dataclass
class ComparisonResult:
    rows: list                 # aggregated rows per (scenario, kernel)
    reports: list              # per-episode MetricsReport
    elapsed: float

    def aggregate(self, scenario: str, kernel: str) -> dict:
        for row in self.rows:
            if row["scenario"] == scenario and row["kernel"] == kernel:
                return row
        raise KeyError((scenario, kernel))


def compare_kernels(scenarios, kernels, cfg: RunConfig, seeds,
                    models: dict | None = None) -> ComparisonResult:
    """Run every (scenario, kernel, seed) episode and aggregate the metrics.

    The reduction order is fixed, so repeated runs with the same inputs
    produce identical tables.
    """
    t_start = time.perf_counter()
    reports = []
    for scenario in scenarios:
        for kernel in kernels:
            for seed in seeds:
                _, rep = run_scenario(scenario, kernel, cfg, seed, models)
                reports.append(rep)
    rows = []
    for scenario in scenarios:
        for kernel in kernels:
            sel = [r for r in reports
                   if r.scenario == scenario and r.kernel == kernel]
            mp = np.array([r.mean_pred_err for r in sel])
            xp = np.array([r.max_pred_err for r in sel])
            rs = np.array([r.rms_s for r in sel])
            rp = np.array([r.rms_pos_err for r in sel])
            rows.append({
                "scenario": scenario, "kernel": kernel, "n_seeds": len(sel),
                "mean_pred_err_mean": float(mp.mean()),
                "mean_pred_err_std": float(mp.std()),
                "max_pred_err_mean": float(xp.mean()),
                "rms_s_mean": float(rs.mean()),
                "rms_s_std": float(rs.std()),
                "rms_pos_err_mean": float(rp.mean()),
                "rms_pos_err_std": float(rp.std()),
            })
    return ComparisonResult(rows=rows, reports=reports,
                            elapsed=time.perf_counter() - t_start)


def comparison_to_csv(result: ComparisonResult, path) -> None:
    keys = COMPARISON_COLUMNS.split(",")
    with open(path, "w") as fh:
        fh.write(COMPARISON_COLUMNS + "\n")
        for row in result.rows:
            out = []
            for key in keys:
                v = row[key]
                out.append(str(v) if isinstance(v, (str, int)) else repr(float(v)))
            fh.write(",".join(out) + "\n")


def comparison_to_text(result: ComparisonResult) -> str:
    lines = [f"{'scenario':<12}{'kernel':<10}{'pred err (N)':>22}"
             f"{'rms |s| (m/s)':>22}{'rms pos err (m)':>22}"]
    for row in result.rows:
        lines.append(
            f"{row['scenario']:<12}{row['kernel']:<10}"
            f"{row['mean_pred_err_mean']:>12.4f} ± {row['mean_pred_err_std']:<8.4f}"
            f"{row['rms_s_mean']:>12.4f} ± {row['rms_s_std']:<8.4f}"
            f"{row['rms_pos_err_mean']:>12.4f} ± {row['rms_pos_err_std']:<8.4f}"
        )
    return "\n".join(lines)


def prediction_error_histogram(logs, n_bins: int = 40, max_err: float | None = None):
    """Binned per-step prediction-error counts, one row set per kernel."""
    all_err = np.concatenate([log.pred_err for log in logs])
    hi = float(max_err if max_err is not None else all_err.max() + 1e-12)
    edges = np.linspace(0.0, hi, n_bins + 1)
    out = []
    for log in logs:
        counts, _ = np.histogram(log.pred_err, bins=edges)
        out.append((log.kernel, edges, counts))
    return out


def histogram_to_csv(hists, path) -> None:
    with open(path, "w") as fh:
        fh.write("kernel,bin_lo,bin_hi,count\n")
        for kernel, edges, counts in hists:
            for i, c in enumerate(counts):
                fh.write(f"{kernel},{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")


def recovery_after_steps(log: EpisodeLog, step_times, window: float = 5.0,
                         pre_window: float = 2.0, factor: float = 2.0):
    """Re-convergence check after each wind step.

    For each step time, compares the post-step rolling-mean ||s|| (1 s
    window) against ``factor`` times the pre-step mean; returns the first
    recovery time within ``window`` seconds, or None.
    """
    t = log.times
    sn = log.s_norm
    dt = log.dt
    k_roll = max(1, int(round(1.0 / dt)))
    rolled = np.convolve(sn, np.ones(k_roll) / k_roll, mode="valid")
    t_roll = t[k_roll - 1:]
    out = []
    for ts in step_times:
        pre = sn[(t >= ts - pre_window) & (t < ts)]
        level = float(np.mean(pre))
        mask = (t_roll > ts) & (t_roll <= ts + window)
        cand = np.where(rolled[mask] <= factor * level)[0]
        out.append(float(t_roll[mask][cand[0]] - ts) if cand.size else None)
    return out


def write_json(doc: dict, path) -> None:
    import json
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
