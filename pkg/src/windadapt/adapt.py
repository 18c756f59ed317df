"""Online composite adaptive controller and its convergence-bound evaluator.

Control law (mechanical-system convention, disturbance on the left side):

    tau = H(q) acc_ref + C(q, dq) vel_ref + g(q) + phi(q, dq) a_hat - K s

with the composite velocity error s = vel_err + Lambda * pos_err.  The
coefficient estimate a_hat follows a composite adaptation law that blends
a tracking-error term, a filtered prediction-error term, and a
regularization leak, with gain matrix ``cov`` propagated by a
forgetting-factor Riccati equation.  ``cov`` starts at (1/reg) * I, which
is the exact no-excitation fixed point of that equation, and it stays
symmetric positive definite (re-symmetrized and eigenvalue-floored after
every step).

The exponential convergence bound is assembled from the logged traces:
contraction rate, disturbance radius, and the time-domain envelope that
the measured stacked error norm ||(s, a_hat - a_ref)|| is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import PlantModel, State, WindSchedule, disturbance, step_plant_forced
from .errors import BadParams, CovarianceDivergence, ShapeMismatch
from .kernels import KernelModel, eval_kernel, eval_phi_batch, representation_error
from .numerics import rk4_step, rng_from_seed, zoh_lowpass

COV_EIG_FLOOR = 1e-10


@dataclass
class Gains:
    """Controller and adaptation gains.

    pos_gain and fb_gain are SPD matrices; forgetting, reg, and filter_tau
    are positive scalars.
    """

    pos_gain: np.ndarray     # folds position error into the composite error (1/s)
    fb_gain: np.ndarray      # feedback on the composite error (N s/m)
    forgetting: float        # exponential forgetting rate (1/s)
    reg: float               # regularization weight on a_hat
    filter_tau: float        # prediction-error filter time constant (s)

    def __post_init__(self):
        self.pos_gain = np.asarray(self.pos_gain, dtype=float)
        self.fb_gain = np.asarray(self.fb_gain, dtype=float)
        for name, M in (("pos_gain", self.pos_gain), ("fb_gain", self.fb_gain)):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise BadParams(f"{name} must be square")
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M)[0] <= 0.0:
                raise BadParams(f"{name} must be symmetric positive definite")
        if min(self.forgetting, self.reg, self.filter_tau) <= 0.0:
            raise BadParams("forgetting, reg, filter_tau must be > 0")


def make_gains(n: int = 3, pos: float = 2.0, fb: float = 4.0,
               forgetting: float = 0.5, reg: float = 0.01,
               filter_tau: float = 0.2) -> Gains:
    return Gains(pos_gain=pos * np.eye(n), fb_gain=fb * np.eye(n),
                 forgetting=forgetting, reg=reg, filter_tau=filter_tau)


@dataclass
class AdaptiveState:
    """Coefficient estimate, adaptation gain, and filter states."""

    a_hat: np.ndarray        # (dim_a,)
    cov: np.ndarray          # (dim_a, dim_a) SPD adaptation gain
    phi_filt: np.ndarray     # (n, dim_a) filtered regressor
    y_filt: np.ndarray       # (n,) filtered force measurement
    e_filt: np.ndarray       # (n,) filtered prediction error
    cov_eig_min: float = np.nan
    cov_eig_max: float = np.nan


def init_adaptive_state(dim_a: int, n: int, reg: float,
                        a_hat0: np.ndarray | None = None) -> AdaptiveState:
    a0 = np.zeros(dim_a) if a_hat0 is None else np.asarray(a_hat0, dtype=float)
    if a0.shape != (dim_a,):
        raise ShapeMismatch(f"a_hat0 must have length {dim_a}")
    p0 = 1.0 / reg
    return AdaptiveState(a_hat=a0, cov=p0 * np.eye(dim_a),
                         phi_filt=np.zeros((n, dim_a)), y_filt=np.zeros(n),
                         e_filt=np.zeros(n), cov_eig_min=p0, cov_eig_max=p0)


@dataclass
class TrackingState:
    pos_err: np.ndarray
    vel_err: np.ndarray
    s: np.ndarray            # composite velocity error
    vel_ref: np.ndarray
    acc_ref: np.ndarray


def tracking_errors(state: State, ref, pos_gain: np.ndarray) -> TrackingState:
    """Composite error bookkeeping; ref is the triple (q_d, dq_d, ddq_d)."""
    q_d, dq_d, ddq_d = ref
    pos_err = state.q - q_d
    vel_err = state.dq - dq_d
    s = vel_err + pos_gain @ pos_err
    return TrackingState(pos_err=pos_err, vel_err=vel_err, s=s,
                         vel_ref=dq_d - pos_gain @ pos_err,
                         acc_ref=ddq_d - pos_gain @ vel_err)


def _control_tau(plant: PlantModel, state: State, tr: TrackingState,
                 phi: np.ndarray, a_hat: np.ndarray, gains: Gains) -> np.ndarray:
    q, dq = state.q, state.dq
    return (plant.inertia(q) @ tr.acc_ref
            + plant.coriolis(q, dq) @ tr.vel_ref
            + plant.gravity(q)
            + phi @ a_hat
            - gains.fb_gain @ tr.s)


def control_law(plant: PlantModel, state: State, ref, a_hat: np.ndarray,
                model: KernelModel, gains: Gains) -> np.ndarray:
    """Commanded generalized force for the current state and desired triple."""
    tr = tracking_errors(state, ref, gains.pos_gain)
    phi = eval_kernel(model, state.q, state.dq)
    return _control_tau(plant, state, tr, phi, a_hat, gains)


def update_filters(ad: AdaptiveState, phi: np.ndarray, y_meas: np.ndarray,
                   dt: float, filter_tau: float) -> AdaptiveState:
    """Advance the regressor and measurement filters one step."""
    if phi.shape != ad.phi_filt.shape:
        raise ShapeMismatch(f"phi shape {phi.shape} != {ad.phi_filt.shape}")
    if y_meas.shape != ad.y_filt.shape:
        raise ShapeMismatch(f"y shape {y_meas.shape} != {ad.y_filt.shape}")
    phi_f = zoh_lowpass(ad.phi_filt, phi, dt, filter_tau)
    y_f = zoh_lowpass(ad.y_filt, y_meas, dt, filter_tau)
    return AdaptiveState(a_hat=ad.a_hat, cov=ad.cov, phi_filt=phi_f,
                         y_filt=y_f, e_filt=phi_f @ ad.a_hat - y_f,
                         cov_eig_min=ad.cov_eig_min, cov_eig_max=ad.cov_eig_max)


def adaptation_step(ad: AdaptiveState, s: np.ndarray, phi: np.ndarray,
                    gains: Gains, dt: float, cov_cap: float = 1e6) -> AdaptiveState:
    """One RK4 step of the coupled estimate / adaptation-gain dynamics.

    a_hat' = -cov (phi^T s + W^T (W a_hat - y1) + forgetting * reg * a_hat)
    cov'   = forgetting * cov - forgetting * reg * cov^2 - cov W^T W cov

    with W, y1 the filtered regressor and measurement held constant over
    the step.  The gain is re-symmetrized and eigenvalue-floored after the
    step; exceeding the eigenvalue cap raises CovarianceDivergence.
    """
    da = ad.a_hat.size
    W, y1 = ad.phi_filt, ad.y_filt
    lam, gam = gains.forgetting, gains.reg
    G = W.T @ W
    drive = phi.T @ s
    Wty = W.T @ y1

    def fieldfn(z, _):
        a = z[:da]
        P = z[da:].reshape(da, da)
        adot = -P @ (drive + G @ a - Wty + lam * gam * a)
        Pdot = lam * P - lam * gam * (P @ P) - P @ G @ P
        return np.concatenate([adot, Pdot.ravel()])

    z = rk4_step(fieldfn, np.concatenate([ad.a_hat, ad.cov.ravel()]), None, dt)
    a_new = z[:da]
    P_new = z[da:].reshape(da, da)
    P_new = 0.5 * (P_new + P_new.T)
    w = np.linalg.eigvalsh(P_new)
    if w[-1] > cov_cap:
        raise CovarianceDivergence(
            f"adaptation gain eigenvalue {w[-1]:.3e} above cap {cov_cap:.1e}")
    if w[0] < COV_EIG_FLOOR:
        # roundoff can push an eigenvalue below zero; clip and rebuild
        vals, vecs = np.linalg.eigh(P_new)
        vals = np.maximum(vals, COV_EIG_FLOOR)
        P_new = (vecs * vals) @ vecs.T
        w = vals
    return AdaptiveState(a_hat=a_new, cov=P_new, phi_filt=W, y_filt=y1,
                         e_filt=W @ a_new - y1,
                         cov_eig_min=float(w[0]), cov_eig_max=float(w[-1]))


# ---------------------------------------------------------------------------
# closed-loop episode

@dataclass
class EpisodeLog:
    """Per-step time series from one closed-loop run plus derived columns."""

    times: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    q_des: np.ndarray
    dq_des: np.ndarray
    s: np.ndarray
    tau: np.ndarray
    a_hat: np.ndarray
    cov_eig_min: np.ndarray
    cov_eig_max: np.ndarray
    f_true: np.ndarray
    y_meas: np.ndarray
    pred_err_vec: np.ndarray      # phi a_hat - f_true, logger-only ground truth
    d_point: np.ndarray           # pointwise representation error of a_star
    a_tilde_norm: np.ndarray      # ||a_hat - a_star|| per step
    dt: float
    seed: int
    kernel: str
    segments: list = field(default_factory=list)   # (t0, t1, a_star, d_max)
    meta: dict = field(default_factory=dict)
    phi_trace: np.ndarray | None = None
    filt_phi_trace: np.ndarray | None = None
    cov_trace: np.ndarray | None = None

    @property
    def pred_err(self) -> np.ndarray:
        return np.linalg.norm(self.pred_err_vec, axis=1)

    @property
    def pos_err_norm(self) -> np.ndarray:
        return np.linalg.norm(self.q - self.q_des, axis=1)

    @property
    def s_norm(self) -> np.ndarray:
        return np.linalg.norm(self.s, axis=1)


def run_controller(plant: PlantModel, model: KernelModel, gains: Gains,
                   trajectory, schedule: WindSchedule | None, t_f: float,
                   dt: float, seed: int = 0, noise_std: float = 0.0,
                   a_hat0: np.ndarray | None = None,
                   init_state: State | None = None,
                   true_force=None, capture: bool = False,
                   cov_cap: float = 1e6) -> EpisodeLog:
    """Integrate plant, filters, and adaptation at a single rate 1/dt.

    The controller only ever sees the measured force channel ``y`` (true
    disturbance plus optional Gaussian noise); the ground-truth force is
    logged for evaluation.  ``true_force(state, t)`` overrides the wind
    family entirely when given (used for realizable-disturbance studies).
    """
    if true_force is None and schedule is None:
        raise BadParams("need a wind schedule or an explicit true_force")
    n = plant.n
    da = model.dim_a
    steps = int(round(t_f / dt))
    rng = rng_from_seed(seed)

    if init_state is None:
        q0, dq0, _ = trajectory.ref(0.0)
        state = State(np.array(q0, dtype=float), np.array(dq0, dtype=float))
    else:
        state = init_state
    ad = init_adaptive_state(da, n, gains.reg, a_hat0)

    T = np.arange(steps) * dt
    logq = np.empty((steps, n)); logdq = np.empty((steps, n))
    logqd = np.empty((steps, n)); logdqd = np.empty((steps, n))
    logs = np.empty((steps, n)); logtau = np.empty((steps, n))
    loga = np.empty((steps, da))
    logpmin = np.empty(steps); logpmax = np.empty(steps)
    logf = np.empty((steps, n)); logy = np.empty((steps, n))
    logev = np.empty((steps, n))
    phi_tr = np.empty((steps, n, da)) if capture else None
    W_tr = np.empty((steps, n, da)) if capture else None
    P_tr = np.empty((steps, da, da)) if capture else None

    for k in range(steps):
        t = T[k]
        ref = trajectory.ref(t)
        cond = schedule.sample(t) if true_force is None else None
        phi = eval_kernel(model, state.q, state.dq)
        tr = tracking_errors(state, ref, gains.pos_gain)
        tau = _control_tau(plant, state, tr, phi, ad.a_hat, gains)

        if true_force is None:
            f_t = disturbance(state, cond)
            force_fn = lambda st, c=cond: disturbance(st, c)
        else:
            f_t = true_force(state, t)
            force_fn = lambda st, tt=t: true_force(st, tt)

        # measured-force channel: the nominal-model acceleration residual
        # reduces exactly to the true disturbance in simulation, so only
        # the injected sensor noise separates y from f
        y = f_t + noise_std * rng.standard_normal(n) if noise_std > 0.0 else f_t

        logq[k] = state.q; logdq[k] = state.dq
        logqd[k] = ref[0]; logdqd[k] = ref[1]
        logs[k] = tr.s; logtau[k] = tau; loga[k] = ad.a_hat
        logpmin[k] = ad.cov_eig_min; logpmax[k] = ad.cov_eig_max
        logf[k] = f_t; logy[k] = y
        logev[k] = phi @ ad.a_hat - f_t
        if capture:
            phi_tr[k] = phi
            W_tr[k] = ad.phi_filt
            P_tr[k] = ad.cov

        ad = adaptation_step(ad, tr.s, phi, gains, dt, cov_cap)
        ad = update_filters(ad, phi, y, dt, gains.filter_tau)
        state = step_plant_forced(plant, state, tau, force_fn, dt)

    log = EpisodeLog(times=T, q=logq, dq=logdq, q_des=logqd, dq_des=logdqd,
                     s=logs, tau=logtau, a_hat=loga, cov_eig_min=logpmin,
                     cov_eig_max=logpmax, f_true=logf, y_meas=logy,
                     pred_err_vec=logev,
                     d_point=np.zeros(steps), a_tilde_norm=np.zeros(steps),
                     dt=dt, seed=seed, kernel=model.formulation,
                     phi_trace=phi_tr, filt_phi_trace=W_tr, cov_trace=P_tr)
    _annotate_segments(log, model, schedule, t_f)
    return log


def _annotate_segments(log: EpisodeLog, model: KernelModel,
                       schedule: WindSchedule | None, t_f: float) -> None:
    """Per constant-wind segment: trajectory-optimal a_star and residuals."""
    if schedule is None:
        bounds = [(0.0, t_f)]
    else:
        bounds = [(t0, min(t1, t_f)) for t0, t1 in schedule.segment_bounds()
                  if t0 < t_f]
    for t0, t1 in bounds:
        mask = (log.times >= t0) & (log.times < t1)
        if not np.any(mask):
            continue
        a_star, d_max = representation_error(model, log.q[mask], log.dq[mask],
                                             log.f_true[mask])
        res = eval_phi_batch(model, log.q[mask], log.dq[mask]) @ a_star \
            - log.f_true[mask]
        log.d_point[mask] = np.linalg.norm(res, axis=1)
        log.a_tilde_norm[mask] = np.linalg.norm(log.a_hat[mask] - a_star, axis=1)
        log.segments.append((float(t0), float(t1), a_star, float(d_max)))


# ---------------------------------------------------------------------------
# convergence bound

@dataclass
class BoundReport:
    """Contraction rate, disturbance radius, and envelope-vs-trace check."""

    lam_con: float
    d_bar: float
    kappa_metric: float
    lam_min_metric: float
    lam_max_metric: float
    sup_disturbance: float
    violation_fraction: float
    times: np.ndarray
    envelope: np.ndarray
    measured: np.ndarray
    a_ref: np.ndarray

    def summary(self) -> dict:
        return {
            "lam_con": self.lam_con,
            "d_bar": self.d_bar,
            "kappa_metric": self.kappa_metric,
            "lam_min_metric": self.lam_min_metric,
            "lam_max_metric": self.lam_max_metric,
            "sup_disturbance": self.sup_disturbance,
            "violation_fraction": self.violation_fraction,
        }


def theorem_bound(gains: Gains, plant: PlantModel, log: EpisodeLog,
                  a_ref: np.ndarray | None = None,
                  filter_tau: float | None = None) -> BoundReport:
    """Exponential-envelope evaluation from a captured episode log.

    Builds the stacked-error metric from the inertia extremes and the
    logged adaptation-gain spectrum, assembles the conservative envelope

        ||y(t)|| <= sqrt(kappa) ||y(0)|| exp(-lam_con t)
                    + d_bar / (lam_con sqrt(lam_min)) (1 - exp(-lam_con t))

    and reports the fraction of steps where the measured ||(s, a_tilde)||
    exceeds it.  Requires a log recorded with capture=True.
    """
    if log.phi_trace is None or log.filt_phi_trace is None:
        raise BadParams("theorem_bound needs a log recorded with capture=True")
    L, n, da = log.phi_trace.shape
    tau_f = gains.filter_tau if filter_tau is None else filter_tau

    if a_ref is None:
        from .numerics import solve_least_squares
        a_ref = solve_least_squares(log.phi_trace.reshape(L * n, da),
                                    log.f_true.reshape(L * n), 1e-9)

    d_vec = log.phi_trace @ a_ref - log.f_true          # (L, n)
    d1 = np.zeros_like(d_vec)
    for k in range(1, L):
        d1[k] = zoh_lowpass(d1[k - 1], d_vec[k - 1], log.dt, tau_f)

    reg_term = gains.forgetting * gains.reg * a_ref
    stack = np.concatenate(
        [d_vec, np.einsum("knd,kn->kd", log.filt_phi_trace, d1) + reg_term],
        axis=1)
    sup_dist = float(np.max(np.linalg.norm(stack, axis=1)))

    # inertia extremes along the trajectory (H is constant for the quadrotor)
    h_eigs = np.concatenate([np.linalg.eigvalsh(plant.inertia(qk))
                             for qk in log.q[::max(1, L // 64)]])
    inv_gain_min = float(np.min(1.0 / log.cov_eig_max))   # min eig of cov^-1
    inv_gain_max = float(np.max(1.0 / log.cov_eig_min))   # max eig of cov^-1
    lam_min_m = min(float(h_eigs.min()), inv_gain_min)
    lam_max_m = max(float(h_eigs.max()), inv_gain_max)
    kappa = lam_max_m / lam_min_m

    k_fb = float(np.linalg.eigvalsh(gains.fb_gain)[0])
    lam_con = min(k_fb, 0.5 * gains.forgetting * (inv_gain_min + gains.reg)) \
        / lam_max_m
    d_bar = sup_dist / np.sqrt(lam_min_m)

    measured = np.sqrt(log.s_norm ** 2
                       + np.linalg.norm(log.a_hat - a_ref, axis=1) ** 2)
    decay = np.exp(-lam_con * log.times)
    envelope = (np.sqrt(kappa) * measured[0] * decay
                + d_bar / (lam_con * np.sqrt(lam_min_m)) * (1.0 - decay))
    viol = float(np.mean(measured > envelope * (1.0 + 1e-9) + 1e-12))
    return BoundReport(lam_con=float(lam_con), d_bar=float(d_bar),
                       kappa_metric=float(kappa), lam_min_metric=lam_min_m,
                       lam_max_metric=lam_max_m, sup_disturbance=sup_dist,
                       violation_fraction=viol, times=log.times,
                       envelope=envelope, measured=measured, a_ref=a_ref)


# ---------------------------------------------------------------------------
# episode CSV / JSON output

EPISODE_BASE_COLUMNS = (
    "t,qx,qy,qz,vx,vy,vz,qd_x,qd_y,qd_z,vd_x,vd_y,vd_z,"
    "tau_x,tau_y,tau_z,s_x,s_y,s_z,s_norm,pos_err_norm,pred_err,"
    "d_point,a_tilde_norm,cov_eig_min,cov_eig_max"
)


def episode_to_csv(log: EpisodeLog, path) -> None:
    """One row per step; coefficient estimates appended as a_hat_i columns."""
    da = log.a_hat.shape[1]
    header = EPISODE_BASE_COLUMNS + "".join(f",a_hat_{i}" for i in range(da))
    s_norm = log.s_norm
    pos_err = log.pos_err_norm
    pred = log.pred_err
    with open(path, "w") as fh:
        fh.write("# one row per control step; columns as named below\n")
        fh.write(header + "\n")
        for k in range(log.times.size):
            row = [log.times[k], *log.q[k], *log.dq[k], *log.q_des[k],
                   *log.dq_des[k], *log.tau[k], *log.s[k], s_norm[k],
                   pos_err[k], pred[k], log.d_point[k], log.a_tilde_norm[k],
                   log.cov_eig_min[k], log.cov_eig_max[k], *log.a_hat[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
