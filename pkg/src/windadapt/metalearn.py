"""Meta-training of the kernel networks over per-condition datasets.

The training objective for one condition dataset D is

    J(a, weights, D) = dt * sum_{(q, dq, f) in D} || f - phi(q, dq) a ||^2

minimized jointly over the linear coefficients and the network weights.
Because the inner problem in ``a`` is linear least squares, it is solved
exactly on a random subset of D (the adaptation split) and the outer
problem descends the cost of the remaining samples with respect to the
network weights.  Weights are re-projected onto the spectral-norm bound
after every step.

The gradient treats the inner solution either as a constant per step
("stop-gradient", the default) or differentiates through the
ridge-regularized closed form ("full"); both are finite-difference
checked in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadParams, NonFinite
from .kernels import (KernelModel, build_kernel_model, eval_phi_batch,
                      normalize, set_standardization)
from .numerics import rng_from_seed, solve_least_squares


@dataclass
class ConditionDataset:
    """(q, dq, f) triples measured under one fixed wind condition."""

    label: str
    Q: np.ndarray          # (L, n) positions
    DQ: np.ndarray         # (L, n) velocities
    F: np.ndarray          # (L, n) measured disturbance forces
    dt: float              # sample period (s)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.DQ = np.asarray(self.DQ, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        if not (self.Q.shape == self.DQ.shape == self.F.shape):
            raise BadParams("Q, DQ, F must share one (L, n) shape")
        for arr in (self.Q, self.DQ, self.F):
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"dataset {self.label!r} has non-finite entries")
        if self.dt <= 0.0:
            raise BadParams("sample period must be > 0")

    def __len__(self) -> int:
        return self.Q.shape[0]

    def slice(self, idx) -> "ConditionDataset":
        return ConditionDataset(self.label, self.Q[idx], self.DQ[idx],
                                self.F[idx], self.dt, dict(self.meta))


@dataclass
class MetaSplit:
    """Disjoint covering index sets: adaptation solve vs gradient evaluation."""

    adapt_idx: np.ndarray
    train_idx: np.ndarray


@dataclass
class MetaConfig:
    formulation: str = "vector"
    m: int = 10
    widths: tuple = (32, 32)
    sigma_bar: float = 2.0
    lr: float = 0.02
    epochs: int = 500
    k_adapt: int | None = None      # adaptation-split size; None -> max(2m, 0.2 L)
    seed: int = 0
    ridge: float = 1e-9
    grad_policy: str = "stop-gradient"   # or "full"
    full_batch: bool = False
    optimizer: str = "sgd"               # or "momentum"
    momentum: float = 0.9
    line_search: bool = False
    val_fraction: float = 0.2
    patience: int = 20
    rel_tol: float = 1e-4

    def __post_init__(self):
        if self.lr < 0.0:
            raise BadParams("learning rate must be >= 0")
        if self.grad_policy not in ("stop-gradient", "full"):
            raise BadParams(f"unknown gradient policy {self.grad_policy!r}")


# ---------------------------------------------------------------------------
# inner solve and cost

def a_ls(model: KernelModel, Q, DQ, F, ridge: float = 1e-9) -> np.ndarray:
    """Exact least-squares coefficients on a subset, via the stacked system.

    Stacks one n-row regressor block per sample and solves the (tiny-ridge)
    least squares problem against the stacked force measurements.
    """
    Phi = eval_phi_batch(model, Q, DQ)
    L, n, da = Phi.shape
    return solve_least_squares(Phi.reshape(L * n, da),
                               np.asarray(F, dtype=float).reshape(L * n), ridge)


def cost_j(model: KernelModel, a: np.ndarray, Q, DQ, F, dt: float) -> float:
    """dt times the summed squared residual norm over a subset."""
    Phi = eval_phi_batch(model, Q, DQ)
    res = Phi @ a - np.asarray(F, dtype=float)
    return float(dt * np.sum(res * res))


# ---------------------------------------------------------------------------
# gradients

def meta_gradient(model: KernelModel, a: np.ndarray, Q_t, DQ_t, F_t, dt: float,
                  policy: str = "stop-gradient", adapt_subset=None,
                  ridge: float = 1e-9):
    """Gradient of cost_j on the training split w.r.t. all network weights.

    With the "full" policy, adds the term from differentiating the
    ridge-regularized closed-form inner solution on the adaptation split.
    """
    F_t = np.asarray(F_t, dtype=float)
    Phi, vjp = eval_phi_batch(model, Q_t, DQ_t, with_vjp=True)
    res = Phi @ a - F_t
    E = (2.0 * dt) * res[:, :, None] * a[None, None, :]
    grads = vjp(E)

    if policy == "full":
        if adapt_subset is None:
            raise BadParams("full gradient policy needs the adaptation subset")
        Qa, DQa, Fa = adapt_subset
        Phi_a, vjp_a = eval_phi_batch(model, Qa, DQa, with_vjp=True)
        La, n, da = Phi_a.shape
        Phi_s = Phi_a.reshape(La * n, da)
        F_s = np.asarray(Fa, dtype=float).reshape(La * n)
        G = Phi_s.T @ Phi_s + ridge * np.eye(da)
        # adjoint of the inner solve: dJ/da on the training split
        lam = (2.0 * dt) * (Phi.reshape(-1, da).T @ res.reshape(-1))
        u = np.linalg.solve(G, lam)
        r_s = F_s - Phi_s @ a
        E_a = np.outer(r_s, u) - np.outer(Phi_s @ u, a)
        grads = _add_grads(grads, vjp_a(E_a.reshape(La, n, da)))
    return grads


def _add_grads(g1, g2):
    return [[(dW1 + dW2, db1 + db2) for (dW1, db1), (dW2, db2) in zip(n1, n2)]
            for n1, n2 in zip(g1, g2)]


def _scale_grads(g, c):
    return [[(c * dW, c * db) for (dW, db) in net] for net in g]


def apply_update(model: KernelModel, grads, step: float) -> KernelModel:
    """New model with weights moved one step against the gradient."""
    out = model.copy()
    for net, g in zip(out.nets, grads):
        for l, (dW, db) in enumerate(g):
            net.weights[l] = net.weights[l] - step * dW
            net.biases[l] = net.biases[l] - step * db
    return out


def flatten_grads(grads) -> np.ndarray:
    parts = []
    for net in grads:
        for dW, db in net:
            parts.append(dW.ravel())
            parts.append(db.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def get_params(model: KernelModel) -> np.ndarray:
    parts = []
    for net in model.nets:
        for W, b in zip(net.weights, net.biases):
            parts.append(W.ravel())
            parts.append(b.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def set_params(model: KernelModel, vec: np.ndarray) -> KernelModel:
    out = model.copy()
    k = 0
    for net in out.nets:
        for l in range(len(net.weights)):
            W, b = net.weights[l], net.biases[l]
            net.weights[l] = vec[k:k + W.size].reshape(W.shape).copy()
            k += W.size
            net.biases[l] = vec[k:k + b.size].copy()
            k += b.size
    if k != vec.size:
        raise BadParams("parameter vector length mismatch")
    return out


# ---------------------------------------------------------------------------
# training loop

def draw_split(L: int, m: int, rng: np.random.Generator,
               k_adapt: int | None = None) -> MetaSplit:
    """Fresh uniform random split; the adaptation set stays overdetermined."""
    K = k_adapt if k_adapt is not None else max(2 * m, int(round(0.2 * L)))
    K = min(max(K, 1), L - 1)
    perm = rng.permutation(L)
    return MetaSplit(adapt_idx=np.sort(perm[:K]), train_idx=np.sort(perm[K:]))


def meta_objective(model: KernelModel, ds: ConditionDataset,
                   split: MetaSplit, ridge: float) -> float:
    ia, it = split.adapt_idx, split.train_idx
    a = a_ls(model, ds.Q[ia], ds.DQ[ia], ds.F[ia], ridge)
    return cost_j(model, a, ds.Q[it], ds.DQ[it], ds.F[it], ds.dt)


# line-search step multipliers, tried in order on the stepped-and-normalized
# objective; the incumbent model is kept when nothing improves
_LS_LADDER = (4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625)


def _line_search(model, direction, lr, current, ds, split, ridge):
    """Best stepped-and-normalized candidate along a direction, or None."""
    best = None
    for mult in _LS_LADDER:
        cand = normalize(apply_update(model, direction, lr * mult))
        cost = meta_objective(cand, ds, split, ridge)
        if cost < (best[1] if best else current):
            best = (cand, cost, lr * mult)
    return best


def meta_step(model: KernelModel, ds: ConditionDataset, cfg: MetaConfig,
              rng: np.random.Generator, opt_state: dict | None = None):
    """One split / inner-solve / descent / re-normalize cycle.

    Returns the updated model and the post-step objective value on this
    step's split.  With line search enabled the objective value on the
    step's split never increases (the incumbent is kept when no candidate
    improves it).
    """
    L = len(ds)
    if L < 2 * model.m:
        raise BadParams(f"dataset {ds.label!r} has {L} samples; needs >= {2 * model.m}")
    if cfg.full_batch:
        idx = np.arange(L)
        split = MetaSplit(adapt_idx=idx, train_idx=idx)
    else:
        split = draw_split(L, model.m, rng, cfg.k_adapt)
    ia, it = split.adapt_idx, split.train_idx

    a = a_ls(model, ds.Q[ia], ds.DQ[ia], ds.F[ia], cfg.ridge)
    grads = meta_gradient(model, a, ds.Q[it], ds.DQ[it], ds.F[it], ds.dt,
                          policy=cfg.grad_policy,
                          adapt_subset=(ds.Q[ia], ds.DQ[ia], ds.F[ia]),
                          ridge=cfg.ridge)

    if opt_state is None:
        opt_state = {}
    lr = opt_state.get("lr", cfg.lr)

    if cfg.line_search:
        current = meta_objective(model, ds, split, cfg.ridge)
        direction = grads
        use_momentum = cfg.optimizer == "momentum"
        if use_momentum:
            vel = opt_state.get("velocity")
            if vel is not None:
                direction = _add_grads(_scale_grads(vel, cfg.momentum), grads)
        choice = _line_search(model, direction, lr, current, ds, split, cfg.ridge)
        if choice is None and use_momentum and direction is not grads:
            # stale momentum stopped pointing downhill; retry along the gradient
            direction = grads
            choice = _line_search(model, direction, lr, current, ds, split,
                                  cfg.ridge)
        if choice is None:
            if use_momentum:
                opt_state["velocity"] = None
            return model, current
        new_model, cost, new_lr = choice
        opt_state["lr"] = new_lr
        if use_momentum:
            opt_state["velocity"] = direction
        return new_model, cost

    if cfg.optimizer == "adam":
        g = flatten_grads(grads)
        t = opt_state.get("t", 0) + 1
        m1 = cfg.momentum * opt_state.get("m1", 0.0) + (1 - cfg.momentum) * g
        m2 = 0.999 * opt_state.get("m2", 0.0) + 0.001 * g * g
        opt_state.update(t=t, m1=m1, m2=m2)
        step = (m1 / (1 - cfg.momentum ** t)) \
            / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
        new_model = normalize(set_params(model, get_params(model) - lr * step))
        return new_model, meta_objective(new_model, ds, split, cfg.ridge)

    if cfg.optimizer == "momentum":
        vel = opt_state.get("velocity")
        if vel is None:
            vel = _scale_grads(grads, 0.0)
        vel = _add_grads(_scale_grads(vel, cfg.momentum), grads)
        opt_state["velocity"] = vel
        step_grads = vel
    else:
        step_grads = grads

    new_model = normalize(apply_update(model, step_grads, lr))
    return new_model, meta_objective(new_model, ds, split, cfg.ridge)


def validation_cost(model: KernelModel, val_sets, ridge: float) -> float:
    """Two-segment validation: fit a on the first half, score the second half.

    Returns the mean squared residual norm per sample, averaged over
    conditions.
    """
    scores = []
    for ds in val_sets:
        half = len(ds) // 2
        if half < 1 or len(ds) - half < 1:
            continue
        a = a_ls(model, ds.Q[:half], ds.DQ[:half], ds.F[:half], ridge)
        c = cost_j(model, a, ds.Q[half:], ds.DQ[half:], ds.F[half:], ds.dt)
        scores.append(c / (ds.dt * (len(ds) - half)))
    return float(np.mean(scores)) if scores else float("nan")


def meta_train(datasets, cfg: MetaConfig):
    """Meta-train a kernel model over per-condition datasets.

    Runs seeded epochs of per-condition update steps in shuffled order and
    keeps the best-by-validation snapshot.  Returns (model, curve) where
    curve rows are (epoch, train_cost, val_cost), both expressed as mean
    squared residual per sample; row 0 evaluates the untrained model.
    """
    if len(datasets) < 1:
        raise BadParams("need at least one condition dataset")
    n = datasets[0].Q.shape[1]
    rng = rng_from_seed(cfg.seed)

    train_sets, val_sets = [], []
    for ds in datasets:
        n_val = int(round(cfg.val_fraction * len(ds)))
        if n_val >= 2:
            train_sets.append(ds.slice(np.arange(len(ds) - n_val)))
            val_sets.append(ds.slice(np.arange(len(ds) - n_val, len(ds))))
        else:
            train_sets.append(ds)

    model = build_kernel_model(cfg.formulation, n=n, m=cfg.m,
                               widths=tuple(cfg.widths),
                               sigma_bar=cfg.sigma_bar, seed=cfg.seed)
    model = set_standardization(
        model,
        np.vstack([ds.Q for ds in train_sets]),
        np.vstack([ds.DQ for ds in train_sets]),
    )

    def full_cost(mdl):
        vals = []
        for ds in train_sets:
            a = a_ls(mdl, ds.Q, ds.DQ, ds.F, cfg.ridge)
            vals.append(cost_j(mdl, a, ds.Q, ds.DQ, ds.F, ds.dt)
                        / (ds.dt * len(ds)))
        return float(np.mean(vals))

    opt_state: dict = {}
    curve = [(0, full_cost(model), validation_cost(model, val_sets, cfg.ridge))]
    best_model, best_val = model, curve[0][2]
    train_trace = [curve[0][1]]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_sets))
        epoch_costs = []
        for i in order:
            ds = train_sets[i]
            model, cost = meta_step(model, ds, cfg, rng, opt_state)
            denom = ds.dt * (len(ds) if cfg.full_batch
                             else len(ds) - _split_size(len(ds), model.m, cfg))
            epoch_costs.append(cost / denom)
        train_cost = float(np.mean(epoch_costs))
        val_cost = validation_cost(model, val_sets, cfg.ridge)
        curve.append((epoch, train_cost, val_cost))
        train_trace.append(train_cost)
        if np.isfinite(val_cost) and not val_cost >= best_val:
            best_val, best_model = val_cost, model.copy()
        if _converged(train_trace, cfg.patience, cfg.rel_tol):
            break
    if not np.isfinite(best_val):
        best_model = model
    return best_model, np.array(curve, dtype=float)


def _split_size(L: int, m: int, cfg: MetaConfig) -> int:
    K = cfg.k_adapt if cfg.k_adapt is not None else max(2 * m, int(round(0.2 * L)))
    return min(max(K, 1), L - 1)


def _converged(trace, patience: int, rel_tol: float) -> bool:
    if len(trace) <= patience:
        return False
    ref = trace[-1 - patience]
    return (ref - trace[-1]) < rel_tol * max(ref, 1e-12)


# ---------------------------------------------------------------------------
# data collection in simulation

def collect_training_data(plant, conditions, gains, model_baseline,
                          duration: float, dt: float, traj_params: dict,
                          seed: int = 0):
    """Fly a seeded random-walk per condition and record (q, dq, f) triples.

    The baseline controller is the constant-kernel adaptive controller;
    the recorded force is the ground-truth disturbance at each step.
    Returns one ConditionDataset per condition.
    """
    from .adapt import run_controller
    from .dynamics import WindSchedule
    from .harness import RandomWalkTrajectory

    datasets = []
    for i, cond in enumerate(conditions):
        traj = RandomWalkTrajectory(
            center=traj_params.get("center", (0.0, 0.0, 1.5)),
            half_width=traj_params.get("half_width", 0.5),
            hold=traj_params.get("hold", 1.0),
            t_final=duration,
            seed=seed + i,
        )
        schedule = WindSchedule(times=np.array([0.0]), conditions=[cond],
                                t_final=duration + 1.0)
        log = run_controller(plant, model_baseline, gains, traj, schedule,
                             t_f=duration, dt=dt, seed=seed + 1000 + i)
        datasets.append(ConditionDataset(
            label=cond.label or f"condition_{i}",
            Q=log.q, DQ=log.dq, F=log.f_true, dt=dt,
            meta={"wind_speed": float(np.linalg.norm(cond.v_w))},
        ))
    return datasets


# ---------------------------------------------------------------------------
# dataset files: CSV with a JSON sidecar

DATASET_COLUMNS = "t,qx,qy,qz,vx,vy,vz,fx,fy,fz"


def save_dataset(ds: ConditionDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{ds.label}.csv"
    t = np.arange(len(ds)) * ds.dt
    with open(csv_path, "w") as fh:
        fh.write(DATASET_COLUMNS + "\n")
        for k in range(len(ds)):
            row = [t[k], *ds.Q[k], *ds.DQ[k], *ds.F[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {"label": ds.label, "dt": ds.dt, "n_samples": len(ds)}
    sidecar.update(ds.meta)
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
    return csv_path


def load_dataset(csv_path) -> ConditionDataset:
    csv_path = Path(csv_path)
    with open(csv_path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    raw = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    raw = np.atleast_2d(raw)
    if raw.shape[1] != 10:
        raise BadParams(f"{csv_path} must have columns {DATASET_COLUMNS}")
    meta = {k: v for k, v in sidecar.items()
            if k not in ("label", "dt", "n_samples")}
    return ConditionDataset(label=sidecar["label"], Q=raw[:, 1:4],
                            DQ=raw[:, 4:7], F=raw[:, 7:10],
                            dt=float(sidecar["dt"]), meta=meta)


def load_datasets(data_dir):
    paths = sorted(Path(data_dir).glob("*.csv"))
    if not paths:
        raise BadParams(f"no dataset CSV files in {data_dir}")
    return [load_dataset(p) for p in paths]
