"""Shared numerical substrate: least squares, fixed-step RK4, first-order
filtering, and power iteration.

Everything here operates on plain numpy arrays and is a pure function of
its inputs.  The single stateful object is :class:`FirstOrderFilter`,
which owns its internal state (one owner per filter instance).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFinite, RankDeficient, ShapeMismatch

# Condition-number cap (on the normal matrix A^T A) for ridge-free solves.
COND_CAP = 1e8


def rng_from_seed(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; every stochastic routine funnels through this."""
    return np.random.Generator(np.random.PCG64(seed))


def solve_least_squares(A: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve argmin_x ||A x - b||^2 + ridge * ||x||^2 by a stable factorization.

    Parameters
    ----------
    A : (K, m) array
    b : (K,) or (K, n) array
    ridge : nonnegative Tikhonov weight.  With ridge == 0 the normal matrix
        must have condition number below ``COND_CAP``.

    Returns
    -------
    x : (m,) or (m, n) array satisfying A^T (A x - b) + ridge * x = 0 to
        solver tolerance.

    Raises
    ------
    ShapeMismatch
        If A is not 2-D or b has a different number of rows.
    RankDeficient
        If ridge == 0 and A^T A is singular beyond tolerance.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2:
        raise ShapeMismatch(f"A must be 2-D, got shape {A.shape}")
    if b.ndim not in (1, 2) or b.shape[0] != A.shape[0]:
        raise ShapeMismatch(f"b rows {b.shape} do not match A rows {A.shape}")
    if ridge < 0.0:
        raise ValueError("ridge must be >= 0")

    if ridge == 0.0:
        sv = np.linalg.svd(A, compute_uv=False)
        smax, smin = sv[0], sv[-1]
        if smin == 0.0 or (smax / smin) ** 2 > COND_CAP:
            cond2 = np.inf if smin == 0.0 else (smax / smin) ** 2
            raise RankDeficient(
                f"cond(A^T A) = {cond2:.3e} exceeds cap {COND_CAP:.1e}; "
                "pass a positive ridge"
            )
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
        return x

    # Augmented system keeps the solve factorization-based for ridge > 0.
    m = A.shape[1]
    tail_shape = (m,) if b.ndim == 1 else (m, b.shape[1])
    A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(m)])
    b_aug = np.concatenate([b, np.zeros(tail_shape)], axis=0)
    x, *_ = np.linalg.lstsq(A_aug, b_aug, rcond=None)
    return x


def rk4_step(field: Callable, x: np.ndarray, u, dt: float) -> np.ndarray:
    """One fixed-step 4th-order Runge-Kutta advance of dx/dt = field(x, u).

    ``u`` is held constant over the step (zero-order hold).  Raises
    :class:`NonFinite` if the result leaves the finite range.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    k1 = field(x, u)
    k2 = field(x + 0.5 * dt * k1, u)
    k3 = field(x + 0.5 * dt * k2, u)
    k4 = field(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFinite("RK4 step produced a non-finite state")
    return out


def zoh_lowpass(x: np.ndarray, u: np.ndarray, dt: float, tau: float) -> np.ndarray:
    """Exact zero-order-hold update of tau * xdot = u - x over one step.

    DC gain is exactly 1: a constant input held forever converges to itself.
    """
    alpha = np.exp(-dt / tau)
    return alpha * x + (1.0 - alpha) * u


class FirstOrderFilter:
    """Stable first-order low-pass with unit DC gain.

    The discrete update is the exact zero-order-hold discretization of
    tau * xdot = u - x.  State dimensions are fixed by the first update.
    """

    def __init__(self, tau: float):
        if tau <= 0.0:
            raise ValueError("filter time constant must be > 0")
        self.tau = float(tau)
        self.state: np.ndarray | None = None

    def update(self, u: np.ndarray, dt: float) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.state is None:
            self.state = np.zeros_like(u)
        elif self.state.shape != u.shape:
            raise ShapeMismatch(
                f"filter input shape {u.shape} does not match state {self.state.shape}"
            )
        self.state = zoh_lowpass(self.state, u, dt, self.tau)
        return self.state


def spectral_norm(W: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of the largest singular value of W.

    The estimate is monotonically non-decreasing in ``iters`` and
    deterministic for a fixed seed.  A zero matrix returns 0.
    """
    W = np.asarray(W, dtype=float)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if W.size == 0 or not W.any():
        return 0.0
    rng = rng_from_seed(seed)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # landed exactly in the null space; restart deterministically
            v = rng.standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = W.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        sigma = np.linalg.norm(W @ v)
    return float(sigma)
