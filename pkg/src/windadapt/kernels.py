"""Neural-network regressor kernels.

All three formulations share one interface: the regressor ``phi(q, dq)`` is
an ``n x dim_a`` matrix and the disturbance estimate is ``phi @ a`` for a
linear coefficient vector ``a`` that is adapted online.

constant  phi = I_n; a has length n.  With only a tracking-error update
          this reduces to integral control, so it is the baseline.
vector    m independent tanh MLPs, each mapping the 2n-vector (q, dq) to
          an n-vector; column i of phi is the i-th network output; a has
          length m.
scalar    one shared tanh trunk mapping (q, dq) to m scalars (its last
          hidden states); phi is block-diagonal with n identical 1 x m
          blocks, so a has length m * n laid out block-wise per axis.

Every weight matrix is rescaled so its spectral norm stays at or below a
per-layer bound, which caps the end-to-end Lipschitz constant of the
regressor during training and online adaptation.  Bias vectors do not
affect the Lipschitz constant and are left unscaled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadParams, ShapeMismatch
from .numerics import rng_from_seed, solve_least_squares

MODEL_FORMAT_VERSION = 1

FORMULATIONS = ("constant", "vector", "scalar")


class Mlp:
    """Dense tanh network with analytic backprop.

    weights[l] has shape (out, in); hidden layers use tanh; the output
    layer is linear unless ``final_tanh`` is set (the scalar trunk treats
    its outputs as hidden states, so they stay tanh-bounded).
    """

    def __init__(self, weights, biases, final_tanh: bool = False):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.final_tanh = bool(final_tanh)
        if len(self.weights) != len(self.biases):
            raise BadParams("one bias vector per weight matrix required")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.final_tanh)

    def forward(self, X: np.ndarray):
        """Evaluate on a batch X (L, in_dim); returns (out, cache)."""
        a = X
        acts = [a]          # post-activation values entering each layer
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            last = l == len(self.weights) - 1
            a = np.tanh(z) if (not last or self.final_tanh) else z
            acts.append(a)
        return a, acts

    def backward(self, acts, dout: np.ndarray):
        """Gradients of sum(dout * out) w.r.t. weights and biases.

        ``acts`` is the cache from :meth:`forward`; ``dout`` is the
        cotangent on the network output (L, out_dim).
        """
        grads_W = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = dout
        for l in range(len(self.weights) - 1, -1, -1):
            last = l == len(self.weights) - 1
            if not last or self.final_tanh:
                # tanh'(z) = 1 - tanh(z)^2, using the cached post-activation
                delta = delta * (1.0 - acts[l + 1] ** 2)
            grads_W[l] = delta.T @ acts[l]
            grads_b[l] = delta.sum(axis=0)
            if l > 0:
                delta = delta @ self.weights[l]
        return list(zip(grads_W, grads_b))


@dataclass
class KernelModel:
    """Regressor model: formulation tag, networks, and input standardization."""

    formulation: str
    n: int
    m: int
    sigma_bar: float
    nets: list = field(default_factory=list)
    in_mean: np.ndarray = None
    in_scale: np.ndarray = None

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise BadParams(f"unknown formulation {self.formulation!r}")
        if self.in_mean is None:
            self.in_mean = np.zeros(2 * self.n)
        if self.in_scale is None:
            self.in_scale = np.ones(2 * self.n)
        self.in_mean = np.asarray(self.in_mean, dtype=float)
        self.in_scale = np.asarray(self.in_scale, dtype=float)

    @property
    def dim_a(self) -> int:
        if self.formulation == "constant":
            return self.n
        if self.formulation == "vector":
            return self.m
        return self.m * self.n

    def copy(self) -> "KernelModel":
        return replace(self, nets=[net.copy() for net in self.nets],
                       in_mean=self.in_mean.copy(), in_scale=self.in_scale.copy())


def build_kernel_model(formulation: str, n: int = 3, m: int = 10,
                       widths=(32, 32), sigma_bar: float = 2.0,
                       seed: int = 0) -> KernelModel:
    """Fresh model with 1/sqrt(fan_in) uniform init, then spectral rescaling."""
    if formulation == "constant":
        return KernelModel(formulation="constant", n=n, m=n, sigma_bar=sigma_bar)
    rng = rng_from_seed(seed)
    if formulation == "vector":
        sizes = [(2 * n, *widths, n)] * m
        final_tanh = False
    elif formulation == "scalar":
        sizes = [(2 * n, *widths, m)]
        final_tanh = True
    else:
        raise BadParams(f"unknown formulation {formulation!r}")
    nets = []
    for dims in sizes:
        Ws, bs = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(din)
            Ws.append(rng.uniform(-bound, bound, size=(dout, din)))
            bs.append(rng.uniform(-bound, bound, size=dout))
        nets.append(Mlp(Ws, bs, final_tanh=final_tanh))
    model = KernelModel(formulation=formulation, n=n, m=m,
                        sigma_bar=sigma_bar, nets=nets)
    return normalize(model)


def set_standardization(model: KernelModel, Q: np.ndarray, DQ: np.ndarray) -> KernelModel:
    """Store per-channel affine standardization computed from training states."""
    X = np.hstack([Q, DQ])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    out = model.copy()
    out.in_mean = mean
    out.in_scale = scale
    return out


def _standardize(model: KernelModel, Q: np.ndarray, DQ: np.ndarray) -> np.ndarray:
    X = np.hstack([np.atleast_2d(Q), np.atleast_2d(DQ)])
    return (X - model.in_mean) / model.in_scale


def eval_phi_batch(model: KernelModel, Q: np.ndarray, DQ: np.ndarray,
                   with_vjp: bool = False):
    """Regressor matrices for a batch of states.

    Returns ``Phi`` with shape (L, n, dim_a).  With ``with_vjp`` also
    returns a closure mapping a cotangent array E (L, n, dim_a) to
    per-network weight gradients (holding the linear coefficients fixed).
    """
    n, m = model.n, model.m
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    DQ = np.atleast_2d(np.asarray(DQ, dtype=float))
    L = Q.shape[0]

    if model.formulation == "constant":
        Phi = np.broadcast_to(np.eye(n), (L, n, n)).copy()
        if not with_vjp:
            return Phi
        return Phi, lambda E: []

    X = _standardize(model, Q, DQ)

    if model.formulation == "vector":
        outs, caches = [], []
        Phi = np.empty((L, n, m))
        for i, net in enumerate(model.nets):
            out, cache = net.forward(X)
            Phi[:, :, i] = out
            caches.append(cache)

        if not with_vjp:
            return Phi

        def vjp(E):
            return [net.backward(cache, E[:, :, i])
                    for i, (net, cache) in enumerate(zip(model.nets, caches))]
        return Phi, vjp

    # scalar: one trunk, block-diagonal replication across the n axes
    trunk = model.nets[0]
    out, cache = trunk.forward(X)          # (L, m)
    Phi = np.zeros((L, n, m * n))
    for j in range(n):
        Phi[:, j, j * m:(j + 1) * m] = out

    if not with_vjp:
        return Phi

    def vjp(E):
        # cotangent on trunk output i collects E over the diagonal blocks
        Er = E.reshape(L, n, n, m)
        dout = np.einsum("ljji->li", Er)
        return [trunk.backward(cache, dout)]
    return Phi, vjp


def eval_kernel(model: KernelModel, q: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Regressor matrix phi(q, dq) of shape (n, dim_a) for a single state."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    if q.shape != (model.n,) or dq.shape != (model.n,):
        raise ShapeMismatch(f"state dimension must be {model.n}")
    return eval_phi_batch(model, q[None, :], dq[None, :])[0]


def kernel_jacobian_theta(model: KernelModel, q, dq, a: np.ndarray,
                          residual: np.ndarray):
    """Gradient over all network weights of ||residual||^2 terms.

    ``residual`` is the prediction-minus-target vector phi @ a - f; the
    linear coefficients are held fixed, so the returned gradient is
    2 * J_phi^T(residual a^T) backpropagated through each network.
    Returns a per-network list of (dW, db) pairs (empty for constant).
    """
    a = np.asarray(a, dtype=float)
    residual = np.asarray(residual, dtype=float)
    if a.shape != (model.dim_a,):
        raise ShapeMismatch(f"a must have length {model.dim_a}")
    if residual.shape != (model.n,):
        raise ShapeMismatch(f"residual must have length {model.n}")
    _, vjp = eval_phi_batch(model, np.atleast_2d(q), np.atleast_2d(dq),
                            with_vjp=True)
    E = 2.0 * np.einsum("j,k->jk", residual, a)[None, :, :]
    return vjp(E)


def normalize(model: KernelModel) -> KernelModel:
    """Rescale any weight matrix whose spectral norm exceeds the bound.

    Matrices already within the bound are left untouched (bitwise), so the
    operation is idempotent.  Biases are never rescaled.
    """
    if model.sigma_bar <= 0.0:
        raise BadParams("spectral bound must be > 0")
    out = model.copy()
    for net in out.nets:
        for l, W in enumerate(net.weights):
            sigma = float(np.linalg.norm(W, 2))
            # relative slack keeps the operation exactly idempotent under
            # roundoff; the bound still holds to well within 1e-6
            if sigma > model.sigma_bar * (1.0 + 1e-12):
                net.weights[l] = W * (model.sigma_bar / sigma)
    return out


def layer_norm_product(model: KernelModel) -> float:
    """Product of per-layer spectral norms for one network (max over nets)."""
    if model.formulation == "constant":
        return 1.0
    prods = []
    for net in model.nets:
        p = 1.0
        for W in net.weights:
            p *= float(np.linalg.norm(W, 2))
        prods.append(p)
    return max(prods)


def lipschitz_bound(model: KernelModel, include_standardization: bool = True) -> float:
    """Upper bound on ||phi(s1) - phi(s2)||_F / ||s1 - s2||_2.

    tanh is 1-Lipschitz, so each network is bounded by the product of its
    layer spectral norms; the input standardization contributes its own
    diagonal scaling.  The vector formulation stacks m networks
    (root-sum-square of the per-net bounds); the scalar formulation
    replicates the trunk output across n axes (factor sqrt(n)).
    """
    if model.formulation == "constant":
        return 0.0
    scale = float(np.max(1.0 / model.in_scale)) if include_standardization else 1.0
    per_net = []
    for net in model.nets:
        p = 1.0
        for W in net.weights:
            p *= float(np.linalg.norm(W, 2))
        per_net.append(p * scale)
    if model.formulation == "vector":
        return float(np.sqrt(np.sum(np.square(per_net))))
    return float(np.sqrt(model.n) * per_net[0])


def representation_error(model: KernelModel, Q: np.ndarray, DQ: np.ndarray,
                         F: np.ndarray, ridge: float = 1e-9):
    """Best dataset-wide linear fit and its worst pointwise residual.

    Returns (a_star, d) where a_star minimizes the summed squared residual
    over the dataset (tiny ridge keeps degenerate batches solvable) and
    d = max_k ||phi_k a_star - f_k||.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if Q.shape[0] == 0:
        raise BadParams("dataset must be non-empty")
    Phi = eval_phi_batch(model, Q, DQ)
    L, n, da = Phi.shape
    a_star = solve_least_squares(Phi.reshape(L * n, da), F.reshape(L * n), ridge)
    res = Phi @ a_star - F
    d = float(np.max(np.linalg.norm(res, axis=1)))
    return a_star, d


# ---------------------------------------------------------------------------
# serialization

def save_kernel_model(model: KernelModel, path) -> None:
    """Write the model as self-describing JSON (weights round-trip bit-exact)."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "formulation": model.formulation,
        "n": model.n,
        "m": model.m,
        "sigma_bar": model.sigma_bar,
        "in_mean": model.in_mean.tolist(),
        "in_scale": model.in_scale.tolist(),
        "nets": [
            {
                "final_tanh": net.final_tanh,
                "weights": [W.tolist() for W in net.weights],
                "biases": [b.tolist() for b in net.biases],
            }
            for net in model.nets
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_kernel_model(path) -> KernelModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise BadParams(f"unsupported model format {doc.get('format_version')!r}")
    nets = [
        Mlp(entry["weights"], entry["biases"], final_tanh=entry["final_tanh"])
        for entry in doc["nets"]
    ]
    for net in nets:
        for arr in (*net.weights, *net.biases):
            if not np.all(np.isfinite(arr)):
                raise BadParams("model file contains non-finite weights")
    return KernelModel(
        formulation=doc["formulation"], n=doc["n"], m=doc["m"],
        sigma_bar=doc["sigma_bar"], nets=nets,
        in_mean=np.array(doc["in_mean"], dtype=float),
        in_scale=np.array(doc["in_scale"], dtype=float),
    )
