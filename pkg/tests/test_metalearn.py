import numpy as np
import pytest

from conftest import make_teacher_student_data
from windadapt.kernels import build_kernel_model, eval_phi_batch
from windadapt.metalearn import (ConditionDataset, MetaConfig, a_ls, cost_j,
                                 draw_split, flatten_grads, get_params,
                                 load_dataset, meta_gradient, meta_objective,
                                 meta_step, meta_train, save_dataset,
                                 set_params, validation_cost)
from windadapt.numerics import rng_from_seed, spectral_norm


def brute_force_a(model, Q, DQ, F, ridge=0.0):
    Phi = eval_phi_batch(model, Q, DQ)
    L, n, da = Phi.shape
    A = Phi.reshape(L * n, da)
    b = F.reshape(L * n)
    return np.linalg.solve(A.T @ A + ridge * np.eye(da), A.T @ b)


class TestInnerSolve:
    def test_constant_kernel_mean(self):
        model = build_kernel_model("constant", n=3)
        F = np.tile([2.0, -1.0, 0.5], (8, 1))
        a = a_ls(model, np.zeros((8, 3)), np.zeros((8, 3)), F)
        np.testing.assert_allclose(a, [2.0, -1.0, 0.5], atol=1e-7)

    def test_realizable_exact(self):
        model = build_kernel_model("vector", n=3, m=4, widths=(8,), seed=0)
        rng = rng_from_seed(1)
        Q, DQ = rng.standard_normal((30, 3)), rng.standard_normal((30, 3))
        a0 = rng.standard_normal(4)
        F = eval_phi_batch(model, Q, DQ) @ a0
        np.testing.assert_allclose(a_ls(model, Q, DQ, F), a0, atol=1e-8)

    def test_matches_normal_equation_oracle(self):
        model = build_kernel_model("scalar", n=3, m=4, widths=(8,), seed=2)
        rng = rng_from_seed(3)
        Q, DQ = rng.standard_normal((40, 3)), rng.standard_normal((40, 3))
        F = rng.standard_normal((40, 3))
        a = a_ls(model, Q, DQ, F, ridge=1e-9)
        ref = brute_force_a(model, Q, DQ, F, ridge=1e-9)
        np.testing.assert_allclose(a, ref, rtol=1e-6, atol=1e-9)

    def test_first_order_optimality(self):
        # perturbing the inner solution never decreases the adaptation cost
        model = build_kernel_model("vector", n=3, m=3, widths=(6,), seed=4)
        rng = rng_from_seed(5)
        Q, DQ = rng.standard_normal((25, 3)), rng.standard_normal((25, 3))
        F = rng.standard_normal((25, 3))
        a = a_ls(model, Q, DQ, F)
        c0 = cost_j(model, a, Q, DQ, F, 0.01)
        for _ in range(20):
            da = 1e-4 * rng.standard_normal(a.size)
            assert cost_j(model, a + da, Q, DQ, F, 0.01) >= c0 - 1e-12

    def test_split_equivalence_grid_search(self):
        # scanning a one-parameter coefficient never beats the exact solve
        model = build_kernel_model("vector", n=3, m=1, widths=(6,), seed=6)
        rng = rng_from_seed(7)
        Q, DQ = rng.standard_normal((15, 3)), rng.standard_normal((15, 3))
        F = rng.standard_normal((15, 3))
        a = a_ls(model, Q, DQ, F)
        best = cost_j(model, a, Q, DQ, F, 0.01)
        grid = np.linspace(a[0] - 2.0, a[0] + 2.0, 401)
        for g in grid:
            assert cost_j(model, np.array([g]), Q, DQ, F, 0.01) >= best - 1e-12


class TestCost:
    def test_perfect_fit_zero(self):
        model = build_kernel_model("constant", n=3)
        F = np.tile([1.0, 1.0, 1.0], (4, 1))
        assert cost_j(model, np.ones(3), np.zeros((4, 3)), np.zeros((4, 3)),
                      F, 0.01) == 0.0

    def test_single_sample_by_hand(self):
        # residual (3, 4, 0), dt 0.01 -> 0.01 * 25 = 0.25
        model = build_kernel_model("constant", n=3)
        F = np.array([[3.0, 4.0, 0.0]])
        c = cost_j(model, np.zeros(3), np.zeros((1, 3)), np.zeros((1, 3)),
                   F, 0.01)
        assert abs(c - 0.25) < 1e-12

    def test_linear_in_dt(self):
        model = build_kernel_model("constant", n=3)
        rng = rng_from_seed(8)
        F = rng.standard_normal((6, 3))
        c1 = cost_j(model, np.zeros(3), np.zeros((6, 3)), np.zeros((6, 3)), F, 0.01)
        c2 = cost_j(model, np.zeros(3), np.zeros((6, 3)), np.zeros((6, 3)), F, 0.02)
        assert abs(c2 - 2.0 * c1) < 1e-12


class TestMetaGradient:
    def _setup(self, formulation="vector", m=3, widths=(8,), seed=0, L=24):
        model = build_kernel_model(formulation, n=3, m=m, widths=widths,
                                   seed=seed)
        rng = rng_from_seed(seed + 100)
        Q, DQ = rng.standard_normal((L, 3)), rng.standard_normal((L, 3))
        F = rng.standard_normal((L, 3))
        split = draw_split(L, model.m, rng)
        return model, Q, DQ, F, split, rng

    def test_stop_gradient_matches_fd(self):
        model, Q, DQ, F, split, rng = self._setup()
        ia, it = split.adapt_idx, split.train_idx
        a = a_ls(model, Q[ia], DQ[ia], F[ia])
        g = flatten_grads(meta_gradient(model, a, Q[it], DQ[it], F[it], 0.01))
        theta = get_params(model)
        h = 1e-5
        idx = rng.choice(theta.size, size=50, replace=False)
        for i in idx:
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            cp = cost_j(set_params(model, tp), a, Q[it], DQ[it], F[it], 0.01)
            cm = cost_j(set_params(model, tm), a, Q[it], DQ[it], F[it], 0.01)
            g_fd = (cp - cm) / (2 * h)
            assert abs(g_fd - g[i]) / max(abs(g_fd), abs(g[i]), 1e-10) < 1e-3

    @pytest.mark.parametrize("formulation", ["vector", "scalar"])
    def test_full_policy_matches_fd_of_whole_pipeline(self, formulation):
        model, Q, DQ, F, split, rng = self._setup(formulation=formulation,
                                                  seed=3)
        ia, it = split.adapt_idx, split.train_idx
        ridge = 1e-6  # well above fd noise so the branch is smooth

        def pipeline(mdl):
            a = a_ls(mdl, Q[ia], DQ[ia], F[ia], ridge)
            return cost_j(mdl, a, Q[it], DQ[it], F[it], 0.01)

        a = a_ls(model, Q[ia], DQ[ia], F[ia], ridge)
        g = flatten_grads(meta_gradient(
            model, a, Q[it], DQ[it], F[it], 0.01, policy="full",
            adapt_subset=(Q[ia], DQ[ia], F[ia]), ridge=ridge))
        theta = get_params(model)
        h = 1e-5
        idx = rng.choice(theta.size, size=40, replace=False)
        for i in idx:
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            g_fd = (pipeline(set_params(model, tp))
                    - pipeline(set_params(model, tm))) / (2 * h)
            assert abs(g_fd - g[i]) / max(abs(g_fd), abs(g[i]), 1e-10) < 1e-3


class TestMetaStep:
    def test_zero_learning_rate_no_op(self):
        _, datasets, _ = make_teacher_student_data(1, 60, seed=9)
        model = build_kernel_model("vector", n=3, m=3, widths=(8,), seed=10)
        cfg = MetaConfig(formulation="vector", m=3, widths=(8,), lr=0.0,
                         epochs=1)
        out, _ = meta_step(model, datasets[0], cfg, rng_from_seed(0))
        for n1, n2 in zip(model.nets, out.nets):
            for W1, W2 in zip(n1.weights, n2.weights):
                np.testing.assert_array_equal(W1, W2)

    def test_full_batch_line_search_monotone(self):
        _, datasets, _ = make_teacher_student_data(1, 150, seed=11)
        ds = datasets[0]
        model = build_kernel_model("vector", n=3, m=3, widths=(8,), seed=12)
        cfg = MetaConfig(formulation="vector", m=3, widths=(8,), lr=0.05,
                         epochs=1, full_batch=True, line_search=True)
        rng = rng_from_seed(1)
        opt_state = {}
        costs = []
        for _ in range(40):
            model, cost = meta_step(model, ds, cfg, rng, opt_state)
            costs.append(cost)
        assert all(c1 >= c2 - 1e-12 for c1, c2 in zip(costs, costs[1:]))

    def test_normalization_preserved_after_steps(self):
        _, datasets, _ = make_teacher_student_data(1, 80, seed=13)
        model = build_kernel_model("vector", n=3, m=3, widths=(8,), seed=14)
        cfg = MetaConfig(formulation="vector", m=3, widths=(8,), lr=0.5,
                         epochs=1)
        rng = rng_from_seed(2)
        for _ in range(10):
            model, _ = meta_step(model, datasets[0], cfg, rng)
            for net in model.nets:
                for W in net.weights:
                    assert spectral_norm(W, iters=100) <= model.sigma_bar + 1e-6


class TestMetaTrain:
    def test_teacher_student_cost_collapse(self):
        _, datasets, _ = make_teacher_student_data(3, 600, seed=15)
        cfg = MetaConfig(formulation="vector", m=10, widths=(48,), lr=0.005,
                         epochs=400, seed=3, optimizer="adam", patience=400)
        model, curve = meta_train(datasets, cfg)
        assert curve[-1, 1] <= 1e-3 * curve[0, 1]

    def test_single_condition_full_batch_monotone_curve(self):
        _, datasets, _ = make_teacher_student_data(1, 200, seed=16)
        cfg = MetaConfig(formulation="vector", m=4, widths=(8,), lr=0.05,
                         epochs=30, seed=4, full_batch=True, line_search=True)
        _, curve = meta_train(datasets, cfg)
        tc = curve[:, 1]
        assert np.all(tc[:-1] >= tc[1:] - 1e-12)

    def test_deterministic_curves(self):
        _, datasets, _ = make_teacher_student_data(2, 120, seed=17)
        cfg = MetaConfig(formulation="scalar", m=3, widths=(8,), lr=0.05,
                         epochs=8, seed=5)
        _, c1 = meta_train(datasets, cfg)
        _, c2 = meta_train(datasets, cfg)
        np.testing.assert_array_equal(c1, c2)

    def test_held_out_condition_beats_constant(self):
        teacher, datasets, _ = make_teacher_student_data(5, 300, seed=18)
        cfg = MetaConfig(formulation="vector", m=6, widths=(16,), lr=0.05,
                         epochs=60, seed=6, optimizer="momentum")
        model, _ = meta_train(datasets, cfg)

        rng = rng_from_seed(99)
        Q = rng.uniform(-1, 1, (200, 3))
        DQ = rng.uniform(-2, 2, (200, 3))
        a_new = rng.standard_normal(teacher.dim_a)
        F = eval_phi_batch(teacher, Q, DQ) @ a_new
        held = ConditionDataset("held", Q, DQ, F, 0.01)

        def protocol_rmse(mdl):
            half = len(held) // 2
            a = a_ls(mdl, held.Q[:half], held.DQ[:half], held.F[:half])
            res = eval_phi_batch(mdl, held.Q[half:], held.DQ[half:]) @ a \
                - held.F[half:]
            return float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))

        const = build_kernel_model("constant", n=3)
        assert protocol_rmse(model) < protocol_rmse(const)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        rng = rng_from_seed(20)
        ds = ConditionDataset("wind_2.5", rng.standard_normal((12, 3)),
                              rng.standard_normal((12, 3)),
                              rng.standard_normal((12, 3)), 0.01,
                              meta={"wind_speed": 2.5})
        path = save_dataset(ds, tmp_path)
        loaded = load_dataset(path)
        assert loaded.label == ds.label
        assert loaded.dt == ds.dt
        assert loaded.meta["wind_speed"] == 2.5
        np.testing.assert_allclose(loaded.Q, ds.Q, atol=0)
        np.testing.assert_allclose(loaded.DQ, ds.DQ, atol=0)
        np.testing.assert_allclose(loaded.F, ds.F, atol=0)
