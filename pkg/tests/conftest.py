"""Shared fixtures: teacher-student data builders and the (expensive)
collect -> train -> compare pipeline reused by the acceptance suite."""

import numpy as np
import pytest

from windadapt.dynamics import wind_condition
from windadapt.harness import RunConfig, compare_kernels, constant_kernel
from windadapt.kernels import build_kernel_model, eval_phi_batch
from windadapt.metalearn import (ConditionDataset, MetaConfig,
                                 collect_training_data, meta_train)
from windadapt.numerics import rng_from_seed


def make_teacher_student_data(n_conditions=5, n_samples=400, m_teacher=3,
                              widths=(8,), seed=0, n=3):
    """Datasets realizable by a frozen random teacher model.

    Each condition uses its own coefficient vector, so the conditions span
    the teacher's kernel space.
    """
    teacher = build_kernel_model("vector", n=n, m=m_teacher, widths=widths,
                                 seed=seed)
    rng = rng_from_seed(seed + 1)
    datasets, coeffs = [], []
    for i in range(n_conditions):
        Q = rng.uniform(-1.0, 1.0, size=(n_samples, n))
        DQ = rng.uniform(-2.0, 2.0, size=(n_samples, n))
        a_i = rng.standard_normal(m_teacher)
        F = eval_phi_batch(teacher, Q, DQ) @ a_i
        datasets.append(ConditionDataset(f"cond{i}", Q, DQ, F, dt=0.01))
        coeffs.append(a_i)
    return teacher, datasets, coeffs


@pytest.fixture(scope="session")
def pipeline_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def collected_datasets(pipeline_cfg):
    cfg = pipeline_cfg
    plant = cfg.plant()
    conditions = [wind_condition(v, **cfg.wind_family(), label=f"wind_{v:g}")
                  for v in cfg.collect_speeds]
    return collect_training_data(
        plant, conditions, cfg.gains(), constant_kernel(),
        duration=cfg.collect_duration, dt=cfg.dt,
        traj_params={"center": cfg.center, "half_width": cfg.cube_half_width,
                     "hold": cfg.hold_interval},
        seed=1234)


def _train(datasets, formulation, cfg):
    mcfg = MetaConfig(formulation=formulation, m=cfg.train_m,
                      widths=tuple(cfg.train_widths),
                      sigma_bar=cfg.train_sigma_bar, lr=cfg.train_lr,
                      epochs=cfg.train_epochs, optimizer=cfg.train_optimizer,
                      seed=7)
    model, curve = meta_train(datasets, mcfg)
    return model, curve


@pytest.fixture(scope="session")
def trained_vector(collected_datasets, pipeline_cfg):
    return _train(collected_datasets, "vector", pipeline_cfg)


@pytest.fixture(scope="session")
def trained_scalar(collected_datasets, pipeline_cfg):
    return _train(collected_datasets, "scalar", pipeline_cfg)


@pytest.fixture(scope="session")
def trained_models(trained_vector, trained_scalar):
    return {"vector": trained_vector[0], "scalar": trained_scalar[0]}


@pytest.fixture(scope="session")
def comparison_result(trained_models, pipeline_cfg):
    return compare_kernels(("hover", "randomwalk", "fig8"),
                           ("constant", "vector", "scalar"),
                           pipeline_cfg, seeds=range(10),
                           models=trained_models)
