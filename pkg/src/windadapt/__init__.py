"""Meta-learned neural-network kernels with a regularized composite
adaptive controller, specialized to a quadrotor point mass in wind."""

from .adapt import (AdaptiveState, BoundReport, EpisodeLog, Gains,
                    adaptation_step, control_law, init_adaptive_state,
                    make_gains, run_controller, theorem_bound, update_filters)
from .dynamics import (QuadrotorPlant, State, WindCondition, WindSchedule,
                       calm_condition, constant_schedule, disturbance,
                       hover_schedule, step_plant, stepped_schedule,
                       wind_condition)
from .errors import (BadParams, CovarianceDivergence, NonFinite, OutOfRange,
                     RankDeficient, ShapeMismatch)
from .harness import (Fig8Trajectory, HoverTrajectory, MetricsReport,
                      RandomWalkTrajectory, RunConfig, compare_kernels,
                      compute_metrics, gen_trajectory, parse_config,
                      run_scenario)
from .kernels import (KernelModel, build_kernel_model, eval_kernel,
                      kernel_jacobian_theta, lipschitz_bound,
                      load_kernel_model, normalize, representation_error,
                      save_kernel_model)
from .metalearn import (ConditionDataset, MetaConfig, a_ls,
                        collect_training_data, cost_j, load_datasets,
                        meta_step, meta_train, save_dataset)
from .numerics import (FirstOrderFilter, rk4_step, rng_from_seed,
                       solve_least_squares, spectral_norm)

__version__ = "0.1.0"
