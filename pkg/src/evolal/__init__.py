"""Offline apprenticeship learning from evolving expert demonstrations.

The pipeline partitions trajectories into time-aware regimes, clusters
the resulting sub-trajectories with an EM mixture of energy-regularized
policies, fits a high-level reward over (regime, intent) pairs, and
feeds that reward back into the partition's switch penalty.
"""

from .core import (Action, Dataset, FeatureSchema, Standardization, Step,
                   Trajectory, Window, apply_standardization,
                   fit_standardization, one_hot, stack_windows, standardize,
                   window_trajectory)
from .errors import (ConditioningError, ConfigError, ConvergenceError,
                     DegenerateInputError, EvolalError, LeakageError,
                     ModelStateError, ParseError, SchemaError)
from .ingest import (FoldPlan, QLGLabel, Quantizer, StudentRecord,
                     parse_dataset, qlg_filter, qlg_label,
                     records_to_dataset, temporal_folds, write_dataset)
from .partition import (ClusterProfile, PartitionConfig, PartitionModel,
                        assign_labels, bic_score, default_tau,
                        fit_inverse_covariance, fit_partition, fit_profile,
                        predict_labels, select_q, step_labels,
                        switch_penalties, window_loglik)
from .policynet import HIDDEN, Adam, PolicyNet, TrainConfig, grad_check
from .edm import EDMConfig, EDMResult, sgld_negatives, train_edm, \
    train_weighted_bc
from .emedm import MixtureModel, demo_loglik, e_step, fit_mixture, \
    predict_stepwise
from .hlirl import (HighLevelMDP, RegulatorConfig, RewardRegulator,
                    bellman_residual, build_high_level_mdp, fit_ml_irl,
                    step_rewards, value_iteration)
from .themes import (SubTrajectory, ThemesConfig, ThemesModel,
                     cut_subtrajectories, fit_themes, merge_short_runs,
                     predict_themes)
from .baselines import (DQNConfig, GPConfig, gp_redistribute, train_bc,
                        train_dqn)
from .evaluation import (MethodConfigs, MetricReport, RankComparison,
                         adjusted_rand_index, build_methods,
                         compare_methods, compute_metrics, conover_posthoc,
                         friedman_test, ordinal_benchmark,
                         run_temporal_cv)
from .synth import (EmitterConfig, GridworldConfig, GroundTruth,
                    boltzmann_demos, gen_emitter, gen_emitter_records,
                    gen_gridworld, random_mdp, write_emitter)

__version__ = "0.1.0"
