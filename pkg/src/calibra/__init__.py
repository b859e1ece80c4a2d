"""Multicalibration of elicitable properties and Bayes pairs, batch and online."""
from .audit import (CalibrationReport, JointCalibrationReport, batch_error_gamma, batch_error_v,
                    eval_property, joint_error, online_k2)
from .batch import (ConvergenceTrace, DiscretizedPredictor, UpdateRecord, apply_predictor,
                    batch_multicalibrate, batch_multicalibrate_v)
from .dataset import (ExactDataset, GroupFamily, SampleDataset, find_cvar_cxls_violation, groups_from_config,
                      load_csv, make_two_point_dataset, make_variance_counterexample, mixture_distribution,
                      synth_bounded_density)
from .errors import (AdversaryError, CalibraError, ConfigError, DataError, EmptyGroup, EmptyRegion,
                     NonTermination, NotFound, SolverError)
from .joint import JointConfig, JointPredictor, build_level_set_groups, joint_multicalibrate
from .online import Transcript, run_amf_matrix_game, run_online, solve_stage_game, stage_loss
from .properties import (ConditionalIdFamily, FiniteDistribution, PropertySpec, bayes_pair_family,
                         expected_id, expected_score, mean_property, mean_variance_family,
                         quantile_cvar_family, quantile_property, rescaled_pinball_score)

__version__ = "0.1.0"

__all__ = [
    "CalibrationReport",
    "JointCalibrationReport",
    "batch_error_gamma",
    "batch_error_v",
    "eval_property",
    "joint_error",
    "online_k2",
    "ConvergenceTrace",
    "DiscretizedPredictor",
    "UpdateRecord",
    "apply_predictor",
    "batch_multicalibrate",
    "batch_multicalibrate_v",
    "ExactDataset",
    "GroupFamily",
    "SampleDataset",
    "find_cvar_cxls_violation",
    "groups_from_config",
    "load_csv",
    "make_two_point_dataset",
    "make_variance_counterexample",
    "mixture_distribution",
    "synth_bounded_density",
    "AdversaryError",
    "CalibraError",
    "ConfigError",
    "DataError",
    "EmptyGroup",
    "EmptyRegion",
    "NonTermination",
    "NotFound",
    "SolverError",
    "JointConfig",
    "JointPredictor",
    "build_level_set_groups",
    "joint_multicalibrate",
    "Transcript",
    "run_amf_matrix_game",
    "run_online",
    "solve_stage_game",
    "stage_loss",
    "ConditionalIdFamily",
    "FiniteDistribution",
    "PropertySpec",
    "bayes_pair_family",
    "expected_id",
    "expected_score",
    "mean_property",
    "mean_variance_family",
    "quantile_cvar_family",
    "quantile_property",
    "rescaled_pinball_score",
]
