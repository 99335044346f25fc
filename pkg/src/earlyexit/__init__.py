"""Confidence-based early-exit decoding with calibrated exit thresholds."""

from .calibration import (
    ConsistencyObjective,
    consistency_loss,
    fst_calibrate,
    hb_pvalue,
    hoeffding_pvalue,
    lambda_grid,
    run_trials,
)
from .confidence import ConfidenceKind, ThresholdPolicy, decayed_threshold
from .engine import (
    ModelBackend,
    PropagationMode,
    bench,
    generate_adaptive,
    generate_full,
    generate_static,
)
from .model import ModelConfig, Weights, init_weights, load_weights, save_weights
from .synthetic import SyntheticModel, SyntheticSpec, SynthTask, gen_dataset

__all__ = [
    "ConfidenceKind",
    "ConsistencyObjective",
    "ModelBackend",
    "ModelConfig",
    "PropagationMode",
    "SynthTask",
    "SyntheticModel",
    "SyntheticSpec",
    "ThresholdPolicy",
    "Weights",
    "bench",
    "consistency_loss",
    "decayed_threshold",
    "fst_calibrate",
    "gen_dataset",
    "generate_adaptive",
    "generate_full",
    "generate_static",
    "hb_pvalue",
    "hoeffding_pvalue",
    "init_weights",
    "lambda_grid",
    "load_weights",
    "run_trials",
    "save_weights",
]
