"""Selective inference for anomaly regions found by piecewise-linear autoencoders."""

from .conditioning import (AffineLine, DegeneratePieceWarning, PieceResult, init_line,
                           piece_at, propagate_concat, propagate_linear)
from .graph import GraphError, PwlGraph, PwlNode, assemble_detector, forward, forward_errors
from .hypothesis import (AnomalyRegion, Hypothesis, UndefinedHypothesisError, build_eta,
                         estimate_cov, make_synthetic, test_statistic)
from .inference import (SweepBudgetError, TestOutcome, TruncationSet, p_bonferroni,
                        p_naive, p_over_conditioning, run_test, sweep, tn_two_sided_p)
from .linalg import (CovMatrix, FactorizationError, Image, ar1_kron_cov, cholesky_solve,
                     sample_gaussian)
from .noise import CalibrationError, NoiseFamily, calibrate, sample, wasserstein1_to_std_normal
from .vae import (TrainConfig, TrainingDivergedError, VaeModel, WeightFormatError,
                  elbo_loss, load_weights, reconstruct, save_weights, train)

__version__ = "0.1.0"

__all__ = [
    "AffineLine", "AnomalyRegion", "CalibrationError", "CovMatrix",
    "DegeneratePieceWarning", "FactorizationError", "GraphError", "Hypothesis",
    "Image", "NoiseFamily", "PieceResult", "PwlGraph", "PwlNode", "SweepBudgetError",
    "TestOutcome", "TrainConfig", "TrainingDivergedError", "TruncationSet",
    "UndefinedHypothesisError", "VaeModel", "WeightFormatError", "ar1_kron_cov",
    "assemble_detector", "build_eta", "calibrate", "cholesky_solve", "elbo_loss",
    "estimate_cov", "forward", "forward_errors", "init_line", "load_weights",
    "make_synthetic", "p_bonferroni", "p_naive", "p_over_conditioning", "piece_at",
    "propagate_concat", "propagate_linear", "reconstruct", "run_test", "sample",
    "sample_gaussian", "save_weights", "sweep", "test_statistic", "tn_two_sided_p",
    "train", "wasserstein1_to_std_normal",
]
