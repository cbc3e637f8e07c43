"""Masked diffusion language model decoding: exact laws, objectives, metrics."""
from .core import MASK, FactorizedDist, TabularJoint, Vocabulary, entropy, joint_entropy, noise
from .decoding import DecodeConfig, decode_corpus, decode_sample, exact_generation_distribution
from .models import OracleCausal, OracleFactorized, OraclePosterior, TabularModel, TrainableModel
from .objectives import OBJECTIVE_CODES, ObjectiveSpec, TSampler, expected_loss, loss, objective_optimum

__version__ = "0.1.0"

__all__ = [
    "MASK", "Vocabulary", "FactorizedDist", "TabularJoint", "entropy", "joint_entropy", "noise",
    "DecodeConfig", "decode_sample", "decode_corpus", "exact_generation_distribution",
    "OracleFactorized", "OraclePosterior", "OracleCausal", "TabularModel", "TrainableModel",
    "OBJECTIVE_CODES", "ObjectiveSpec", "TSampler", "loss", "expected_loss", "objective_optimum",
]
