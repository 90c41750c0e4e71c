"""Multi-objective fair training with adaptive Pareto exploration.

The package trains classifiers against several objectives at once — a
task loss plus differentiable demographic-parity and equal-opportunity
surrogates over intersectional subgroups — using a strategy-switching
multi-gradient optimizer, and ships a deterministic experiment CLI.
"""
from .data import SplitSpec, split, synth_biased
from .fairloss import FairLossConfig, SurrogateConfig, dp_loss, tpr_loss
from .groups import build_intersection
from .metrics import EvalReport, evaluate, threshold_scores
from .models import ModelSpec, forward
from .optimizer import ParetoArchive, TrainConfig, TrainResult, train
from .strategies import SelectorThresholds

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "FairLossConfig",
    "ModelSpec",
    "ParetoArchive",
    "SelectorThresholds",
    "SplitSpec",
    "SurrogateConfig",
    "TrainConfig",
    "TrainResult",
    "build_intersection",
    "dp_loss",
    "evaluate",
    "forward",
    "split",
    "synth_biased",
    "threshold_scores",
    "tpr_loss",
    "train",
]
