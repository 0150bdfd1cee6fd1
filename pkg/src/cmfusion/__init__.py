"""Audio/text fusion network for utterance-level emotion recognition in dialogues.

Everything runs on a small float64 reverse-mode autograd engine
(:mod:`cmfusion.tensor`); the LSTM recurrence has numba and numpy kernels
(:mod:`cmfusion.kernels`).
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetSplit, SyntheticSpec, load_dataset, make_batches, save_dataset, synthesize
from .metrics import EvaluationReport, weighted_f1
from .model import CMRobertaModel, ModelConfig, tiny_config
from .tensor import Tensor, gradient_check, no_grad
from .train import TrainConfig, TrainReport, cross_entropy, evaluate, fit

__all__ = [
    "Checkpoint", "CMRobertaModel", "DatasetSplit", "EvaluationReport", "ModelConfig", "SyntheticSpec",
    "Tensor", "TrainConfig", "TrainReport", "cross_entropy", "evaluate", "fit", "gradient_check",
    "load_checkpoint", "load_dataset", "make_batches", "no_grad", "save_checkpoint", "save_dataset",
    "synthesize", "tiny_config", "weighted_f1",
]

__version__ = "0.1.0"
