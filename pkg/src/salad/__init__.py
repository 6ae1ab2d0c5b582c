"""Self-supervised aggregation learning for anomaly detection (SALAD).

Autoencoder pre-training, memory-bank similarity learning, progressive
neighborhood training, and weighted-kNN angular anomaly scoring, at desk
scale on synthetic and small grayscale-image datasets.
"""

__version__ = "0.1.0"

from .autodiff import NumericError, Tensor, grad_check
from .dataprep import SynthConfig, split_grouped, synth_generate
from .membank import MemoryBank, init_bank
from .metrics import LabeledScores, auprc, roc_auc
from .model import Architecture, decode, encode, init_params
from .scorer import anomaly_score, score_dataset
from .trainer import TrainingConfig, desk_preset, paper_preset, pretrain, train_progressive

__all__ = [
    "Architecture",
    "LabeledScores",
    "MemoryBank",
    "NumericError",
    "SynthConfig",
    "Tensor",
    "TrainingConfig",
    "__version__",
    "anomaly_score",
    "auprc",
    "decode",
    "desk_preset",
    "encode",
    "grad_check",
    "init_bank",
    "init_params",
    "paper_preset",
    "pretrain",
    "roc_auc",
    "score_dataset",
    "split_grouped",
    "synth_generate",
    "train_progressive",
]
