"""Multi-task few-shot pretraining on a small numpy autodiff engine.

A convolutional encoder is trained on the merged training classes with a
supervised loss plus optional rotation-prediction and BYOL losses, then
frozen and scored on held-out classes with N-way K-shot episodes.
"""

from .augment import AugmentSpec
from .data import DatasetManifest, LabeledDataset, generate_toy_corpus, ingest, ingest_split
from .episodic import EpisodeSpec, EvalReport, evaluate, evaluate_embeddings, fit_base_learner
from .model import AugmentSet, HeadConfig, MultiTaskModel, task_losses, total_loss
from .nn import ConvEncoder, EncoderConfig, MlpConfig
from .tensor import Parameter, Tensor, backward, no_grad
from .trainer import SGD, TrainConfig, merge_meta_training, train

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "AugmentSet",
    "ConvEncoder",
    "DatasetManifest",
    "EncoderConfig",
    "EpisodeSpec",
    "EvalReport",
    "HeadConfig",
    "LabeledDataset",
    "MlpConfig",
    "MultiTaskModel",
    "Parameter",
    "SGD",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "evaluate_embeddings",
    "fit_base_learner",
    "generate_toy_corpus",
    "ingest",
    "ingest_split",
    "merge_meta_training",
    "no_grad",
    "task_losses",
    "total_loss",
    "train",
]
