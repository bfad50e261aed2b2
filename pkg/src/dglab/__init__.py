"""Disentangled gradient learning for multimodal classifiers on a small autodiff engine."""
from .autodiff import ParamGroup, Tape, Tensor
from .model import EncoderSpec, FusionSpec, MultimodalModel, load_checkpoint, save_checkpoint
from .synthdata import GenSpec, SyntheticDataset, default_spec, generate
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
