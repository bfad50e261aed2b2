"""scikit-learn estimator wrapper around the multimodal model and training modes."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .autodiff import Tape
from .exceptions import ConfigError
from .model import EncoderSpec, FusionSpec, MultimodalModel
from .synthdata import SyntheticDataset
from .train import TrainConfig, predict_logits, seed_streams, train


def split_modalities(X, modality_dims=None) -> list:
    """Validate ``X`` and return one float64 array per modality.

    ``X`` is either a list/tuple of 2-D arrays, or a single 2-D array whose
    columns are split in order according to ``modality_dims``.
    """
    if isinstance(X, (list, tuple)):
        blocks = [check_array(x, dtype=np.float64) for x in X]
        check_consistent_length(*blocks)
        if modality_dims is not None and [b.shape[1] for b in blocks] != list(modality_dims):
            raise ValueError(f"modality widths {[b.shape[1] for b in blocks]} "
                             f"!= modality_dims {list(modality_dims)}")
    else:
        if modality_dims is None:
            raise ValueError("a single feature matrix needs modality_dims to split its columns")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != sum(modality_dims):
            raise ValueError(f"X has {X.shape[1]} columns, modality_dims sum to {sum(modality_dims)}")
        edges = np.cumsum([0, *modality_dims])
        blocks = [X[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:])]
    if len(blocks) < 2:
        raise ValueError(f"need at least 2 modalities, got {len(blocks)}")
    return blocks


class DGLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multimodal MLP classifier trained with disentangled gradients.

    Parameters
    ----------
    modality_dims : sequence of int, optional
        Column widths of each modality when ``X`` is one 2-D array. Not
        needed when ``X`` is passed as a list of per-modality arrays.
    mode : {"dgl", "vanilla", "mt_only", "ut_only", "unimodal_<k>"}
        Gradient routing used during training.
    alpha : float
        Weight of the modality-dropout unimodal losses.
    rep_dim, hidden_dims
        Encoder output width and hidden layer widths (shared by all modalities).
    fusion : {"concat", "mlp"}
        Fusion module; ``mlp_hidden`` sets the width of the ``mlp`` kind.
    lr, momentum, weight_decay, epochs, batch_size, lr_decay_factor, lr_decay_every
        SGD schedule.
    random_state : int, RandomState or None
        Root seed for initialisation and shuffling.

    Attributes
    ----------
    model_ : MultimodalModel
    classes_ : ndarray of shape (n_classes,)
    modality_dims_ : list of int
    history_ : TrainResult
    """

    def __init__(self, modality_dims=None, mode="dgl", alpha=4.0, rep_dim=16, hidden_dims=(32,),
                 fusion="concat", mlp_hidden=None, lr=2e-3, momentum=0.9, weight_decay=1e-4,
                 epochs=40, batch_size=100, lr_decay_factor=0.1, lr_decay_every=70,
                 random_state=0):
        self.modality_dims = modality_dims
        self.mode = mode
        self.alpha = alpha
        self.rep_dim = rep_dim
        self.hidden_dims = hidden_dims
        self.fusion = fusion
        self.mlp_hidden = mlp_hidden
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.random_state = random_state

    def _seed(self) -> int:
        if isinstance(self.random_state, numbers.Integral):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def _train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(mode=self.mode, alpha=self.alpha, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, seed=seed,
                           lr_decay_factor=self.lr_decay_factor,
                           lr_decay_every=self.lr_decay_every)

    def fit(self, X, y):
        blocks = split_modalities(X, self.modality_dims)
        y = np.asarray(y)
        check_consistent_length(blocks[0], y)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least 2 classes")
        seed = self._seed()
        config = self._train_config(seed)
        self.modality_dims_ = [b.shape[1] for b in blocks]
        self.n_features_in_ = sum(self.modality_dims_)
        specs = [EncoderSpec(d, tuple(self.hidden_dims), self.rep_dim) for d in self.modality_dims_]
        fusion = FusionSpec(self.fusion, self.mlp_hidden if self.fusion == "mlp" else None)
        if config.mode == "unimodal" and config.modality >= len(blocks):
            raise ConfigError(f"mode {self.mode!r} names a modality that X does not have")
        self.model_ = MultimodalModel.build(specs, fusion, len(self.classes_),
                                            rng=seed_streams(seed)["init"])
        data = SyntheticDataset(blocks, y_idx.astype(np.int64), "train")
        self.history_ = train(self.model_, data, config)
        return self

    def _blocks(self, X) -> list:
        check_is_fitted(self, "model_")
        return split_modalities(X, self.modality_dims if self.modality_dims is not None
                                else self.modality_dims_)

    def decision_function(self, X, modality=None) -> np.ndarray:
        """Logits of the full model, or of one modality-dropout path (0-based)."""
        blocks = self._blocks(X)
        return predict_logits(self.model_, blocks, modality)

    def predict_proba(self, X, modality=None) -> np.ndarray:
        logits = self.decision_function(X, modality)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, modality=None) -> np.ndarray:
        logits = self.decision_function(X, modality)
        return self.classes_[np.argmax(logits, axis=1)]

    def score_modalities(self, X, y) -> list:
        """Accuracy of each modality-dropout path."""
        y = np.asarray(y)
        return [float(np.mean(self.predict(X, k) == y)) for k in range(len(self.modality_dims_))]

    def transform(self, X) -> np.ndarray:
        """Fused representation fed to the classifier, shape [n x fused_dim]."""
        blocks = self._blocks(X)
        with Tape():
            return self.model_.fuse(self.model_.encode(blocks)).data.copy()
