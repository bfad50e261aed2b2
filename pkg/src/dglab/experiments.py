"""Run-level orchestration shared by the CLI, the estimator tests and the acceptance suite."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, synthdata
from .exceptions import ConfigError, NumericalError
from .model import EncoderSpec, FusionSpec, MultimodalModel, save_checkpoint
from .synthdata import GenSpec, SyntheticDataset
from .train import TrainConfig, TrainResult, seed_streams, train

logger = logging.getLogger(__name__)

ABLATION_MODES = ("vanilla", "mt_only", "ut_only", "dgl")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one training run."""

    gen: GenSpec = field(default_factory=GenSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    rep_dim: int = 16
    hidden_dims: tuple = (32,)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    # pin the data seed instead of deriving it from the root seed
    data_seed: Optional[int] = None
    data_dir: Optional[Path] = None
    # modality whose encoder the suppression analysis follows (0-based)
    analyze_modality: int = 0
    track_suppression: bool = True
    checkpoint_every: int = 0
    alphas: tuple = (0.0, 1.0, 2.0, 4.0)
    workers: int = 1

    def __post_init__(self):
        if self.rep_dim < 1:
            raise ConfigError(f"rep_dim must be positive, got {self.rep_dim}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.alphas:
            raise ConfigError("alphas must not be empty")
        if any(a < 0 for a in self.alphas):
            raise ConfigError(f"alphas must be non-negative, got {self.alphas}")
        M = self.gen.n_modalities
        if not 0 <= self.analyze_modality < M:
            raise ConfigError(f"analyze_modality {self.analyze_modality} outside [0, {M})")
        if self.train.mode == "unimodal" and self.train.modality >= M:
            raise ConfigError(f"unimodal modality {self.train.modality + 1} exceeds M={M}")

    @property
    def seed(self) -> int:
        return self.train.seed

    def gen_spec(self) -> GenSpec:
        seed = self.data_seed if self.data_seed is not None else seed_streams(self.seed)["data"]
        return replace(self.gen, seed=int(seed))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=self.train.with_(seed=seed))

    def with_train(self, **changes) -> "RunConfig":
        return replace(self, train=self.train.with_(**changes))


DESK_EPOCHS = 40


def desk_protocol(seed: int = 0, **train_overrides) -> RunConfig:
    """Default imbalanced spec and the fixed training budget used by the acceptance suite."""
    train_overrides.setdefault("epochs", DESK_EPOCHS)
    return RunConfig(gen=GenSpec(n_test=5000), train=TrainConfig(seed=seed, **train_overrides))


def load_data(config: RunConfig) -> tuple:
    if config.data_dir is not None:
        d = Path(config.data_dir)
        return synthdata.load(d / "train.dgl"), synthdata.load(d / "test.dgl")
    return synthdata.generate(config.gen_spec())


def build_model(config: RunConfig, dataset: SyntheticDataset) -> MultimodalModel:
    specs = [EncoderSpec(d, tuple(config.hidden_dims), config.rep_dim) for d in dataset.input_dims]
    return MultimodalModel.build(specs, config.fusion, dataset.n_classes,
                                 rng=seed_streams(config.seed)["init"])


@dataclass
class RunOutcome:
    config: RunConfig
    model: MultimodalModel
    result: TrainResult
    train_set: SyntheticDataset
    test_set: SyntheticDataset
    failed: Optional[str] = None

    def final(self, split: str = "test") -> dict:
        return self.result.epochs[-1]["splits"][split] if self.result.epochs else {}

    def epoch_series(self, key: str) -> np.ndarray:
        return np.array([e[key] for e in self.result.epochs], dtype=np.float64)

    def encoder_norms(self, k: int) -> np.ndarray:
        name = f"encoder-{k + 1}"
        return np.array([s.grad_norms[name] for s in self.result.steps])


def run(config: RunConfig, data: Optional[tuple] = None,
        checkpoint_dir: Optional[Path] = None) -> RunOutcome:
    """Train one model. Non-finite losses end the run early with ``failed`` set."""
    train_set, test_set = data if data is not None else load_data(config)
    if train_set.n_modalities != config.gen.n_modalities and config.data_dir is None:
        raise ConfigError("dataset modality count disagrees with the generator spec")
    model = build_model(config, train_set)
    k = config.analyze_modality
    probe = train_set

    def on_epoch_end(epoch: int, m: MultimodalModel) -> dict:
        extra = {}
        if config.track_suppression and m.fusion_spec.kind == "concat":
            rec = analysis.model_suppression(m, probe.features, probe.labels, k, step=epoch)
            extra["mean_suppression"] = float(np.mean(rec.geo_mean))
        if checkpoint_dir is not None and config.checkpoint_every and \
                (epoch + 1) % config.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(m, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.npz", step=epoch + 1,
                            extra={"mode": config.train.mode_name, "seed": config.seed})
        return extra

    result = TrainResult()
    failed = None
    try:
        result = train(model, train_set, config.train,
                       eval_sets={"train": train_set, "test": test_set},
                       on_epoch_end=on_epoch_end)
    except NumericalError as exc:
        failed = str(exc)
        result = getattr(exc, "partial", result)
        logger.error("run stopped: %s", exc)
    return RunOutcome(config, model, result, train_set, test_set, failed)


def run_many(configs: Sequence[RunConfig], data: Optional[tuple] = None,
             workers: int = 1) -> list:
    """Independent runs; order of the result list follows ``configs``."""
    if workers <= 1:
        return [run(c, data) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run(c, data), configs))


def ablate(config: RunConfig, modes: Sequence[str] = ABLATION_MODES) -> list:
    """Same data, init and shuffling; only the training mode changes."""
    data = load_data(config)
    return run_many([config.with_train(mode=m) for m in modes], data, config.workers)


def sweep_alpha(config: RunConfig, alphas: Optional[Sequence[float]] = None) -> list:
    alphas = tuple(config.alphas if alphas is None else alphas)
    if not alphas:
        raise ConfigError("alphas must not be empty")
    data = load_data(config)
    return run_many([config.with_train(mode="dgl", alpha=float(a)) for a in alphas],
                    data, config.workers)
