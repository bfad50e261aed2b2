"""Training steps for vanilla, DGL and the ablation modes, plus the epoch loop.

Every step backpropagates one or more losses into the shared parameter
groups and then takes a single SGD step. The modes differ only in which
losses are backpropagated, whether encoder outputs are detached, and which
groups get their gradients wiped between the backward passes:

=============  =========================  ==========================
mode           encoders receive           fusion + classifier receive
=============  =========================  ==========================
``vanilla``    L_multi                    L_multi
``dgl``        alpha * sum_k L_k          L_d
``mt_only``    alpha * sum_k L_k          L_d + alpha * sum_k L_k
``ut_only``    L_multi + alpha * sum L_k  L_multi
``unimodal``   L_k (one modality)         L_k
=============  =========================  ==========================

``L_d`` is the multimodal loss on detached encoder outputs and ``L_k`` the
loss with every modality but ``k`` zeroed at the fusion input.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .exceptions import ConfigError, NumericalError
from .model import MultimodalModel

logger = logging.getLogger(__name__)

MODES = ("vanilla", "dgl", "mt_only", "ut_only", "unimodal")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dgl"
    alpha: float = 4.0
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 64
    batch_size: int = 100
    seed: int = 0
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 70
    # modality trained in ``unimodal`` mode (0-based)
    modality: Optional[int] = None

    def __post_init__(self):
        mode = self.mode
        if isinstance(mode, str) and mode.startswith("unimodal_"):
            try:
                k = int(mode.split("_", 1)[1]) - 1
            except ValueError:
                raise ConfigError(f"bad unimodal mode {mode!r}; use unimodal_<k>, k >= 1") from None
            object.__setattr__(self, "mode", "unimodal")
            object.__setattr__(self, "modality", k)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES} or unimodal_<k>")
        if self.mode == "unimodal" and (self.modality is None or self.modality < 0):
            raise ConfigError("unimodal mode needs a modality index")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")
        if not self.lr_decay_factor > 0 or self.lr_decay_every < 1:
            raise ConfigError("lr decay needs a positive factor and an interval >= 1 epoch")

    @property
    def mode_name(self) -> str:
        return f"unimodal_{self.modality + 1}" if self.mode == "unimodal" else self.mode

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def seed_streams(seed: int) -> dict:
    """Split one root seed into independent ``data``, ``init`` and ``shuffle`` seeds."""
    data, init, shuffle = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint32)
    return {"data": int(data), "init": int(init), "shuffle": int(shuffle)}


@dataclass
class StepReport:
    step: int
    loss_d: float
    loss_uni: list
    loss_multi: float
    grad_norms: dict
    lr: float = 0.0

    @property
    def loss_uni_sum(self) -> float:
        return float(sum(self.loss_uni))


@dataclass
class TrainResult:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    first_batch_digests: list = field(default_factory=list)


# ------------------------------------------------------------------ steps


def _check_finite(name: str, loss: ad.Tensor, step: int) -> None:
    v = loss.item()
    if not math.isfinite(v):
        raise NumericalError(f"non-finite {name} loss ({v}) at step {step}")


def _weighted_sum(losses: Sequence[ad.Tensor], alpha: float) -> ad.Tensor:
    out = ad.scale(losses[0], alpha)
    for loss in losses[1:]:
        out = ad.add(out, ad.scale(loss, alpha))
    return out


def _forward_all(model: MultimodalModel, inputs, labels, detached: bool):
    """One shared encoder pass; returns (multimodal loss, unimodal losses)."""
    reps = model.encode(inputs)
    M = model.n_modalities
    uni = []
    for k in range(M):
        only = [r if j == k else None for j, r in enumerate(reps)]
        logits = model.classify(model.fuse(only, [j == k for j in range(M)]))
        uni.append(ad.softmax_cross_entropy(logits, labels))
    fused_in = [ad.detach(r) for r in reps] if detached else reps
    multi = ad.softmax_cross_entropy(model.classify(model.fuse(fused_in)), labels)
    return multi, uni


def _finish(model, config, step, multi, uni, lr) -> StepReport:
    norms = {g.name: g.grad_norm() for g in model.groups}
    ad.sgd_step(model.groups, lr, config.momentum, config.weight_decay)
    return StepReport(step, multi.item(), [u.item() for u in uni], multi.item(), norms, lr)


def _reserve_for_multimodal(model: MultimodalModel) -> None:
    ad.zero_grad_group(model.fusion)
    ad.zero_grad_group(model.classifier)


def step_dgl(model, inputs, labels, config: TrainConfig, step: int = 0,
             lr: Optional[float] = None) -> StepReport:
    """Algorithm 1: unimodal grads to encoders only, detached multimodal grads to the head."""
    lr = config.lr if lr is None else lr
    with Tape():
        loss_d, uni = _forward_all(model, inputs, labels, detached=True)
        for k, u in enumerate(uni):
            _check_finite(f"unimodal[{k}]", u, step)
        _check_finite("detached multimodal", loss_d, step)
        if config.alpha > 0:
            ad.backward(_weighted_sum(uni, config.alpha))
        _reserve_for_multimodal(model)
        ad.backward(loss_d)
    return _finish(model, config, step, loss_d, uni, lr)


def step_vanilla(model, inputs, labels, config: TrainConfig, step: int = 0,
                 lr: Optional[float] = None) -> StepReport:
    lr = config.lr if lr is None else lr
    with Tape():
        multi, uni = _forward_all(model, inputs, labels, detached=False)
        _check_finite("multimodal", multi, step)
        ad.backward(multi)
    return _finish(model, config, step, multi, uni, lr)


def step_mt_only(model, inputs, labels, config: TrainConfig, step: int = 0,
                 lr: Optional[float] = None) -> StepReport:
    """Detached multimodal loss plus unimodal losses, no gradient zeroing."""
    lr = config.lr if lr is None else lr
    with Tape():
        loss_d, uni = _forward_all(model, inputs, labels, detached=True)
        for k, u in enumerate(uni):
            _check_finite(f"unimodal[{k}]", u, step)
        _check_finite("detached multimodal", loss_d, step)
        if config.alpha > 0:
            ad.backward(_weighted_sum(uni, config.alpha))
        ad.backward(loss_d)
    return _finish(model, config, step, loss_d, uni, lr)


def step_ut_only(model, inputs, labels, config: TrainConfig, step: int = 0,
                 lr: Optional[float] = None) -> StepReport:
    """Undetached multimodal loss; unimodal grads wiped from fusion and classifier."""
    lr = config.lr if lr is None else lr
    with Tape():
        multi, uni = _forward_all(model, inputs, labels, detached=False)
        for k, u in enumerate(uni):
            _check_finite(f"unimodal[{k}]", u, step)
        _check_finite("multimodal", multi, step)
        if config.alpha > 0:
            ad.backward(_weighted_sum(uni, config.alpha))
        _reserve_for_multimodal(model)
        ad.backward(multi)
    return _finish(model, config, step, multi, uni, lr)


def step_unimodal(model, inputs, labels, config: TrainConfig, step: int = 0,
                  lr: Optional[float] = None) -> StepReport:
    """Standalone unimodal baseline: only modality ``config.modality`` is trained."""
    lr = config.lr if lr is None else lr
    k = config.modality
    with Tape():
        multi, uni = _forward_all(model, inputs, labels, detached=True)
        _check_finite(f"unimodal[{k}]", uni[k], step)
        ad.backward(uni[k])
    return _finish(model, config, step, multi, uni, lr)


STEPS: dict = {
    "vanilla": step_vanilla,
    "dgl": step_dgl,
    "mt_only": step_mt_only,
    "ut_only": step_ut_only,
    "unimodal": step_unimodal,
}


def train_step(model, inputs, labels, config: TrainConfig, step: int = 0,
               lr: Optional[float] = None) -> StepReport:
    return STEPS[config.mode](model, inputs, labels, config, step, lr)


# -------------------------------------------------------------- evaluation


def predict_logits(model: MultimodalModel, inputs, modality: Optional[int] = None) -> np.ndarray:
    """Logits as a plain array; ``modality`` selects a unimodal (dropout) path."""
    with Tape():
        if modality is None:
            out = model.forward_full(inputs)
        else:
            out = model.forward_unimodal(inputs, modality)
    return out.data


def _ce(logits: np.ndarray, y: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(y)), y]))


def evaluate(model: MultimodalModel, dataset) -> dict:
    """Top-1 accuracy of the full model and of each modality-dropout path.

    Argmax ties go to the lowest class index.
    """
    y = dataset.labels
    if len(y) == 0:
        return {"multi_acc": float("nan"), "uni_acc": [float("nan")] * model.n_modalities,
                "loss_d": float("nan"), "loss_uni_sum": float("nan")}
    full = predict_logits(model, dataset.features)
    uni = [predict_logits(model, dataset.features, k) for k in range(model.n_modalities)]
    return {
        "multi_acc": float(np.mean(np.argmax(full, axis=1) == y)),
        "uni_acc": [float(np.mean(np.argmax(u, axis=1) == y)) for u in uni],
        "loss_d": _ce(full, y),
        "loss_uni_sum": float(sum(_ce(u, y) for u in uni)),
    }


# ------------------------------------------------------------------- loop


def _digest(idx: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(idx, dtype="<i8").tobytes()).hexdigest()[:16]


def train(model: MultimodalModel, dataset, config: TrainConfig,
          eval_sets: Optional[dict] = None,
          on_epoch_end: Optional[Callable[[int, MultimodalModel], Optional[dict]]] = None,
          ) -> TrainResult:
    """Run ``config.epochs`` epochs of seeded mini-batch SGD in ``config.mode``.

    ``eval_sets`` maps split names to datasets evaluated after each epoch.
    ``on_epoch_end(epoch, model)`` may return extra fields for the epoch record.
    """
    config.validate()
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.n_modalities != model.n_modalities:
        raise ConfigError(
            f"dataset has {dataset.n_modalities} modalities, model has {model.n_modalities}")
    if config.mode == "unimodal" and config.modality >= model.n_modalities:
        raise ConfigError(f"unimodal modality {config.modality} out of range")
    shuffle_rng = np.random.default_rng(seed_streams(config.seed)["shuffle"])
    result = TrainResult()
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        result.first_batch_digests.append(_digest(order[: config.batch_size]))
        epoch_norms: dict = {}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xs = [x[idx] for x in dataset.features]
            try:
                report = train_step(model, xs, dataset.labels[idx], config, step, lr)
            except NumericalError as exc:
                exc.partial = result
                raise
            result.steps.append(report)
            for name, v in report.grad_norms.items():
                epoch_norms.setdefault(name, []).append(v)
            step += 1
        record = {"epoch": epoch, "lr": lr, "steps": step,
                  "mean_grad_norms": {k: float(np.mean(v)) for k, v in epoch_norms.items()},
                  "splits": {}}
        for split, ds in (eval_sets or {}).items():
            record["splits"][split] = evaluate(model, ds)
        if on_epoch_end is not None:
            record.update(on_epoch_end(epoch, model) or {})
        result.epochs.append(record)
        logger.debug("epoch %d lr=%.3g %s", epoch, lr,
                     {s: round(m["multi_acc"], 4) for s, m in record["splits"].items()})
    return result

