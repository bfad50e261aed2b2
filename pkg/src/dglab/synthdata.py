"""Seeded Gaussian class-center data with one feature block per modality.

Each modality k places class c at ``mu[k] * u[c, k]`` (a random unit
direction), adds isotropic noise of scale ``sigma[k]`` and then applies a
fixed random rotation. The ratio ``mu / sigma`` sets how easy a modality is.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigError, ParseError

MAGIC = b"DGLDATA"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenSpec:
    """Generator settings. Per-modality fields are sequences of length ``M``."""

    n_classes: int = 6
    input_dims: tuple = (20, 20)
    mu: tuple = (3.0, 1.2)
    sigma: tuple = (1.0, 1.0)
    label_noise: tuple = (0.0, 0.0)
    n_train: int = 3000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dims", "mu", "sigma", "label_noise"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        M = len(self.input_dims)
        if M < 2:
            raise ConfigError(f"need at least 2 modalities, got {M}")
        for name in ("mu", "sigma", "label_noise"):
            if len(getattr(self, name)) != M:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected {M}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if any(d < 1 for d in self.input_dims):
            raise ConfigError(f"input dims must be positive, got {self.input_dims}")
        if any(m < 0 for m in self.mu):
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if any(s <= 0 for s in self.sigma):
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if any(not 0 <= r <= 1 for r in self.label_noise):
            raise ConfigError(f"label_noise rates must lie in [0, 1], got {self.label_noise}")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.seed < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        return cls(**d)


def default_spec(seed: int = 0, **overrides) -> GenSpec:
    """Two modalities, six classes; modality 0 dominant, modality 1 weak."""
    return GenSpec(seed=seed, **overrides)


@dataclass
class SyntheticDataset:
    features: list
    labels: np.ndarray
    split: str = "train"
    spec: Optional[GenSpec] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = [np.asarray(x, dtype=np.float64) for x in self.features]
        n = self.labels.shape[0]
        for x in self.features:
            if x.ndim != 2 or x.shape[0] != n:
                raise ConfigError(f"feature block of shape {x.shape} does not match {n} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def input_dims(self) -> list:
        return [x.shape[1] for x in self.features]

    @property
    def n_classes(self) -> int:
        if self.spec is not None:
            return self.spec.n_classes
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset([x[idx] for x in self.features], self.labels[idx],
                                self.split, self.spec, dict(self.meta))

    def equals(self, other: "SyntheticDataset") -> bool:
        """Bitwise equality of features and labels."""
        return (self.split == other.split
                and np.array_equal(self.labels, other.labels)
                and len(self.features) == len(other.features)
                and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(self.features, other.features)))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _balanced_labels(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % K).astype(np.int64)


def _draw(spec: GenSpec, centers, rotations, n: int, rng: np.random.Generator, split: str):
    K = spec.n_classes
    y = _balanced_labels(rng, n, K)
    feats = []
    for k in range(spec.n_modalities):
        source = y.copy()
        if spec.label_noise[k] > 0:
            flip = rng.random(n) < spec.label_noise[k]
            source[flip] = rng.integers(0, K, size=int(flip.sum()))
        noise = rng.standard_normal((n, spec.input_dims[k]))
        x = spec.mu[k] * centers[k][source] + spec.sigma[k] * noise
        feats.append(x @ rotations[k].T)
    return SyntheticDataset(feats, y, split, spec)


def generate(spec: GenSpec) -> tuple:
    """Return ``(train, test)`` datasets; a pure function of ``spec``."""
    structure, train_rng, test_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    centers = [_unit_rows(structure, spec.n_classes, d) for d in spec.input_dims]
    rotations = [_rotation(structure, d) for d in spec.input_dims]
    train = _draw(spec, centers, rotations, spec.n_train, train_rng, "train")
    test = _draw(spec, centers, rotations, spec.n_test, test_rng, "test")
    return train, test


def nearest_center_accuracy(train: SyntheticDataset, test: SyntheticDataset, k: int) -> float:
    """Accuracy on ``test`` of a nearest-class-mean rule fit on modality ``k`` of ``train``."""
    K = max(train.n_classes, test.n_classes)
    xtr, xte = train.features[k], test.features[k]
    centers = np.stack([xtr[train.labels == c].mean(axis=0) for c in range(K)])
    d2 = ((xte[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == test.labels))


# ------------------------------------------------------------------ file I/O
#
# Layout:
#   line 1:  b"DGLDATA <version>\n"
#   line 2:  JSON header {"M", "K", "dims", "n", "seed", "split", "spec"}, then b"\n"
#   body:    M float64 little-endian row-major blocks [n x dims[k]],
#            then one int64 little-endian label block [n].


def save(dataset: SyntheticDataset, path) -> None:
    spec = dataset.spec
    header = {
        "M": dataset.n_modalities,
        "K": dataset.n_classes,
        "dims": dataset.input_dims,
        "n": len(dataset),
        "seed": spec.seed if spec is not None else None,
        "split": dataset.split,
        "spec": spec.to_dict() if spec is not None else None,
    }
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for x in dataset.features:
            fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())


def load(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or not raw.startswith(MAGIC + b" "):
        raise ParseError(f"{path}: line 1, offset 0: missing {MAGIC.decode()} magic")
    try:
        version = int(raw[len(MAGIC) + 1:first])
    except ValueError:
        raise ParseError(f"{path}: line 1: unreadable version") from None
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: line 1: unsupported version {version}")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise ParseError(f"{path}: line 2, offset {first + 1}: header line not terminated")
    try:
        header = json.loads(raw[first + 1:second])
        M, n, dims = int(header["M"]), int(header["n"]), [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: line 2, offset {first + 1}: bad header ({exc})") from None
    if len(dims) != M:
        raise ParseError(f"{path}: line 2: header lists {len(dims)} dims for M={M}")
    offset = second + 1
    expected = offset + 8 * n * (sum(dims) + 1)
    if len(raw) != expected:
        raise ParseError(
            f"{path}: offset {len(raw)}: body is {len(raw) - offset} bytes, "
            f"expected {expected - offset}")
    features = []
    for d in dims:
        size = 8 * n * d
        features.append(np.frombuffer(raw, dtype="<f8", count=n * d, offset=offset)
                        .reshape(n, d).astype(np.float64))
        offset += size
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=offset).astype(np.int64)
    spec = GenSpec.from_dict(header["spec"]) if header.get("spec") else None
    return SyntheticDataset(features, labels, header.get("split", "train"), spec)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
