"""Multimodal MLP classifier: M encoders, a fusion module, a linear head.

Modalities are indexed from 0 in the Python API. Parameter group names are
1-based (``encoder-1`` ... ``encoder-M``) to match the on-disk formats.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .exceptions import ConfigError, DataError, ParseError, SchemaError, UsageError

CHECKPOINT_FORMAT = "dglab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"encoder dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> list:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class FusionSpec:
    kind: str = "concat"
    mlp_hidden: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("concat", "mlp"):
            raise ConfigError(f"fusion kind must be 'concat' or 'mlp', got {self.kind!r}")
        if (self.kind == "mlp") != (self.mlp_hidden is not None):
            raise ConfigError("mlp_hidden must be given for fusion kind 'mlp' and only then")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError(f"mlp_hidden must be positive, got {self.mlp_hidden}")

    def fused_dim(self, rep_dims: Sequence[int]) -> int:
        return sum(rep_dims) if self.kind == "concat" else int(self.mlp_hidden)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MultimodalModel:
    """Encoders, fusion and classifier, each living in its own ParamGroup."""

    encoder_specs: tuple
    fusion_spec: FusionSpec
    n_classes: int
    encoders: list = field(default_factory=list)
    fusion: ParamGroup = field(default_factory=lambda: ParamGroup("fusion"))
    classifier: ParamGroup = field(default_factory=lambda: ParamGroup("classifier"))

    @classmethod
    def build(cls, encoder_specs: Sequence[EncoderSpec], fusion_spec: FusionSpec,
              n_classes: int, rng=None) -> "MultimodalModel":
        encoder_specs = tuple(encoder_specs)
        if len(encoder_specs) < 2:
            raise ConfigError(f"need at least 2 modalities, got {len(encoder_specs)}")
        if n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {n_classes}")
        rng = np.random.default_rng(rng)
        model = cls(encoder_specs, fusion_spec, int(n_classes))
        for k, spec in enumerate(encoder_specs):
            group = ParamGroup(f"encoder-{k + 1}")
            for i, (d_in, d_out) in enumerate(spec.layer_dims):
                group.add(Tensor(_uniform(rng, d_in, (d_out, d_in)), name=f"layer{i}.weight"))
                group.add(Tensor(_uniform(rng, d_in, (d_out,)), name=f"layer{i}.bias"))
            model.encoders.append(group)
        stacked = sum(s.output_dim for s in encoder_specs)
        if fusion_spec.kind == "mlp":
            h = fusion_spec.mlp_hidden
            model.fusion.add(Tensor(_uniform(rng, stacked, (h, stacked)), name="weight"))
            model.fusion.add(Tensor(_uniform(rng, stacked, (h,)), name="bias"))
        fused = model.fused_dim
        model.classifier.add(Tensor(_uniform(rng, fused, (n_classes, fused)), name="weight"))
        model.classifier.add(Tensor(_uniform(rng, fused, (n_classes,)), name="bias"))
        return model

    # ----------------------------------------------------------- structure

    @property
    def n_modalities(self) -> int:
        return len(self.encoder_specs)

    @property
    def rep_dims(self) -> list:
        return [s.output_dim for s in self.encoder_specs]

    @property
    def fused_dim(self) -> int:
        return self.fusion_spec.fused_dim(self.rep_dims)

    @property
    def groups(self) -> list:
        return [*self.encoders, self.fusion, self.classifier]

    @property
    def W(self) -> Tensor:
        return self.classifier.tensors[0]

    @property
    def b(self) -> Tensor:
        return self.classifier.tensors[1]

    def parameters(self) -> list:
        return [t for g in self.groups for t in g.tensors]

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise UsageError(f"no parameter group named {name!r}")

    def clear_grads(self) -> None:
        for g in self.groups:
            g.clear_grads()

    def copy(self) -> "MultimodalModel":
        return copy.deepcopy(self)

    # ------------------------------------------------------------- forward

    def _check_inputs(self, inputs: Sequence) -> list:
        if len(inputs) != self.n_modalities:
            raise DataError(f"expected {self.n_modalities} modalities, got {len(inputs)}")
        out = []
        n = None
        for k, (x, spec) in enumerate(zip(inputs, self.encoder_specs)):
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
                raise DataError(
                    f"modality {k} expects shape [n x {spec.input_dim}], got {x.shape}")
            if n is not None and x.shape[0] != n:
                raise DataError(f"modalities disagree on batch size: {n} vs {x.shape[0]}")
            n = x.shape[0]
            out.append(x)
        return out

    def encode_one(self, x, k: int) -> Tensor:
        spec = self.encoder_specs[k]
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.ndim != 2 or h.shape[1] != spec.input_dim:
            raise DataError(f"modality {k} expects shape [n x {spec.input_dim}], got {h.shape}")
        params = self.encoders[k].tensors
        n_layers = len(params) // 2
        for i in range(n_layers):
            W, b = params[2 * i], params[2 * i + 1]
            h = ad.add_bias(ad.matmul(h, ad.transpose(W)), b)
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def encode(self, inputs: Sequence) -> list:
        """Per-modality representations, one [n x d_k] tensor each."""
        xs = self._check_inputs(inputs)
        return [self.encode_one(x, k) for k, x in enumerate(xs)]

    def fuse(self, reps: Sequence[Optional[Tensor]], keep: Optional[Sequence[bool]] = None) -> Tensor:
        """Fuse representations; modalities with ``keep[k] = False`` enter as zeros.

        Entries of ``reps`` for dropped modalities may be ``None``.
        """
        M = self.n_modalities
        keep = [True] * M if keep is None else [bool(v) for v in keep]
        if len(keep) != M or len(reps) != M:
            raise UsageError(f"fuse needs {M} representations and keep flags")
        if not any(keep):
            raise UsageError("cannot fuse with every modality dropped")
        n = next(r.shape[0] for r, kp in zip(reps, keep) if kp)
        parts = []
        for r, kp, d in zip(reps, keep, self.rep_dims):
            if kp:
                if r.shape != (n, d):
                    raise DataError(f"representation shape {r.shape}, expected {(n, d)}")
                parts.append(r)
            else:
                parts.append(Tensor(np.zeros((n, d))))
        stacked = ad.concat(parts)
        if self.fusion_spec.kind == "concat":
            return stacked
        A, c = self.fusion.tensors
        return ad.relu(ad.add_bias(ad.matmul(stacked, ad.transpose(A)), c))

    def classify(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.fused_dim:
            raise DataError(f"classifier expects [n x {self.fused_dim}], got {z.shape}")
        return ad.add_bias(ad.matmul(z, ad.transpose(self.W)), self.b)

    def forward_full(self, inputs: Sequence) -> Tensor:
        return self.classify(self.fuse(self.encode(inputs)))

    def forward_detached(self, inputs: Sequence) -> Tensor:
        reps = [ad.detach(z) for z in self.encode(inputs)]
        return self.classify(self.fuse(reps))

    def forward_unimodal(self, inputs: Sequence, k: int) -> Tensor:
        if not 0 <= k < self.n_modalities:
            raise UsageError(f"modality index {k} outside [0, {self.n_modalities})")
        xs = self._check_inputs(inputs)
        reps: list = [None] * self.n_modalities
        reps[k] = self.encode_one(xs[k], k)
        keep = [j == k for j in range(self.n_modalities)]
        return self.classify(self.fuse(reps, keep))

    # --------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        return {f"{g.name}/{t.name}": t.data.copy() for g in self.groups for t in g.tensors}

    def load_state_dict(self, state: dict) -> None:
        expected = {f"{g.name}/{t.name}": t for g in self.groups for t in g.tensors}
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise SchemaError(f"state keys mismatch; missing={missing} unexpected={extra}")
        for key, t in expected.items():
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != t.shape:
                raise SchemaError(f"{key}: shape {arr.shape}, model expects {t.shape}")
            t.data[...] = arr

    def config(self) -> dict:
        return {
            "encoders": [asdict(s) for s in self.encoder_specs],
            "fusion": asdict(self.fusion_spec),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "MultimodalModel":
        specs = [EncoderSpec(e["input_dim"], tuple(e["hidden_dims"]), e["output_dim"])
                 for e in cfg["encoders"]]
        fusion = FusionSpec(cfg["fusion"]["kind"], cfg["fusion"].get("mlp_hidden"))
        return cls.build(specs, fusion, cfg["n_classes"], rng=0)


def save_checkpoint(model: MultimodalModel, path, step: Optional[int] = None,
                    extra: Optional[dict] = None) -> None:
    """Write an ``.npz`` archive: one array per ``group/tensor`` key plus a JSON header."""
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "model": model.config(), "step": step, "extra": extra or {}}
    arrays = model.state_dict()
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple:
    """Return ``(model, meta)`` from a file written by :func:`save_checkpoint`."""
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (OSError, ValueError, EOFError) as exc:
        raise ParseError(f"{path}: not a readable checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise SchemaError(f"{path}: missing checkpoint header")
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
    model = MultimodalModel.from_config(meta["model"])
    model.load_state_dict(arrays)
    return model, meta
