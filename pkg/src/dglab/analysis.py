"""Closed-form encoder gradients under concatenation fusion, and their oracles.

With concat fusion the logits split as ``W[:, cols_k] z_k + W[:, rest] z_rest + b``.
For sample ``(z, y)`` the target-row term of dL/dz_k in the joint model is

    g_multi = (p_y - 1) * W_y^k,   p_y = exp(a_y) / sum_j exp(a_j) * s_j

where ``a = W^k z_k + b`` and ``s_j = exp((W_j^rest - W_y^rest) z_rest)``.
Dropping the other modalities gives the unimodal counterpart ``g_uni`` (all
``s_j = 1``). When every off-target ``s_j < 1`` the joint target probability is
larger, so ``|g_multi| < |g_uni|``: the other modalities suppress the gradient
that reaches encoder ``k``.

Only the target row is kept in these expressions; :func:`full_chain_gradient`
gives the complete gradient from the autodiff tape for validation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .exceptions import DimensionError, OracleError, UnsupportedError, UsageError
from .model import MultimodalModel


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _as_batch(z) -> tuple:
    z = np.asarray(z, dtype=np.float64)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def _labels(y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


def column_blocks(rep_dims: Sequence[int]) -> list:
    """Column slice of the classifier weight owned by each modality."""
    edges = np.cumsum([0, *rep_dims])
    return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


def _split(W: np.ndarray, z_all: Sequence, k: int):
    zs = [_as_batch(z)[0] for z in z_all]
    dims = [z.shape[1] for z in zs]
    if W.shape[1] != sum(dims):
        raise DimensionError(
            f"classifier has {W.shape[1]} columns but representations total {sum(dims)}")
    blocks = column_blocks(dims)
    rest = [j for j in range(len(zs)) if j != k]
    W_k = W[:, blocks[k]]
    W_rest = np.concatenate([W[:, blocks[j]] for j in rest], axis=1)
    z_rest = np.concatenate([zs[j] for j in rest], axis=1)
    return W_k, zs[k], W_rest, z_rest


def _require_concat(fusion: str) -> None:
    if fusion != "concat":
        raise UnsupportedError(f"closed-form gradients need concat fusion, got {fusion!r}")


def _log_p_target(a: np.ndarray, y: np.ndarray, log_s: Optional[np.ndarray] = None) -> np.ndarray:
    """log of the target probability ``exp(a_y) / sum_j exp(a_j) s_j``."""
    shifted = a if log_s is None else a + log_s
    return a[np.arange(len(y)), y] - _logsumexp(shifted)


def _log_s(W_rest: np.ndarray, z_rest: np.ndarray, y: np.ndarray) -> np.ndarray:
    return z_rest @ W_rest.T - (z_rest * W_rest[y]).sum(axis=1, keepdims=True)


def closed_form_g_uni(W_k, b, z_k, y) -> np.ndarray:
    """``(p_y - 1) * W_y`` with ``p`` the softmax of modality-k logits alone."""
    W_k = np.asarray(W_k, dtype=np.float64)
    z, single = _as_batch(z_k)
    y = _labels(y, z.shape[0])
    a = z @ W_k.T + np.asarray(b, dtype=np.float64)
    g = (np.exp(_log_p_target(a, y)) - 1.0)[:, None] * W_k[y]
    return g[0] if single else g


def closed_form_g_multi(W, b, z_all: Sequence, y, k: int = 0, fusion: str = "concat") -> np.ndarray:
    """Target-row gradient reaching encoder ``k`` through the joint concat head."""
    _require_concat(fusion)
    W = np.asarray(W, dtype=np.float64)
    single = np.asarray(z_all[0]).ndim == 1
    W_k, z_k, W_rest, z_rest = _split(W, z_all, k)
    y = _labels(y, z_k.shape[0])
    a = z_k @ W_k.T + np.asarray(b, dtype=np.float64)
    log_p_y = _log_p_target(a, y, _log_s(W_rest, z_rest, y))
    g = (np.exp(log_p_y) - 1.0)[:, None] * W_k[y]
    return g[0] if single else g


@dataclass
class SuppressionRecord:
    """Per-sample, per-class suppression factors ``s`` (shape [n x K])."""

    s: np.ndarray
    labels: np.ndarray
    step: Optional[int] = None

    @property
    def off_target(self) -> np.ndarray:
        mask = np.ones_like(self.s, dtype=bool)
        mask[np.arange(len(self.labels)), self.labels] = False
        return mask

    @property
    def premise(self) -> np.ndarray:
        """Samples whose every off-target factor is below one."""
        return np.all(np.where(self.off_target, self.s < 1.0, True), axis=1)

    @property
    def geo_mean(self) -> np.ndarray:
        """Geometric mean of the off-target factors of each sample."""
        log_s = np.log(self.s)
        K = self.s.shape[1]
        return np.exp(np.where(self.off_target, log_s, 0.0).sum(axis=1) / (K - 1))


def suppression_factors(W_rest, z_rest, y, step: Optional[int] = None) -> SuppressionRecord:
    """``s_j = exp((W_j - W_y) . z)`` for every class ``j`` of every sample.

    ``W_rest`` is the classifier block of the suppressing modalities and
    ``z_rest`` their stacked representations.
    """
    W_rest = np.asarray(W_rest, dtype=np.float64)
    z, _ = _as_batch(z_rest)
    y = _labels(y, z.shape[0])
    if W_rest.shape[1] != z.shape[1]:
        raise DimensionError(f"weight block {W_rest.shape} does not fit representations {z.shape}")
    proj = z @ W_rest.T
    log_s = proj - proj[np.arange(len(y)), y][:, None]
    log_s[np.arange(len(y)), y] = 0.0  # exactly one on the target
    return SuppressionRecord(np.exp(log_s), y, step)


def _representations(model: MultimodalModel, inputs) -> list:
    with Tape():
        return [z.data for z in model.encode(inputs)]


def model_suppression(model: MultimodalModel, inputs, labels, k: int = 0,
                      step: Optional[int] = None) -> SuppressionRecord:
    """Suppression acting on encoder ``k`` from all other modalities of ``model``."""
    _require_concat(model.fusion_spec.kind)
    reps = _representations(model, inputs)
    _, _, W_rest, z_rest = _split(model.W.data, reps, k)
    return suppression_factors(W_rest, z_rest, labels, step)


@dataclass
class GradientComparison:
    g_uni: np.ndarray
    g_multi: np.ndarray
    log_p_uni: np.ndarray
    log_p_multi: np.ndarray
    premise: np.ndarray
    step: Optional[int] = None

    @property
    def p_uni(self) -> np.ndarray:
        return np.exp(self.log_p_uni)

    @property
    def norm_uni(self) -> np.ndarray:
        return np.linalg.norm(self.g_uni, axis=1)

    @property
    def norm_multi(self) -> np.ndarray:
        return np.linalg.norm(self.g_multi, axis=1)

    @property
    def margin(self) -> np.ndarray:
        """``|g_uni| - |g_multi|``.

        Both gradients are ``(p - 1) W_y``, so the difference is
        ``(p_multi - p_uni) |W_y|``; evaluating it that way avoids the
        cancellation of subtracting two nearly equal norms.
        """
        w = np.linalg.norm(self.g_uni, axis=1) / (1.0 - self.p_uni)
        gap = self.p_uni * np.expm1(self.log_p_multi - self.log_p_uni)
        with np.errstate(invalid="ignore"):
            return np.where(self.p_uni < 1.0, gap * w, self.norm_uni - self.norm_multi)

    @property
    def eligible(self) -> np.ndarray:
        """Samples where the suppression premise holds and ``0 < p_uni < 1``."""
        p = self.p_uni
        return self.premise & (p > 0.0) & (p < 1.0)

    def holds(self, tol: float = 0.0) -> np.ndarray:
        """Per eligible sample: ``|g_uni| - |g_multi| > tol`` and ``|g_multi| > 0``."""
        ok = (self.margin > tol) & (self.norm_multi > 0.0)
        return ok[self.eligible]


def compare_gradients(W, b, z_all: Sequence, y, k: int = 0,
                      step: Optional[int] = None) -> GradientComparison:
    W = np.asarray(W, dtype=np.float64)
    W_k, z_k, W_rest, z_rest = _split(W, z_all, k)
    y = _labels(y, z_k.shape[0])
    a = z_k @ W_k.T + np.asarray(b, dtype=np.float64)
    return GradientComparison(
        g_uni=closed_form_g_uni(W_k, b, z_k, y),
        g_multi=closed_form_g_multi(W, b, [_as_batch(z)[0] for z in z_all], y, k),
        log_p_uni=_log_p_target(a, y),
        log_p_multi=_log_p_target(a, y, _log_s(W_rest, z_rest, y)),
        premise=suppression_factors(W_rest, z_rest, y).premise,
        step=step,
    )


def check_suppression_inequality(model: MultimodalModel, inputs, labels, k: int = 0,
                                 step: Optional[int] = None) -> GradientComparison:
    """Closed-form unimodal vs joint gradients for encoder ``k`` on a batch."""
    _require_concat(model.fusion_spec.kind)
    reps = _representations(model, inputs)
    return compare_gradients(model.W.data, model.b.data, reps, labels, k, step)


def full_chain_gradient(model: MultimodalModel, inputs, labels, k: int = 0,
                        path: str = "multi") -> np.ndarray:
    """Exact per-sample ``dL_i/dz_i^k`` from the tape, any fusion kind.

    ``path="multi"`` uses the full fused model, ``path="uni"`` the dropout path
    that keeps only modality ``k``.
    """
    if path not in ("multi", "uni"):
        raise UsageError(f"path must be 'multi' or 'uni', got {path!r}")
    with Tape():
        reps = [Tensor(z.data, requires_grad=(j == k)) for j, z in enumerate(model.encode(inputs))]
        if path == "multi":
            z_tau = model.fuse(reps)
        else:
            keep = [j == k for j in range(model.n_modalities)]
            z_tau = model.fuse([r if kp else None for r, kp in zip(reps, keep)], keep)
        loss = ad.softmax_cross_entropy(model.classify(z_tau), np.asarray(labels), reduction="sum")
        ad.backward(loss)
    return reps[k].grad.copy()


def finite_difference_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise OracleError(f"f is not finite near coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradient_norm_trajectory(vanilla_steps: Sequence, dgl_steps: Sequence, k: int = 0,
                             suppression: Optional[Sequence[float]] = None) -> dict:
    """Align per-step encoder-``k`` gradient norms of a vanilla and a DGL run.

    Returns columns ``step``, ``vanilla``, ``dgl`` and, when given, ``mean_s``;
    the table is as long as the shorter run.
    """
    n = min(len(vanilla_steps), len(dgl_steps))
    group = f"encoder-{k + 1}"
    steps, van, dgl = [], [], []
    for a, b in zip(vanilla_steps[:n], dgl_steps[:n]):
        if a.step != b.step:
            raise UsageError(f"trajectories disagree on step numbering: {a.step} vs {b.step}")
        steps.append(a.step)
        van.append(a.grad_norms[group])
        dgl.append(b.grad_norms[group])
    table = {"step": np.array(steps), "vanilla": np.array(van), "dgl": np.array(dgl)}
    if suppression is not None:
        if len(suppression) < n:
            raise UsageError(f"suppression trace has {len(suppression)} entries, need {n}")
        table["mean_s"] = np.asarray(suppression[:n], dtype=np.float64)
    return table
