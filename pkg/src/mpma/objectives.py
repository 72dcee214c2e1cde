"""Pre-training losses, their weighted combination, and the alignment warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class NonFiniteLoss(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, parts: dict):
        self.parts = parts
        bad = ", ".join(f"{k}={v}" for k, v in parts.items() if not math.isfinite(v))
        super().__init__(f"non-finite loss term(s): {bad}")


def _check_temperature(name: str, tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"{name} must be positive, got {tau}")


def loss_mim(recon: Tensor, ground_truth: Tensor) -> Tensor:
    """Mean squared error over every entry of the masked patches."""
    if recon.shape != ground_truth.shape:
        raise ShapeError(f"loss_mim: {recon.shape} vs {ground_truth.shape}")
    if recon.data.size == 0:
        raise ValueError("loss_mim: no masked patches")
    diff = ad.sub(recon, ground_truth)
    return ad.mean(ad.mul(diff, diff))


def loss_mlm(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"loss_mlm: logits must be (n, V), got {logits.shape}")
    n, vocab = logits.shape
    if n == 0:
        raise ValueError("loss_mlm: no masked positions")
    if targets.shape != (n,):
        raise ShapeError(f"loss_mlm: {targets.shape[0]} targets for {n} rows")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"loss_mlm: target id outside vocabulary of {vocab}")
    logp = ad.reshape(ad.log_softmax(logits, axis=-1), (n * vocab,))
    picked = ad.gather(logp, np.arange(n) * vocab + targets)
    return ad.neg(ad.mean(picked))


def symmetric_contrastive(logits: Tensor) -> Tensor:
    """Symmetric InfoNCE over an ``(N, N)`` score matrix with matches on the diagonal.

    ``logits[i, j]`` scores image ``i`` against text ``j``. The text-anchored
    term normalizes over column ``i`` and the image-anchored term over row ``i``;
    the two log-probabilities are summed (not averaged) per pair.
    """
    n = logits.shape[0]
    if logits.shape != (n, n) or n == 0:
        raise ShapeError(f"expected a square non-empty score matrix, got {logits.shape}")
    diag = np.arange(n) * (n + 1)
    by_row = ad.gather(ad.reshape(ad.log_softmax(logits, axis=1), (n * n,)), diag)
    by_col = ad.gather(ad.reshape(ad.log_softmax(logits, axis=0), (n * n,)), diag)
    return ad.mul(ad.sum(ad.add(by_row, by_col)), -1.0 / n)


def loss_global(v_m: Tensor, t_m: Tensor, tau1: float) -> Tensor:
    """Symmetric global contrastive loss between pooled image and report vectors ``(N, D)``."""
    _check_temperature("tau1", tau1)
    if v_m.shape != t_m.shape or v_m.ndim != 2:
        raise ShapeError(f"loss_global: {v_m.shape} vs {t_m.shape}")
    return symmetric_contrastive(ad.mul(ad.matmul(v_m, ad.transpose(t_m)), 1.0 / tau1))


def similarity_coefficients(v: Tensor, t_m: Tensor, tau2: float) -> Tensor:
    """Column-normalized ``softmax(v t_m^T / tau2)`` over image regions; works batched."""
    _check_temperature("tau2", tau2)
    s = ad.matmul(v, ad.transpose(t_m, (0, 2, 1) if t_m.ndim == 3 else None))
    return ad.softmax(ad.mul(s, 1.0 / tau2), axis=-2)


def local_similarity_H(v: Tensor, t_m: Tensor, tau2: float) -> Tensor:
    """``log sum_j exp(g_j . t_j)`` where ``g_j`` is the region aggregate for word ``j``.

    ``v`` is ``(N_p, D)`` region features and ``t_m`` is ``(M, D)`` word features.
    """
    if v.ndim != 2 or t_m.ndim != 2 or v.shape[1] != t_m.shape[1]:
        raise ShapeError(f"local_similarity_H: {v.shape} vs {t_m.shape}")
    out = local_similarity_matrix(ad.reshape(v, (1,) + v.shape), ad.reshape(t_m, (1,) + t_m.shape), tau2)
    return ad.reshape(out, ())


def local_similarity_matrix(v: Tensor, t_m: Tensor, tau2: float) -> Tensor:
    """``H[a, b]``: regions of image ``a`` aggregated against, and scored on, words of report ``b``.

    ``v`` is ``(N, N_p, D)``, ``t_m`` is ``(N, M, D)``; returns ``(N, N)``.
    """
    _check_temperature("tau2", tau2)
    if v.ndim != 3 or t_m.ndim != 3 or v.shape[0] != t_m.shape[0] or v.shape[2] != t_m.shape[2]:
        raise ShapeError(f"local_similarity_matrix: {v.shape} vs {t_m.shape}")
    n = v.shape[0]
    vv = ad.gather(v, np.repeat(np.arange(n), n))
    tt = ad.gather(t_m, np.tile(np.arange(n), n))
    alpha = similarity_coefficients(vv, tt, tau2)  # (N*N, N_p, M)
    g = ad.matmul(ad.transpose(alpha, (0, 2, 1)), vv)  # (N*N, M, D)
    scores = ad.sum(ad.mul(g, tt), axis=-1)
    return ad.reshape(ad.logsumexp(scores, axis=-1), (n, n))


def loss_local(v: Tensor, t_m: Tensor, tau2: float, tau3: float) -> Tensor:
    """Symmetric contrastive loss over the cross-pair local similarity matrix."""
    _check_temperature("tau3", tau3)
    return symmetric_contrastive(ad.mul(local_similarity_matrix(v, t_m, tau2), 1.0 / tau3))


def warmup_lambda(epoch: float, total: float) -> float:
    """Gaussian ramp ``exp(-5 (1 - t/T)^2)`` up to epoch ``T``, then 1."""
    if total <= 0:
        raise ValueError("warmup length must be at least 1 epoch")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch >= total:
        return 1.0
    return math.exp(-5.0 * (1.0 - epoch / total) ** 2)


@dataclass
class TrainSchedule:
    step: int = 0
    epoch: int = 0
    warmup_epochs: int = 5
    lambda_il: float = 5.0
    lambda_gl: float = 3.0

    @property
    def lambda_gla(self) -> float:
        return warmup_lambda(self.epoch, self.warmup_epochs)


@dataclass
class LossBreakdown:
    l_mim: float
    l_mlm: float
    l_g: float
    l_l: float
    l_all: float
    lambda_gla: float

    def as_dict(self) -> dict:
        return {
            "l_mim": self.l_mim,
            "l_mlm": self.l_mlm,
            "l_g": self.l_g,
            "l_l": self.l_l,
            "l_all": self.l_all,
            "lambda_gla": self.lambda_gla,
        }


def combine(l_mim, l_mlm, l_g, l_l, lambda_il: float, lambda_gl: float, lambda_gla: float):
    """Weighted multi-task objective; works on floats and on tensors alike."""
    align = ad.add(l_g, ad.mul(l_l, lambda_gl)) if isinstance(l_g, Tensor) else l_g + lambda_gl * l_l
    if isinstance(l_mim, Tensor):
        return ad.add(ad.add(l_mim, ad.mul(l_mlm, lambda_il)), ad.mul(align, lambda_gla))
    return l_mim + lambda_il * l_mlm + lambda_gla * align


def loss_all(l_mim, l_mlm, l_g, l_l, sched: TrainSchedule) -> tuple[Tensor | float, LossBreakdown]:
    """Combine the four terms under ``sched``; raises :class:`NonFiniteLoss` on NaN/inf."""
    parts = {k: float(x.data if isinstance(x, Tensor) else x) for k, x in
             (("l_mim", l_mim), ("l_mlm", l_mlm), ("l_g", l_g), ("l_l", l_l))}
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLoss(parts)
    lam = sched.lambda_gla
    total = combine(l_mim, l_mlm, l_g, l_l, sched.lambda_il, sched.lambda_gl, lam)
    # logged total is recomputed in float64 from the logged parts
    value = combine(parts["l_mim"], parts["l_mlm"], parts["l_g"], parts["l_l"], sched.lambda_il, sched.lambda_gl, lam)
    if not math.isfinite(value):
        raise NonFiniteLoss({**parts, "l_all": value})
    return total, LossBreakdown(l_all=value, lambda_gla=lam, **parts)
