"""Softmax cross-entropy variants, distillation and the weighted combination.

Every balanced variant is the cross-entropy of the prior-weighted softmax

    q_k = lambda_k exp(z_k) / sum_j lambda_j exp(z_j)

computed in log space as ``log q = (z + log lambda) - logsumexp(z + log lambda)``.
Classes with ``lambda_k == 0`` are dropped from the denominator instead of
being given ``log 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidLabelError, ShapeError

LOSS_MODES = ("balanced", "alpha", "relaxed")


@dataclass
class ClassPrior:
    """Per-class sample counts plus the knobs that turn them into weights.

    ``old_set`` holds the previously encountered class ids. ``epsilon`` is in
    absolute sample units.
    """

    counts: np.ndarray
    old_set: frozenset = field(default_factory=frozenset)
    alpha: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("counts must be a vector")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        self.old_set = frozenset(int(c) for c in self.old_set)
        if any(c < 0 or c >= len(self.counts) for c in self.old_set):
            raise ValueError("old_set refers to classes outside counts")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def old_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[list(self.old_set)] = True
        return mask


def build_lambda(prior: ClassPrior, mode: str = "balanced") -> np.ndarray:
    """Per-class weights for the balanced softmax.

    balanced: ``n_i``; alpha: ``alpha * n_i`` on old classes; relaxed:
    ``epsilon`` on old classes. Entries equal to zero are masked by the loss.
    """
    lam = prior.counts.astype(np.float64)
    old = prior.old_mask()
    if mode == "balanced":
        return lam
    if mode == "alpha":
        if not 0.0 <= prior.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {prior.alpha}")
        lam[old] *= prior.alpha
        return lam
    if mode == "relaxed":
        if prior.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {prior.epsilon}")
        lam[old] = prior.epsilon
        return lam
    raise ValueError(f"unknown lambda mode {mode!r}; expected one of {LOSS_MODES}")


def _labels(labels, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidLabelError(f"labels must lie in [0, {num_classes})")
    return y


def _check_logits(logits: Tensor) -> None:
    if logits.values.ndim != 2:
        raise ShapeError(f"logits must be [B, N], got {logits.shape}")


def log_balanced_softmax(logits, lam) -> np.ndarray:
    """Plain-numpy ``log q`` with ``-inf`` on masked classes."""
    z = np.asarray(logits.values if isinstance(logits, Tensor) else logits, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    live = lam > 0
    with np.errstate(divide="ignore"):
        shifted = np.where(live, z + np.log(np.where(live, lam, 1.0)), -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    return shifted - (m + np.log(np.exp(shifted - m).sum(axis=1, keepdims=True)))


def balanced_softmax(logits, lam) -> np.ndarray:
    return np.exp(log_balanced_softmax(logits, lam))


def balanced_ce_gradient(logits, labels, lam) -> np.ndarray:
    """Closed-form d(mean loss)/dz: ``(q - onehot(y)) / B``."""
    q = balanced_softmax(logits, lam)
    y = np.asarray(labels, dtype=np.int64)
    q[np.arange(len(y)), y] -= 1.0
    return q / len(y)


def balanced_softmax_ce(logits: Tensor, labels, lam) -> Tensor:
    """Mean cross-entropy of the lambda-weighted softmax."""
    logits = ad._as_tensor(logits)
    _check_logits(logits)
    lam = np.asarray(lam, dtype=np.float64)
    b, n = logits.shape
    if lam.shape != (n,):
        raise ShapeError(f"lambda has {lam.shape} entries for {n} classes")
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    live = np.flatnonzero(lam > 0)
    if live.size == 0:
        raise ValueError("every class is masked (all lambda are zero)")
    y = _labels(labels, b, n)
    if np.any(lam[y] == 0):
        raise InvalidLabelError("a label belongs to a class with lambda == 0")

    log_lam = np.zeros(n)
    log_lam[live] = np.log(lam[live])
    shifted = ad.add_rowwise(logits, log_lam)
    denom_in = shifted if live.size == n else ad.take_cols(shifted, live)
    per_sample = ad.sub(ad.logsumexp(denom_in, axis=1), ad.pick(shifted, y))
    return ad.mean(per_sample)


def standard_softmax_ce(logits: Tensor, labels) -> Tensor:
    logits = ad._as_tensor(logits)
    _check_logits(logits)
    b, n = logits.shape
    y = _labels(labels, b, n)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), ad.pick(logits, y)))


def rescaled_softmax_ce(logits: Tensor, labels, counts) -> Tensor:
    """Standard CE with each sample weighted by ``mean(counts) / counts[y]``."""
    logits = ad._as_tensor(logits)
    _check_logits(logits)
    b, n = logits.shape
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (n,):
        raise ShapeError(f"counts has {counts.shape} entries for {n} classes")
    y = _labels(labels, b, n)
    if np.any(counts[y] <= 0):
        raise InvalidLabelError("a label belongs to a class with zero count")
    weights = counts.mean() / counts[y]
    per_sample = ad.sub(ad.logsumexp(logits, axis=1), ad.pick(logits, y))
    return ad.mean(ad.mul(per_sample, weights))


def distillation_loss(new_logits: Tensor, old_logits, temperature: float = 2.0,
                      n_old: int | None = None) -> Tensor:
    """Temperature-softened cross-entropy to the teacher over the first ``n_old`` classes.

    Scaled by ``T**2`` and averaged over the batch.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    new_logits = ad._as_tensor(new_logits)
    _check_logits(new_logits)
    teacher = np.asarray(old_logits.values if isinstance(old_logits, Tensor) else old_logits,
                         dtype=np.float64)
    n_old = teacher.shape[1] if n_old is None else n_old
    if n_old > new_logits.shape[1]:
        raise ShapeError(f"cannot distill {n_old} classes from {new_logits.shape[1]} logits")
    if teacher.shape[0] != new_logits.shape[0] or teacher.shape[1] < n_old:
        raise ShapeError(f"teacher logits {teacher.shape} do not cover the batch")

    t = teacher[:, :n_old] / temperature
    t = t - t.max(axis=1, keepdims=True)
    p_hat = np.exp(t)
    p_hat /= p_hat.sum(axis=1, keepdims=True)

    zs = ad.scale(ad.take_cols(new_logits, slice(0, n_old)), 1.0 / temperature)
    log_p = ad.sub_colwise(zs, ad.logsumexp(zs, axis=1))
    per_sample = ad.negate(ad.sum(ad.mul(log_p, p_hat), axis=1))
    return ad.scale(ad.mean(per_sample), temperature**2)


def distillation_weight(n_prev: int, n_cur: int) -> float:
    """rho = N_{t-1} / N_t."""
    if not 0 <= n_prev < n_cur:
        raise ValueError(f"need 0 <= n_prev < n_cur, got {n_prev}, {n_cur}")
    return n_prev / n_cur


def combined_loss(cls_loss, dist_loss, n_prev: int, n_cur: int):
    """rho * distillation + (1 - rho) * classification; base step returns cls_loss."""
    rho = distillation_weight(n_prev, n_cur)
    if n_prev == 0:
        return cls_loss
    if isinstance(cls_loss, Tensor) or isinstance(dist_loss, Tensor):
        return ad.add(ad.scale(dist_loss, rho), ad.scale(cls_loss, 1.0 - rho))
    return rho * dist_loss + (1.0 - rho) * cls_loss
