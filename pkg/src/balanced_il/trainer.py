"""Base and incremental training steps, meta-learned alpha and the bias-mitigation baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape, Tensor
from .data import LabeledDataset, concat
from .errors import NumericError, ShapeError
from .memory import ReplayMemory, training_set
from .metrics import StepReport, evaluate
from .model import ClassifierModel, ModelSnapshot

TRAIN_LOSSES = ("standard", "balanced", "alpha", "relaxed", "rescaled", "meta")
OVERSAMPLING = ("none", "memory", "class")


@dataclass
class TrainConfig:
    """Optimizer and loss settings shared by every step.

    ``epsilon`` is in absolute sample units. ``milestones`` are epoch indices
    after which the learning rate is multiplied by ``lr_decay``.
    """

    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.02
    milestones: tuple = (15, 25)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    loss: str = "standard"
    alpha: float = 1.0
    epsilon: float = 0.0
    temperature: float = 2.0
    oversampling: str = "none"
    finetune_epochs: int = 0
    finetune_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.loss not in TRAIN_LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {TRAIN_LOSSES}")
        if self.oversampling not in OVERSAMPLING:
            raise ValueError(f"unknown oversampling {self.oversampling!r}")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if m <= epoch)


@dataclass
class MetaState:
    """Learnable old-class weight and the settings of its update rule."""

    alpha: float = 1.0
    alpha_lr: float = 10.0
    period: int = 10
    val_fraction: float = 0.1
    clip: tuple = (1e-3, 1.0)
    trajectory: list = field(default_factory=list)

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        lo, hi = self.clip
        if not 0 < lo <= hi:
            raise ValueError("clip range must be positive and ordered")


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.values
            v *= self.momentum
            v += g
            p.values -= lr * v


# ----------------------------------------------------------------------------
# Per-step objective
# ----------------------------------------------------------------------------


@dataclass
class StepContext:
    """Everything the training objective needs besides the batch."""

    counts: np.ndarray
    old_classes: frozenset
    n_prev: int
    n_cur: int
    loss: str = "standard"
    alpha: float = 1.0
    epsilon: float = 0.0
    temperature: float = 2.0
    teacher: ModelSnapshot | None = None

    @property
    def rho(self) -> float:
        return losses.distillation_weight(self.n_prev, self.n_cur)

    def old_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.counts), dtype=bool)
        mask[list(self.old_classes)] = True
        return mask

    def lambdas(self, alpha: float | None = None) -> np.ndarray:
        mode = {"meta": "alpha"}.get(self.loss, self.loss)
        if mode not in losses.LOSS_MODES:
            mode = "balanced"
        if mode == "alpha":
            # unvalidated on purpose: finite-difference probes step past 1.0
            lam = self.counts.astype(np.float64)
            lam[self.old_mask()] *= self.alpha if alpha is None else alpha
            return lam
        prior = losses.ClassPrior(self.counts, self.old_classes, self.alpha, self.epsilon)
        return losses.build_lambda(prior, mode)


def step_context(counts, n_prev: int, n_cur: int, cfg: TrainConfig,
                 teacher: ModelSnapshot | None = None) -> StepContext:
    return StepContext(np.asarray(counts), frozenset(range(n_prev)), n_prev, n_cur, cfg.loss,
                       cfg.alpha, cfg.epsilon, cfg.temperature, teacher)


def classification_loss(logits: Tensor, y, ctx: StepContext, alpha: float | None = None) -> Tensor:
    if ctx.loss == "standard":
        return losses.standard_softmax_ce(logits, y)
    if ctx.loss == "rescaled":
        return losses.rescaled_softmax_ce(logits, y, ctx.counts)
    return losses.balanced_softmax_ce(logits, y, ctx.lambdas(alpha))


def objective(logits: Tensor, x, y, ctx: StepContext, alpha: float | None = None,
              teacher_logits=None) -> Tensor:
    """Classification loss, combined with distillation when old classes exist."""
    cls = classification_loss(logits, y, ctx, alpha)
    if ctx.n_prev == 0:
        return cls
    if teacher_logits is None:
        teacher_logits = ctx.teacher.forward(x)
    dist = losses.distillation_loss(logits, teacher_logits, ctx.temperature, ctx.n_prev)
    return losses.combined_loss(cls, dist, ctx.n_prev, ctx.n_cur)


def _gradient_step(model: ClassifierModel, opt: SGD, x, y, ctx: StepContext, lr: float,
                   alpha: float | None = None, teacher_logits=None) -> float:
    opt.zero_grad()
    with Tape():
        loss = objective(model.forward(x), x, y, ctx, alpha, teacher_logits)
        ad.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError("training loss became non-finite")
    opt.step(lr)
    return value


# ----------------------------------------------------------------------------
# Batch streams
# ----------------------------------------------------------------------------


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def oversampled_batches(merged: LabeledDataset, mode: str, batch_size: int, seed,
                        n_old: int = 0) -> Iterator[np.ndarray]:
    """One epoch of row-index batches with old classes oversampled.

    memory: half of each batch comes from classes ``< n_old`` (drawn with
    replacement), the other half walks the new-class rows once.
    class: every slot first draws a class uniformly, then a sample of it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = merged.labels
    if mode == "memory":
        old_rows = np.flatnonzero(labels < n_old)
        new_rows = np.flatnonzero(labels >= n_old)
        if old_rows.size == 0:
            raise ValueError("memory oversampling needs stored exemplars")
        if new_rows.size == 0:
            raise ValueError("memory oversampling needs new-class samples")
        n_old_slots = batch_size // 2
        n_new_slots = batch_size - n_old_slots
        new_order = rng.permutation(new_rows)
        for start in range(0, len(new_order), n_new_slots):
            new_part = new_order[start:start + n_new_slots]
            if len(new_part) < n_new_slots:
                new_part = np.concatenate(
                    [new_part, rng.choice(new_rows, n_new_slots - len(new_part))])
            old_part = rng.choice(old_rows, n_old_slots, replace=True)
            yield np.concatenate([old_part, new_part])
    elif mode == "class":
        per_class = merged.class_indices()
        classes = np.array(sorted(per_class))
        for _ in range(math.ceil(len(labels) / batch_size)):
            picked = rng.choice(classes, batch_size)
            yield np.array([rng.choice(per_class[int(c)]) for c in picked], dtype=np.int64)
    else:
        raise ValueError(f"unknown oversampling mode {mode!r}")


def _epoch_batches(merged, cfg: TrainConfig, rng, n_old: int):
    if cfg.oversampling == "none" or n_old == 0:
        return shuffled_batches(len(merged), cfg.batch_size, rng)
    return oversampled_batches(merged, cfg.oversampling, cfg.batch_size, rng, n_old)


def _train(model, merged: LabeledDataset, ctx: StepContext, cfg: TrainConfig,
           rng: np.random.Generator, epochs: int | None = None, lr_fn=None) -> int:
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    lr_fn = lr_fn or cfg.lr_at
    steps = 0
    for epoch in range(cfg.epochs if epochs is None else epochs):
        lr = lr_fn(epoch)
        for rows in _epoch_batches(merged, cfg, rng, ctx.n_prev):
            _gradient_step(model, opt, merged.samples[rows], merged.labels[rows], ctx, lr)
            steps += 1
    return steps


def _herding_model(mem: ReplayMemory, model, start: ModelSnapshot):
    return start if mem.herding_features == "initial" else model


# ----------------------------------------------------------------------------
# Steps
# ----------------------------------------------------------------------------


def run_base_step(model: ClassifierModel, data: LabeledDataset, cfg: TrainConfig,
                  test: LabeledDataset | None = None, mem: ReplayMemory | None = None) -> StepReport:
    """Train on the base classes with the classification loss alone."""
    t0 = time.perf_counter()
    if len(data) == 0:
        raise ValueError("base step has no training data")
    n = model.num_classes
    if data.labels.max() >= n:
        raise ShapeError(f"labels exceed the model width {n}")
    start = model.snapshot()
    ctx = step_context(data.class_counts(n), 0, n, cfg)
    _train(model, data, ctx, cfg, _rng(cfg.seed, 0))
    if mem is not None:
        mem.update(data, _herding_model(mem, model, start))
    return evaluate(model, test if test is not None else data, 0, (0, n), (0, n),
                    seconds=time.perf_counter() - t0)


def _check_widths(model: ClassifierModel, snapshot: ModelSnapshot) -> tuple[int, int]:
    n_prev, n_cur = snapshot.num_classes, model.num_classes
    if n_prev >= n_cur:
        raise ShapeError(
            f"model width {n_cur} must exceed the snapshot width {n_prev}; expand the head first")
    return n_prev, n_cur


def _finish_step(model, step_data, mem, cfg, start, step, test, n_prev, n_cur, base_count,
                 trajectory, t0) -> StepReport:
    if mem is not None:
        mem.update(step_data, _herding_model(mem, model, start))
        if cfg.finetune_epochs > 0:
            balanced_finetune(model, mem, step_data, cfg.finetune_epochs, cfg.finetune_lr,
                              seed=(cfg.seed, step), batch_size=cfg.batch_size,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    test = test if test is not None else step_data
    return evaluate(model, test, step, (0, base_count), (n_prev, n_cur), trajectory,
                    seconds=time.perf_counter() - t0)


def run_incremental_step(model: ClassifierModel, snapshot: ModelSnapshot,
                         step_data: LabeledDataset, mem: ReplayMemory | None, cfg: TrainConfig,
                         test: LabeledDataset | None = None, step: int = 1,
                         base_count: int | None = None) -> StepReport:
    """One incremental step: classification + distillation on new data plus memory."""
    t0 = time.perf_counter()
    n_prev, n_cur = _check_widths(model, snapshot)
    if cfg.loss == "meta":
        return run_meta_incremental_step(model, snapshot, step_data, mem, cfg, MetaState(),
                                         test, step, base_count)
    merged, counts = training_set(step_data, mem, n_cur)
    ctx = step_context(counts, n_prev, n_cur, cfg, snapshot)
    start = model.snapshot()
    _train(model, merged, ctx, cfg, _rng(cfg.seed, step))
    return _finish_step(model, step_data, mem, cfg, start, step, test, n_prev, n_cur,
                        base_count or n_prev, [], t0)


# ----------------------------------------------------------------------------
# Meta-learned alpha
# ----------------------------------------------------------------------------


def split_balanced_validation(merged: LabeledDataset, counts, fraction: float, seed,
                              old_classes=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Carve a class-balanced validation set out of the merged training data.

    Every class contributes ``floor(fraction * min old-class count)`` samples;
    the rest form the training part.
    """
    counts = np.asarray(counts)
    present = np.flatnonzero(counts > 0)
    old = present if old_classes is None else np.array(sorted(old_classes), dtype=np.int64)
    if old.size == 0:
        raise ValueError("no old classes to size the validation split")
    k = int(math.floor(fraction * counts[old].min()))
    if k < 1:
        raise ValueError(
            f"validation split is empty: {fraction} x {counts[old].min()} samples per class < 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    val_rows = []
    for c in present:
        rows = np.flatnonzero(merged.labels == c)
        val_rows.append(np.sort(rng.choice(rows, k, replace=False)))
    val_rows = np.concatenate(val_rows)
    train_mask = np.ones(len(merged), dtype=bool)
    train_mask[val_rows] = False
    return merged.subset(np.flatnonzero(train_mask)), merged.subset(val_rows)


def _alpha_tangent(logits: np.ndarray, ctx: StepContext, alpha: float) -> np.ndarray:
    """d/d(alpha) of the classification part of d(loss)/d(logits)."""
    lam = ctx.lambdas(alpha)
    q = losses.balanced_softmax(logits, lam)
    s = np.where(ctx.old_mask() & (lam > 0), 1.0 / alpha, 0.0)
    dq = q * (s - (q * s).sum(axis=1, keepdims=True))
    weight = 1.0 if ctx.n_prev == 0 else 1.0 - ctx.rho
    return weight * dq / len(logits)


def virtual_update(model: ClassifierModel, x, y, ctx: StepContext, alpha: float,
                   inner_lr: float, teacher_logits=None) -> list[Tensor]:
    """theta* = theta - inner_lr * grad L_bal(theta, alpha); no momentum, no decay."""
    leaves = [Tensor(p.values, requires_grad=True) for p in model.parameters()]
    with Tape():
        ad.backward(objective(model.forward(x, leaves), x, y, ctx, alpha, teacher_logits))
    return [Tensor(p.values - inner_lr * p.grad) for p in leaves]


def alpha_hypergradient(model: ClassifierModel, batch_train, batch_val, alpha: float,
                        inner_lr: float, ctx: StepContext, teacher_logits=None) -> float:
    """d L_val(theta*(alpha)) / d alpha through one virtual SGD step."""
    x, y = batch_train
    xv, yv = batch_val
    leaves = [Tensor(p.values, requires_grad=True) for p in model.parameters()]
    with Tape():
        logits = model.forward(x, leaves)
        loss = objective(logits, x, y, ctx, alpha, teacher_logits)
        ad.backward(loss)
        grads = [p.grad.copy() for p in leaves]
        for p in leaves:
            p.zero_grad()
        tangent = _alpha_tangent(logits.values, ctx, alpha)
        ad.backward(ad.sum(ad.mul(logits, tangent)))
        dgrads = [p.grad for p in leaves]

    theta_star = [Tensor(p.values - inner_lr * g, requires_grad=True)
                  for p, g in zip(leaves, grads)]
    with Tape():
        ad.backward(losses.standard_softmax_ce(model.forward(xv, theta_star), yv))
    # d theta*/d alpha = -inner_lr * dgrad
    return float(-inner_lr * sum(np.vdot(t.grad, d) for t, d in zip(theta_star, dgrads)))


def meta_alpha_update(model: ClassifierModel, batch_train, batch_val, meta: MetaState,
                      inner_lr: float, ctx: StepContext, teacher_logits=None) -> float:
    """One hypergradient step on ``meta.alpha``; model parameters are left untouched."""
    hyper = alpha_hypergradient(model, batch_train, batch_val, meta.alpha, inner_lr, ctx,
                                teacher_logits)
    if not math.isfinite(hyper):
        raise NumericError("non-finite alpha hypergradient")
    lo, hi = meta.clip
    meta.alpha = float(np.clip(meta.alpha - meta.alpha_lr * hyper, lo, hi))
    return meta.alpha


def _cyclic_batches(n: int, batch_size: int, rng) -> Iterator[np.ndarray]:
    while True:
        yield from shuffled_batches(n, batch_size, rng)


def run_meta_incremental_step(model: ClassifierModel, snapshot: ModelSnapshot,
                              step_data: LabeledDataset, mem: ReplayMemory | None,
                              cfg: TrainConfig, meta: MetaState,
                              test: LabeledDataset | None = None, step: int = 1,
                              base_count: int | None = None) -> StepReport:
    """Incremental step whose old-class weight alpha is learned on a balanced split."""
    t0 = time.perf_counter()
    n_prev, n_cur = _check_widths(model, snapshot)
    merged, counts = training_set(step_data, mem, n_cur)
    rng = _rng(cfg.seed, step)
    train_part, val_part = split_balanced_validation(
        merged, counts, meta.val_fraction, rng, old_classes=range(n_prev))
    ctx = step_context(train_part.class_counts(n_cur), n_prev, n_cur, cfg, snapshot)
    ctx.loss = "meta"
    meta.alpha = 1.0
    meta.trajectory = []
    start = model.snapshot()

    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    val_stream = _cyclic_batches(len(val_part), cfg.batch_size, _rng(cfg.seed, step, 1))
    count = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for rows in _epoch_batches(train_part, cfg, rng, n_prev):
            x, y = train_part.samples[rows], train_part.labels[rows]
            teacher = snapshot.forward(x)
            count += 1
            if count % meta.period == 0:
                vrows = next(val_stream)
                meta_alpha_update(model, (x, y), (val_part.samples[vrows], val_part.labels[vrows]),
                                  meta, lr, ctx, teacher)
                meta.trajectory.append(meta.alpha)
            _gradient_step(model, opt, x, y, ctx, lr, meta.alpha, teacher)
    return _finish_step(model, step_data, mem, cfg, start, step, test, n_prev, n_cur,
                        base_count or n_prev, list(meta.trajectory), t0)


# ----------------------------------------------------------------------------
# Balanced finetuning
# ----------------------------------------------------------------------------


def balanced_finetune(model: ClassifierModel, mem: ReplayMemory, new_data: LabeledDataset,
                      epochs: int, lr: float, seed=0, batch_size: int = 32,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> int:
    """Standard-CE finetuning on a class-balanced set of ``quota`` samples per class.

    Old classes use their stored exemplars; new classes are downsampled.
    Returns the size of the finetuning set.
    """
    if epochs <= 0:
        return 0
    quota = mem.quota()
    if quota < 1:
        raise ValueError("balanced finetuning needs a non-empty memory quota")
    new_classes = new_data.class_indices()
    rng = np.random.default_rng(seed)
    parts = []
    stored = mem.exemplars()
    if stored is not None:
        keep = ~np.isin(stored.labels, list(new_classes))
        parts.append(stored.subset(np.flatnonzero(keep)))
    for c, rows in sorted(new_classes.items()):
        if len(rows) < quota:
            raise ValueError(f"class {c} has {len(rows)} samples, fewer than the quota {quota}")
        parts.append(new_data.subset(np.sort(rng.choice(rows, quota, replace=False))))
    old_counts = np.bincount(parts[0].labels) if stored is not None and len(parts[0]) else []
    if any(0 < n < quota for n in old_counts):
        raise ValueError("a stored class holds fewer exemplars than the quota")
    ft = concat(parts, model.num_classes)

    n = model.num_classes
    ctx = StepContext(ft.class_counts(n), frozenset(), 0, n, "standard")
    opt = SGD(model.parameters(), momentum, weight_decay)
    for _ in range(epochs):
        for rows in shuffled_batches(len(ft), batch_size, rng):
            _gradient_step(model, opt, ft.samples[rows], ft.labels[rows], ctx, lr)
    return len(ft)
