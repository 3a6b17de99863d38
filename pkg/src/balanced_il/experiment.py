"""Experiment configuration and the end-to-end run / compare / sweep drivers.

Configs are INI files with one section per block::

    [dataset]
    source = synthetic
    num_classes = 10
    dim = 16

    [schedule]
    base_count = 5
    steps = 5

    [memory]
    size = 5

    [loss]
    mode = relaxed
    epsilon = 0.2%

    [run]
    seed = 0

Any field left out keeps its default. ``epsilon`` accepts an absolute value or
a percentage of the smallest new-class count of each step.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    LabeledDataset,
    build_schedule,
    cumulative_view,
    load_dataset,
    remap_dataset,
    step_view,
    synthesize_gaussian_task,
)
from .errors import ConfigError
from .memory import ReplayMemory
from .metrics import RunRecord, write_confusion_csv
from .model import ClassifierModel
from .trainer import (
    MetaState,
    TrainConfig,
    run_base_step,
    run_incremental_step,
    run_meta_incremental_step,
)


@dataclass
class DatasetSection:
    source: str = "synthetic"  # synthetic | file
    num_classes: int = 10
    dim: int = 16
    train_per_class: int = 100
    test_per_class: int = 100
    spread: float = 0.3
    radius: float = 1.0
    seed: int = -1  # -1: follow the run seed
    train_path: str = ""
    test_path: str = ""
    format: str = "csv"


@dataclass
class ScheduleSection:
    base_count: int = 5
    steps: int = 5
    order_seed: int = -1  # -1: follow the run seed


@dataclass
class MemorySection:
    policy: str = "growing"
    size: int = 5
    selection: str = "herding"
    herding_features: str = "initial"


@dataclass
class LossSection:
    mode: str = "standard"
    alpha: float = 1.0
    epsilon: str = "0.2%"


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.02
    milestones: str = "15,25"
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    temperature: float = 2.0
    oversampling: str = "none"
    finetune_epochs: int = 0
    finetune_lr: float = 0.01
    hidden: str = "64,64"


@dataclass
class MetaSection:
    alpha_lr: float = 10.0
    period: int = 10
    val_fraction: float = 0.1
    clip_low: float = 1e-3
    clip_high: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    out: str = "results"
    run_id: str = ""


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    memory: MemorySection = field(default_factory=MemorySection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    meta: MetaSection = field(default_factory=MetaSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)

    @property
    def run_id(self) -> str:
        return self.run.run_id or f"{self.loss.mode}_seed{self.run.seed}"

    def set(self, dotted: str, value) -> None:
        """Assign ``section.field`` from a string or a typed value."""
        section_name, _, name = dotted.partition(".")
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section) or not name:
            raise ConfigError(f"unknown config field {dotted!r}")
        if not hasattr(section, name):
            raise ConfigError(f"unknown config field {dotted!r}")
        default = getattr(type(section)(), name)
        setattr(section, name, _coerce(dotted, value, type(default)))


def _coerce(name: str, value, kind):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is int:
            return int(str(value).strip())
        if kind is float:
            return float(str(value).strip())
        return str(value).strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file does not parse: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(f"{section}.{key}", value)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# Validation and derived settings
# ----------------------------------------------------------------------------


def parse_epsilon(raw) -> tuple[float, bool]:
    """``"0.2%"`` -> (0.2, True); ``"1.5"`` -> (1.5, False)."""
    text = str(raw).strip()
    percent = text.endswith("%")
    try:
        value = float(text[:-1] if percent else text)
    except ValueError:
        raise ConfigError(f"loss.epsilon: cannot read {raw!r}") from None
    if value < 0 or not np.isfinite(value):
        raise ConfigError(f"loss.epsilon must be >= 0, got {raw!r}")
    return value, percent


def resolve_epsilon(raw, new_class_counts) -> float:
    """Absolute epsilon; percentages refer to the smallest new-class count."""
    value, percent = parse_epsilon(raw)
    if not percent:
        return value
    counts = np.asarray(new_class_counts)
    counts = counts[counts > 0]
    return value / 100.0 * float(counts.min()) if counts.size else 0.0


def _int_list(name: str, text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.dataset
    if d.source == "synthetic":
        if d.train_path or d.test_path:
            raise ConfigError("dataset: give either source = synthetic or file paths, not both")
        for name in ("num_classes", "dim", "train_per_class", "test_per_class"):
            if getattr(d, name) < 1:
                raise ConfigError(f"dataset.{name} must be positive")
        if d.dim < 2:
            raise ConfigError("dataset.dim must be >= 2")
        if d.spread < 0:
            raise ConfigError("dataset.spread must be >= 0")
    elif d.source == "file":
        if not d.train_path or not d.test_path:
            raise ConfigError("dataset: source = file needs train_path and test_path")
        if d.format not in ("csv", "binary"):
            raise ConfigError(f"dataset.format must be csv or binary, got {d.format!r}")
    else:
        raise ConfigError(f"dataset.source must be synthetic or file, got {d.source!r}")

    if cfg.memory.policy not in ("growing", "fixed"):
        raise ConfigError(f"memory.policy must be growing or fixed, got {cfg.memory.policy!r}")
    if cfg.memory.selection not in ("herding", "random"):
        raise ConfigError("memory.selection must be herding or random")
    if cfg.memory.herding_features not in ("trained", "initial"):
        raise ConfigError("memory.herding_features must be trained or initial")
    if cfg.memory.size < 0:
        raise ConfigError("memory.size must be >= 0")
    if not 0 <= cfg.loss.alpha <= 1:
        raise ConfigError(f"loss.alpha must lie in [0, 1], got {cfg.loss.alpha}")
    eps, _ = parse_epsilon(cfg.loss.epsilon)
    if cfg.loss.mode == "relaxed" and eps == 0 and cfg.memory.size > 0:
        raise ConfigError("loss.epsilon = 0 gives replayed old classes zero weight; "
                          "use memory.size = 0 or a positive epsilon")
    _int_list("train.hidden", cfg.train.hidden)
    try:
        train_config(cfg)
        meta_state(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: ExperimentConfig, epsilon: float = 0.0) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
        milestones=_int_list("train.milestones", t.milestones), lr_decay=t.lr_decay,
        momentum=t.momentum, weight_decay=t.weight_decay, loss=cfg.loss.mode,
        alpha=cfg.loss.alpha, epsilon=epsilon, temperature=t.temperature,
        oversampling=t.oversampling, finetune_epochs=t.finetune_epochs,
        finetune_lr=t.finetune_lr, seed=cfg.run.seed,
    )


def meta_state(cfg: ExperimentConfig) -> MetaState:
    m = cfg.meta
    return MetaState(alpha_lr=m.alpha_lr, period=m.period, val_fraction=m.val_fraction,
                     clip=(m.clip_low, m.clip_high))


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.source == "synthetic":
        seed = cfg.run.seed if d.seed < 0 else d.seed
        return synthesize_gaussian_task(d.num_classes, d.dim, d.train_per_class,
                                        d.test_per_class, d.spread, seed, d.radius)
    train = load_dataset(d.train_path, d.format)
    test = load_dataset(d.test_path, d.format)
    n = max(train.num_classes, test.num_classes)
    if train.dim != test.dim:
        raise ConfigError("train and test files have different feature dimensions")
    return train.with_num_classes(n), test.with_num_classes(n)


# ----------------------------------------------------------------------------
# Drivers
# ----------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    """Models and memory after a run, for callers that want more than the record."""

    record: RunRecord
    model: ClassifierModel
    memory: ReplayMemory
    checkpoints: list = field(default_factory=list)
    memories: list = field(default_factory=list)


def execute(cfg: ExperimentConfig, keep_artifacts: bool = False):
    """Run every step in memory and return the :class:`RunRecord`."""
    validate(cfg)
    train, test = load_data(cfg)
    order_seed = cfg.run.seed if cfg.schedule.order_seed < 0 else cfg.schedule.order_seed
    try:
        schedule = build_schedule(train.num_classes, cfg.schedule.base_count,
                                  cfg.schedule.steps, order_seed)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    train, test = remap_dataset(train, schedule), remap_dataset(test, schedule)
    if cfg.loss.mode == "meta" and schedule.num_steps:
        _check_meta_split(cfg, schedule.num_classes)
    seed = cfg.run.seed
    base = schedule.base_count

    model = ClassifierModel(train.dim, base, hidden=_int_list("train.hidden", cfg.train.hidden),
                            seed=seed)
    mem = ReplayMemory(cfg.memory.policy, cfg.memory.size, cfg.memory.selection, source=train,
                       seed=seed, herding_features=cfg.memory.herding_features)
    base_cfg = train_config(cfg)
    if base_cfg.loss == "meta":
        base_cfg.loss = "balanced"
    reports = [run_base_step(model, step_view(train, schedule, 0), base_cfg,
                             cumulative_view(test, schedule, 0), mem if cfg.memory.size else None)]
    checkpoints = [model.state()]
    memories = [copy.deepcopy(mem.store)]

    for t in range(1, schedule.num_steps + 1):
        data_t = step_view(train, schedule, t)
        new_counts = data_t.class_counts(schedule.num_classes)[schedule.groups[t]]
        tcfg = train_config(cfg, resolve_epsilon(cfg.loss.epsilon, new_counts))
        snapshot = model.snapshot()
        model.expand_head(len(schedule.groups[t]), seed=seed * 1000 + t)
        test_t = cumulative_view(test, schedule, t)
        step_mem = mem if cfg.memory.size else None
        if tcfg.loss == "meta":
            report = run_meta_incremental_step(model, snapshot, data_t, step_mem, tcfg,
                                               meta_state(cfg), test_t, t, base)
        else:
            report = run_incremental_step(model, snapshot, data_t, step_mem, tcfg, test_t, t, base)
        reports.append(report)
        checkpoints.append(model.state())
        memories.append(copy.deepcopy(mem.store))

    record = RunRecord(cfg.to_dict(), reports)
    if keep_artifacts:
        return RunArtifacts(record, model, mem, checkpoints, memories)
    return record


def _check_meta_split(cfg: ExperimentConfig, num_classes: int) -> None:
    per_class = cfg.memory.size if cfg.memory.policy == "growing" else (
        cfg.memory.size // num_classes)
    if int(cfg.meta.val_fraction * per_class) < 1:
        raise ConfigError(
            f"meta mode needs meta.val_fraction x exemplars per class >= 1, got "
            f"{cfg.meta.val_fraction} x {per_class}; raise memory.size or meta.val_fraction")


def output_name(run_id: str, step: int | None, kind: str) -> str:
    return f"{run_id}_{kind}" if step is None else f"{run_id}_step{step}_{kind}"


def emit_confusion(record: RunRecord, out_dir, run_id: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in record.reports:
        for log_scale, kind in ((False, "confusion.csv"), (True, "confusion_log1p.csv")):
            path = out_dir / output_name(run_id, r.step, kind)
            write_confusion_csv(r.confusion, path, log_scale)
            written.append(path)
    return written


def run(cfg: ExperimentConfig) -> RunRecord:
    """Execute and write the record, confusion CSVs, memory state and checkpoints."""
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.run_id
    failed = out / output_name(run_id, None, "FAILED")
    if failed.exists():
        failed.unlink()
    try:
        arts = execute(cfg, keep_artifacts=True)
    except ArithmeticError as exc:
        failed.write_text(f"run aborted: {exc}\n")
        raise
    record = arts.record
    record.save(out / output_name(run_id, None, "record.json"))
    emit_confusion(record, out, run_id)

    for r, state, store in zip(record.reports, arts.checkpoints, arts.memories):
        ckpt = _model_from_state(arts.model, state)
        ckpt.save(out / output_name(run_id, r.step, "model.ckpt"))
        mem = ReplayMemory(cfg.memory.policy, cfg.memory.size, cfg.memory.selection)
        mem.store = store
        mem.save(out / output_name(run_id, r.step, "memory.txt"))
    timings = {str(r.step): round(r.seconds, 3) for r in record.reports}
    (out / output_name(run_id, None, "timings.json")).write_text(json.dumps(timings) + "\n")
    return record


def _model_from_state(model: ClassifierModel, state) -> ClassifierModel:
    from .autodiff import Tensor
    from .model import Layer

    clone = ClassifierModel.__new__(ClassifierModel)
    clone.layers = []
    for i, layer in enumerate(model.layers):
        clone.layers.append(Layer(Tensor(state[2 * i], True), Tensor(state[2 * i + 1], True),
                                  layer.relu))
    return clone


COMPARABLE_FIELDS = {
    "loss.mode", "loss.alpha", "loss.epsilon", "train.oversampling", "train.finetune_epochs",
    "train.finetune_lr", "meta.alpha_lr", "meta.period", "meta.val_fraction", "meta.clip_low",
    "meta.clip_high", "run.out", "run.run_id",
}


def config_differences(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(
        f"{s}.{k}" for s in da for k in da[s] if da[s][k] != db[s][k]
    )


@dataclass
class Comparison:
    seeds: list
    a: list  # average incremental accuracy per seed
    b: list

    @property
    def differences(self) -> list:
        return [y - x for x, y in zip(self.a, self.b)]

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.a))

    @property
    def mean_b(self) -> float:
        return float(np.mean(self.b))

    @property
    def mean_difference(self) -> float:
        return float(np.mean(self.differences))

    def table(self, label_a: str = "A", label_b: str = "B") -> str:
        rows = [f"{'seed':>6}  {label_a:>12}  {label_b:>12}  {'B - A':>8}"]
        for s, x, y, d in zip(self.seeds, self.a, self.b, self.differences):
            rows.append(f"{s:>6}  {x:>12.2f}  {y:>12.2f}  {d:>+8.2f}")
        rows.append(f"{'mean':>6}  {self.mean_a:>12.2f}  {self.mean_b:>12.2f}  "
                    f"{self.mean_difference:>+8.2f}")
        return "\n".join(rows)


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, seeds) -> Comparison:
    """Paired-seed average incremental accuracy of two loss/mitigation settings."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    extra = [f for f in config_differences(cfg_a, cfg_b)
             if f not in COMPARABLE_FIELDS and f != "run.seed"]
    if extra:
        raise ConfigError(f"configs differ outside loss/mitigation fields: {', '.join(extra)}")
    a_vals, b_vals = [], []
    for s in seeds:
        for cfg, acc in ((cfg_a, a_vals), (cfg_b, b_vals)):
            c = cfg.copy()
            c.run.seed = int(s)
            acc.append(execute(c).average_incremental_accuracy)
    return Comparison(seeds, a_vals, b_vals)


SWEEP_HEADERS = ("value", "final base accuracy", "final overall accuracy",
                 "average inc. accuracy")


@dataclass
class SweepRow:
    value: object
    final_base_accuracy: float
    final_overall_accuracy: float
    average_incremental_accuracy: float
    record: RunRecord = field(repr=False, compare=False, default=None)


def sweep(cfg: ExperimentConfig, field_name: str, values) -> list[SweepRow]:
    """One run per value of ``alpha`` or ``epsilon`` with a shared seed."""
    mode = cfg.loss.mode
    if field_name == "alpha":
        if mode != "alpha":
            raise ConfigError("an alpha sweep needs loss.mode = alpha")
    elif field_name == "epsilon":
        if mode != "relaxed":
            raise ConfigError("an epsilon sweep needs loss.mode = relaxed")
    else:
        raise ConfigError(f"cannot sweep {field_name!r}; choose alpha or epsilon")
    rows = []
    for v in values:
        c = cfg.copy()
        if field_name == "alpha":
            v = float(v)
            if not 0 <= v <= 1:
                raise ConfigError(f"alpha value {v} outside [0, 1]")
            c.loss.alpha = v
        else:
            parse_epsilon(v)
            c.loss.epsilon = str(v)
        rec = execute(c)
        final = rec.final
        rows.append(SweepRow(v, 100 * final.base_accuracy, 100 * final.top1_accuracy,
                             rec.average_incremental_accuracy, rec))
    return rows


def sweep_table(rows: list[SweepRow]) -> str:
    lines = [" | ".join(SWEEP_HEADERS)]
    for r in rows:
        lines.append(f"{r.value} | {r.final_base_accuracy:.2f} | {r.final_overall_accuracy:.2f} | "
                     f"{r.average_incremental_accuracy:.2f}")
    return "\n".join(lines)
