"""Class-incremental learning with balanced softmax cross-entropy losses."""

from .autodiff import Tape, Tensor, backward, grad_check
from .data import (
    IncrementalSchedule,
    LabeledDataset,
    build_schedule,
    load_dataset,
    save_dataset,
    step_view,
    synthesize_gaussian_task,
)
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    InvalidLabelError,
    NumericError,
    ShapeError,
)
from .losses import (
    ClassPrior,
    balanced_softmax_ce,
    build_lambda,
    combined_loss,
    distillation_loss,
    rescaled_softmax_ce,
    standard_softmax_ce,
)
from .memory import ReplayMemory, herding_select, random_select, training_set
from .metrics import (
    RunRecord,
    StepReport,
    average_incremental_accuracy,
    confusion_matrix,
    group_accuracy,
    top_k_accuracy,
)
from .model import ClassifierModel, ModelSnapshot
from .trainer import (
    MetaState,
    TrainConfig,
    meta_alpha_update,
    run_base_step,
    run_incremental_step,
    run_meta_incremental_step,
)

__version__ = "0.1.0"
