"""Sequential fine-tuning of dense-block networks with a from-scratch autodiff core."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ChecksumError,
    ConfigurationError,
    ContractError,
    DataFormatError,
    DimensionError,
    EvaluationError,
    SeqtuneError,
    ShapeMismatchError,
)
from .model import DenseNetConfig, build_densenet_lite, count_weighted_layers, replace_head  # noqa: E402
from .scheduler import FineTuneMode, SftSchedule, schedule_summary, trainable_groups_at_epoch  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402
