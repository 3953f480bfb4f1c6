"""DGNet underwater image enhancement on a small numpy autodiff engine."""
from .clahe import ClaheConfig, clahe, make_pseudo_label
from .errors import (ConfigurationError, DGNetError, DimensionError, IntegrityError, NumericalError, UsageError,
                     ValidationError)
from .losses import LossWeights, total_loss
from .metrics import MetricReport, evaluate_image
from .nn import ARCH_ARMS, DGNet, ModelConfig, param_count
from .tensor import Parameter, Tensor
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
