"""Task-oriented feature alignment for unsupervised domain adaptation, on a
small numpy autodiff engine."""

from .autodiff import ConfigError, ContractError, DimensionError, Tensor
from .decompose import class_gradient, decompose, spatial_response_map
from .train import Method, TrainConfig, train_loop

__version__ = "0.1.0"
