from .checkpoint import CheckpointError, atomic_write_text, load_params, save_params
from .gradcheck import gradient_check, relative_error
from .nn import ConfigurationError, MLPSpec, init_mlp, mlp_forward
from .ops import (
    Segments,
    broadcast_segments,
    concat,
    layer_norm,
    linear,
    mean_pool,
    place_rows,
    relu,
    segment_mean,
    segment_softmax,
    segment_sum,
    smooth_l1,
    softmax,
    take_rows,
)
from .optim import Optimizer, OptimizerConfig, optimizer_step
from .tensor import DimensionError, PreconditionError, StateError, Tensor, as_tensor, parameter

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DimensionError",
    "MLPSpec",
    "Optimizer",
    "OptimizerConfig",
    "PreconditionError",
    "Segments",
    "StateError",
    "Tensor",
    "as_tensor",
    "atomic_write_text",
    "broadcast_segments",
    "concat",
    "gradient_check",
    "init_mlp",
    "layer_norm",
    "linear",
    "load_params",
    "mean_pool",
    "mlp_forward",
    "optimizer_step",
    "parameter",
    "place_rows",
    "relative_error",
    "relu",
    "save_params",
    "segment_mean",
    "segment_softmax",
    "segment_sum",
    "smooth_l1",
    "softmax",
    "take_rows",
]
