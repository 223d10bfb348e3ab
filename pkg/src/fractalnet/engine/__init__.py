"""Numeric engine: kernels, parameter storage, graph executor, gradient checks, checkpoints."""

from .checkpoint import CheckpointError, FingerprintMismatch, load_checkpoint, read_checkpoint, save_checkpoint
from .executor import Activations, NonFiniteError, backward, forward, update_running_stats
from .gradcheck import grad_check, max_relative_error, numeric_gradient, run_suite
from .kernels import ContractViolation, ShapeError, UninitializedStatsError
from .params import ParameterStore, init_params, param_shapes
