"""Neural processes trained and evaluated on noisy function observations."""

from .errors import CheckpointFormatError, ConfigError, NoisyNPError, NumericalError, TrainingError
from .funcdata import (KernelParams, KernelSpec, NoiseSpec, PointSet, TaskBatch, TaskConfig,
                       gp_posterior_oracle, gram_matrix, inject_noise, make_task,
                       sample_function, sample_kernel_params)
from .models import ModelConfig, ModelVariant, NeuralProcess, build_model
from .objectives import LossBreakdown, LossConfig, cnp_loss, np_loss, robust_loss
from .config import ExperimentConfig, load_config
from .results import EvalResult

__version__ = "0.1.0"
