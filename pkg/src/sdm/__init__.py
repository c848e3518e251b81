"""Differentiable spatial domain mapping for estimating a global XY translation
of a 3D point set from binary screen masks."""

__version__ = "0.1.0"

from .geometry import DEFAULT_INTRINSICS, DomainError, Intrinsics, project, unproject_at_depth
from .representation import Fragment, FragmentBuffer, add_theta, binary_mask, is_proper, render, rmin
from .dataset import SKY_THETA, GenParams, SceneConfig, add_noise, generate_config, generate_corpus, load_config, save_config
from .core import assign_targets, build_adjustments, compute_kernels, forward, loss_and_grad
from .multiscale import reshape_down, reshape_up, sdm_pipeline, zoomed_target
from .optimizer import ConvergenceMonitor, HyperParams, NumericalError, TrainReport, train
from .evaluation import ExperimentSpec, StatRow, avg_deviation, gradcheck, run_noise_sweep
