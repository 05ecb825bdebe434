"""densekit: DenseNet-family convolutional networks on numpy.

Build, audit, train at desk scale and analyze DenseNet-family architectures
with a small reverse-mode autodiff engine.
"""
from .analysis import EfficiencyPoint, HeatmapReport, efficiency_sweep, heatmap_export, weight_heatmap
from .audit import AuditReport, count_flops, count_params
from .autodiff import Tape, Tensor, precision
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import Dataset, NormStats, batcher, compute_norm_stats, load_cifar10, parse_data_spec, synth_dataset
from .errors import (ConfigError, DataError, DenseKitError, FormatError, PlanMismatchError,
                     TrainingDivergedError, TruncatedFileError, UnsupportedAnalysisError, UsageError)
from .model import Model, forward, init_model, loss_and_grads, predict
from .plan import ArchConfig, LayerPlan, build_plan, densenet_bc, densenet_imagenet, load_config
from .trainer import TrainConfig, evaluate, lr_schedule, sgd_step, train

__version__ = "0.1.0"
