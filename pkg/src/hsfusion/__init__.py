"""Two-stage hyperspectral/multispectral fusion on a self-contained autodiff engine."""

from .autodiff import ParamStore, Tensor, grad_check, precision, set_dtype
from .dataio import HsiCube, SceneSpec, degrade_spatial, degrade_spectral, gen_scene, read_cube, write_cube
from .errors import (ConfigError, ContractError, FormatError, MetricUndefined,
                     NonFiniteError, ShapeError)
from .metrics import MetricReport, anisotropy_map, ergas, metric_report, psnr, qnr, sam, ssim, uiqi
from .model import FusionConfig, fuse_arrays, init_params, model_forward
from .train import TrainConfig, adam_step, cosine_lr, load_checkpoint, loss, save_checkpoint, train

__all__ = [
    "ParamStore", "Tensor", "grad_check", "precision", "set_dtype",
    "HsiCube", "SceneSpec", "degrade_spatial", "degrade_spectral", "gen_scene",
    "read_cube", "write_cube",
    "ConfigError", "ContractError", "FormatError", "MetricUndefined",
    "NonFiniteError", "ShapeError",
    "MetricReport", "anisotropy_map", "ergas", "metric_report", "psnr", "qnr",
    "sam", "ssim", "uiqi",
    "FusionConfig", "fuse_arrays", "init_params", "model_forward",
    "TrainConfig", "adam_step", "cosine_lr", "load_checkpoint", "loss",
    "save_checkpoint", "train",
]

__version__ = "0.1.0"
