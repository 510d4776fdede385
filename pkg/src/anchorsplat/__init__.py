"""Desk-scale differentiable Gaussian splatting with anchor-based and SH-degree dropout."""
from .dropout import DropoutConfig, DropoutPlan, build_dropout_set, make_plan
from .errors import (
    DatasetError,
    DegenerateInputError,
    EmptyBinError,
    InvalidParameterError,
    PlyParseError,
    TrainingDivergenceError,
)
from .gscore import Camera, GaussianCloud, count_parameters, eval_sh
from .io import load_dataset, load_ply, save_ply, truncate_sh_file
from .metrics import psnr, ssim
from .render import render_backward, render_forward, render_image
from .spatial import KnnIndex, compensation_study, morans_i
from .train import TrainConfig, train

__version__ = "0.1.0"
