"""pqat: pseudo-quantization-aware training at desk scale.

A numpy library for training small networks with a unified fake-quantization
operator (learnable clipping boundary, learnable continuous bit-width),
automated mixed-precision allocation under average-bit or BOPs budgets, a
two-stage noise-then-quantize pipeline, and analysis instruments that check
the convergence and robustness behavior the operator is built on.
"""

from .autodiff import RngStream, Tensor, finite_difference_check
from .data import Dataset, load_idx_dataset, make_gaussian_blobs, make_regression_wave
from .models import NetworkSpec, build_network, constructed_sensitivity_pair
from .penalties import LayerCost, ResourceTarget, avg_bit_penalty, bops_penalty, total_loss
from .quantizer import QuantParams, minmax_forward, noise_forward, quant_forward, set_mode
from .training import TrainConfig, bn_recalibrate, evaluate_quant, train_fp, train_lsq, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "Tensor",
    "finite_difference_check",
    "Dataset",
    "load_idx_dataset",
    "make_gaussian_blobs",
    "make_regression_wave",
    "NetworkSpec",
    "build_network",
    "constructed_sensitivity_pair",
    "LayerCost",
    "ResourceTarget",
    "avg_bit_penalty",
    "bops_penalty",
    "total_loss",
    "QuantParams",
    "noise_forward",
    "quant_forward",
    "minmax_forward",
    "set_mode",
    "TrainConfig",
    "train_two_stage",
    "train_fp",
    "train_lsq",
    "bn_recalibrate",
    "evaluate_quant",
    "__version__",
]
