"""Temporal-convolution ResNets for keyword spotting.

MFCC frontend, numpy kernels with backprop, TC-ResNet / 2D-ResNet builders,
a momentum-SGD trainer, FAR/FRR evaluation and a cost/latency profiler.
"""

from .models import ModelInstance, ModelSpec, build_model, fold_batchnorm, forward, load_checkpoint, save_checkpoint
from .profiler import benchmark_latency, count_flops, count_params

__version__ = "0.1.0"

__all__ = [
    "ModelInstance",
    "ModelSpec",
    "benchmark_latency",
    "build_model",
    "count_flops",
    "count_params",
    "fold_batchnorm",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
