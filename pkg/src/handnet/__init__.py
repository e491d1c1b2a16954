"""Dense attention-augmented convolutional keypoint regression, in numpy.

Everything here is built from scratch on plain ndarrays: convolution
kernels (numba-compiled with a pure-numpy fallback), manual backprop,
anti-aliased downsampling, 2D self-attention with relative position
terms, and the metric/evaluation stack. See README.md for the tour.
"""

__version__ = "0.1.0"

from .blocks import (AAInvertedBottleneck, BlockConfig, DenseBlock,
                     InvertedBottleneck, TransitionLayer)
from .blurpool import (BlurPool, PoolExtractor, blur_pool, make_blur_filter,
                       shift_equivariance_deviation)
from .gradcheck import GradCheckReport, grad_check
from .kernels import active_backend, available_backends, set_backend
from .metrics import (EvalRecord, KeypointSet, ShiftReport, auc, epe,
                      pck_curve, pckh_curve, read_records, shift_robustness)
from .network import (Network, NetworkConfig, ablation_config, count_flops,
                      count_params, default_config, load_weights,
                      micro_config, save_weights, tiny_config)
from .tensor import (ConfigError, ConvWeights, FormatError, ShapeError,
                     load_tensor, save_tensor)
from .training import (SGD, DivergenceError, LRSchedule, coordinate_loss,
                       cyclical_lr, make_synth_dataset, synth_hand, train_toy)

__all__ = [
    "AAInvertedBottleneck", "BlockConfig", "BlurPool", "ConfigError",
    "ConvWeights", "DenseBlock", "DivergenceError", "EvalRecord",
    "FormatError", "GradCheckReport", "InvertedBottleneck", "KeypointSet",
    "LRSchedule", "Network", "NetworkConfig", "PoolExtractor", "SGD",
    "ShapeError", "ShiftReport", "TransitionLayer", "ablation_config",
    "active_backend", "auc", "available_backends", "blur_pool",
    "coordinate_loss", "count_flops", "count_params", "cyclical_lr",
    "default_config", "epe", "grad_check", "load_tensor", "load_weights",
    "make_blur_filter", "make_synth_dataset", "micro_config", "pck_curve",
    "pckh_curve", "read_records", "save_tensor", "save_weights",
    "set_backend", "shift_equivariance_deviation", "shift_robustness",
    "synth_hand", "tiny_config", "train_toy", "__version__",
]
