"""Binary vision transformer inference engine and analysis tools.

The package splits into a packed-arithmetic core (bittensor, quant), the
layer and attention kernels built on it (layers, attention), the model
container with its config and weight formats (model, configio), cost and
capacity analysis (analysis, report), and a reverse-mode training stack
for the toy task (train). ``cli`` ties the pieces to a command line.
"""

from .analysis import CostReport, RepCapChain, count_costs, repcap
from .bittensor import BitMatrix, binary_gemm, gate_gemm, pack_mask, pack_signs
from .configio import load_bundled_model_config, parse_model_config, read_capability
from .errors import (
    BinaryViTError,
    ConfigError,
    ImageFormatError,
    ParameterError,
    ShapeError,
    TrainingDiverged,
    WeightFormatError,
)
from .model import (
    Model,
    ModelConfig,
    StageConfig,
    build_model,
    forward,
    forward_with_trace,
    load_weights,
    save_weights,
)
from .quant import binarize_weights, quantize_attention_probs, rsign
from .train.loop import TrainResult, train_toy

__version__ = "0.1.0"

__all__ = [
    "BinaryViTError",
    "BitMatrix",
    "ConfigError",
    "CostReport",
    "ImageFormatError",
    "Model",
    "ModelConfig",
    "ParameterError",
    "RepCapChain",
    "ShapeError",
    "StageConfig",
    "TrainResult",
    "TrainingDiverged",
    "WeightFormatError",
    "binarize_weights",
    "binary_gemm",
    "build_model",
    "count_costs",
    "forward",
    "forward_with_trace",
    "gate_gemm",
    "load_bundled_model_config",
    "load_weights",
    "pack_mask",
    "pack_signs",
    "parse_model_config",
    "quantize_attention_probs",
    "read_capability",
    "repcap",
    "rsign",
    "save_weights",
    "train_toy",
    "__version__",
]
