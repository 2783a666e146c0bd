"""Mixed-precision quantized neural network engine.

Quantizers with straight-through training, progressively decreasing
layer-wise bitwidth schedules, packed low-bit inference kernels, and
exact size accounting.
"""

from .quantize import (
    QuantSpec,
    QuantizedTensor,
    binarize,
    binarize_ste_grad,
    clamp_ste_grad,
    quantize_activations,
    quantize_unit,
    quantize_unit_ste_grad,
    quantize_weights,
)
from .bitpack import BitplaneTensor, PackedTensor, pack, to_bitplanes, unpack
from .kernels import (
    conv2d_quantized,
    gemm_bitserial,
    gemm_int_codes,
    gemm_reference,
    gemm_xnor,
)
from .schedule import (
    ArchLayer,
    BitwidthSchedule,
    LayerParamCount,
    SizeReport,
    average_bitwidth,
    plan_schedule,
    size_report,
    validate_schedule,
)
from .network import Network, backward_ste, forward_train
from .training import TrainConfig, train
from .deploy import PackedModel, deploy, fold_scales, load_model

__version__ = "0.1.0"
