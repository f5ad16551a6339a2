"""Deterministic software model of an int8 MC-Dropout inference accelerator.

The package mirrors the accelerator's numerics exactly - symmetric int8
quantization, 32-bit accumulation, LFSR-driven filter-wise dropout masks,
fixed-point 1/(1-p) rescaling - and adds the analytic resource/latency
models plus a design-space exploration over {L, S, PC, PF, PV}.
"""

from .engine import (McdConfig, PredictiveResult, SamplePrediction, apply_mcd,
                     forward_once, predict, predict_with_ic, run_layer)
from .metrics import (EvalSet, MetricsReport, accuracy,
                      average_predictive_entropy, expected_calibration_error,
                      gaussian_noise_set)
from .network import (AvgPool, BatchNorm, Conv, DropoutSite, Linear, MaxPool,
                      Network, Relu, Shortcut, load_network, save_network)
from .perfmodel import (HwConfig, LatencyEstimate, ResourceBudget,
                        ResourceEstimate, fits, layer_cycles, network_latency,
                        resource_estimate)
from .sampler import BernoulliSampler, Lfsr, LfsrSpec, MaskWord
from .tensor import QuantTensor, choose_scale, dequantize, quantize

__version__ = "0.1.0"
