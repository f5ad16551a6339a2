"""Analytic resource and latency models of the accelerator.

Resources follow the closed-form equations of the target design: two
int8 multipliers share one DSP, the mask FIFO costs D*PF*DW bits, and
the input/weight buffers are sized by the largest layer.  The cycle
model charges only MAC tiling - ceil(F/PF) * ceil(C/PC) *
ceil(HoWo/PV) * K^2 per weight layer - with function units (BN, ReLU,
pooling, shortcut, dropout) pipelined at zero marginal cost.  It is a
first-order estimate meant for ranking design points, not a
cycle-accurate simulation; an optional calibration (factor, overhead)
can be fit against measured latencies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .network import (Conv, Linear, Network, bayesian_boundary,
                      weight_layer_indices)

PC_DOMAIN = (8, 16, 32, 64, 128)
PF_DOMAIN = (8, 16, 32, 64, 128)
PV_DOMAIN = (1, 4, 8, 16)

DEFAULT_CLOCK_MHZ = 225.0


class ResourceModelWarning(UserWarning):
    """Formula estimate contradicts a user-supplied measured value."""


@dataclass(frozen=True)
class HwConfig:
    """Accelerator tiling parameters plus FIFO depth and clock."""

    pc: int
    pf: int
    pv: int
    dw: int = 8
    fifo_depth: int = 16
    clock_mhz: float = DEFAULT_CLOCK_MHZ

    def __post_init__(self):
        if self.pc not in PC_DOMAIN:
            raise ValueError(f"PC must be one of {PC_DOMAIN}, got {self.pc}")
        if self.pf not in PF_DOMAIN:
            raise ValueError(f"PF must be one of {PF_DOMAIN}, got {self.pf}")
        if self.pv not in PV_DOMAIN:
            raise ValueError(f"PV must be one of {PV_DOMAIN}, got {self.pv}")
        if self.dw != 8:
            raise ValueError(f"only DW = 8 is supported, got {self.dw}")
        if self.fifo_depth < 1:
            raise ValueError(f"FIFO depth must be >= 1, got {self.fifo_depth}")
        if not (self.clock_mhz > 0):
            raise ValueError(f"clock_mhz must be positive, got {self.clock_mhz}")


@dataclass(frozen=True)
class ResourceBudget:
    dsp_total: int
    mem_total_bits: int

    def __post_init__(self):
        if self.dsp_total < 0 or self.mem_total_bits < 0:
            raise ValueError("budgets must be nonnegative")


@dataclass(frozen=True)
class ResourceEstimate:
    dsp: int
    mem_fifo_bits: int
    mem_in_bits: int
    mem_weight_bits: int

    @property
    def mem_total_bits(self) -> int:
        return self.mem_fifo_bits + self.mem_in_bits + self.mem_weight_bits


@dataclass(frozen=True)
class LatencyCalibration:
    """Per-platform fudge: latency_ms = factor * modeled_ms + overhead_ms."""

    factor: float = 1.0
    overhead_ms: float = 0.0

    @classmethod
    def fit(cls, modeled_ms, measured_ms) -> "LatencyCalibration":
        """Least-squares line through (modeled, measured) pairs."""
        x = np.asarray(modeled_ms, dtype=np.float64)
        y = np.asarray(measured_ms, dtype=np.float64)
        if x.size < 2 or x.size != y.size:
            raise ValueError("need at least two (modeled, measured) pairs")
        if np.ptp(x) == 0.0:
            raise ValueError("modeled latencies must not all be equal")
        factor, overhead = np.polyfit(x, y, 1)
        return cls(factor=float(factor), overhead_ms=float(overhead))


@dataclass(frozen=True)
class LatencyEstimate:
    """Prefix/suffix cycle split for S-sample inference at a given clock."""

    cycles_prefix: int
    cycles_suffix: int
    s: int
    ic: bool
    clock_mhz: float
    calibration: LatencyCalibration = LatencyCalibration()

    @property
    def total_cycles(self) -> int:
        if self.ic:
            return self.cycles_prefix + self.s * self.cycles_suffix
        return self.s * (self.cycles_prefix + self.cycles_suffix)

    @property
    def latency_ms(self) -> float:
        modeled = self.total_cycles / (self.clock_mhz * 1e3)
        return self.calibration.factor * modeled + self.calibration.overhead_ms


def _weight_layer_dims(layer, input_shape) -> tuple[int, int, int, int]:
    """(C, H_in, W_in, K) for the resource formulas; Linear maps to K=1, H=W=1."""
    if isinstance(layer, Conv):
        c, h, w = input_shape
        return c, h, w, layer.kernel
    if isinstance(layer, Linear):
        return layer.in_features, 1, 1, 1
    raise ValueError(f"{type(layer).__name__} is not a weight layer")


def resource_estimate(net: Network, hw: HwConfig) -> ResourceEstimate:
    """DSP and memory cost of running `net` on configuration `hw`.

    dsp        = PC*PF*PV / 2          (two multipliers per DSP)
    mem_fifo   = D * PF * DW
    mem_in     = max_i(C_i * H_i * W_i) * DW
    mem_weight = max_i(C_i * K_i^2) * PF * DW
    """
    product = hw.pc * hw.pf * hw.pv
    if product % 2:
        raise ValueError("PC*PF*PV must be even for the two-per-DSP packing")
    dsp = product // 2
    mem_fifo = hw.fifo_depth * hw.pf * hw.dw
    max_in = 0
    max_w = 0
    for i in weight_layer_indices(net.layers):
        c, h, w, k = _weight_layer_dims(net.layers[i], net.input_shapes[i])
        max_in = max(max_in, c * h * w)
        max_w = max(max_w, c * k * k)
    return ResourceEstimate(dsp=dsp, mem_fifo_bits=mem_fifo,
                            mem_in_bits=max_in * hw.dw,
                            mem_weight_bits=max_w * hw.pf * hw.dw)


def layer_cycles(layer, hw: HwConfig, input_shape=None) -> int:
    """MAC-tiling cycles for one weight layer.

    Conv needs the (C, H, W) shape entering the layer to size its output;
    Linear maps through K=1, one output position.  Function-unit layers
    are pipelined at zero marginal cycles and are rejected here.
    """
    if isinstance(layer, Conv):
        if input_shape is None or len(input_shape) != 3:
            raise ValueError("conv cycles need the (C, H, W) input shape")
        c, h, w = input_shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {layer.kernel} does not fit input {input_shape}")
        return (math.ceil(layer.filters / hw.pf) * math.ceil(c / hw.pc)
                * math.ceil(ho * wo / hw.pv) * layer.kernel ** 2)
    if isinstance(layer, Linear):
        return (math.ceil(layer.out_features / hw.pf)
                * math.ceil(layer.in_features / hw.pc) * math.ceil(1 / hw.pv))
    raise ValueError(
        f"{type(layer).__name__} runs in the pipelined function-unit chain; "
        "only Conv/Linear layers carry cycles")


def network_latency(net: Network, hw: HwConfig, l_bayes: int, s: int, ic: bool,
                    calibration: LatencyCalibration = LatencyCalibration()) -> LatencyEstimate:
    """End-to-end S-sample latency, split at the Bayesian boundary.

    The split reuses the same L -> boundary mapping as the engine's mask
    activation, so cached-prefix cycles and deterministic-prefix layers
    always agree.
    """
    if s < 1:
        raise ValueError(f"S must be >= 1, got {s}")
    boundary = bayesian_boundary(net.layers, l_bayes)
    prefix = 0
    suffix = 0
    for i in weight_layer_indices(net.layers):
        cycles = layer_cycles(net.layers[i], hw, net.input_shapes[i])
        if i < boundary:
            prefix += cycles
        else:
            suffix += cycles
    return LatencyEstimate(cycles_prefix=prefix, cycles_suffix=suffix, s=s,
                           ic=ic, clock_mhz=hw.clock_mhz, calibration=calibration)


def fits(est: ResourceEstimate, budget: ResourceBudget) -> bool:
    """Closed-inequality budget test: exactly-at-budget designs fit."""
    return est.dsp <= budget.dsp_total and est.mem_total_bits <= budget.mem_total_bits


def check_against_measured(est: ResourceEstimate, measured_dsp: int | None = None,
                           measured_mem_bits: int | None = None) -> list[str]:
    """Compare a formula estimate with measured values from a real design.

    The formula can overshoot reality (it assumes no resource sharing
    beyond the two-per-DSP packing), so contradictions are surfaced as
    warnings rather than errors.  Returns the warning messages.
    """
    messages = []
    if measured_dsp is not None and est.dsp > measured_dsp:
        messages.append(
            f"formula estimates {est.dsp} DSPs but the measured design uses "
            f"{measured_dsp}; the model does not capture the design's sharing")
    if measured_mem_bits is not None and est.mem_total_bits > measured_mem_bits:
        messages.append(
            f"formula estimates {est.mem_total_bits} memory bits but the measured "
            f"design uses {measured_mem_bits}")
    for msg in messages:
        warnings.warn(msg, ResourceModelWarning)
    return messages
