"""Int8 tensors with symmetric linear quantization.

A quantized value q represents the real number q * scale.  The zero
point is fixed at 0 and q is confined to [-127, 127]; -128 is never
produced, so negation is always representable.  All rounding in the
package is round-half-away-from-zero, which keeps results identical
across platforms and matches the hardware's requantization stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMIN = -127
QMAX = 127

# Shapes are plain int tuples; element counts must fit an unsigned 64-bit
# address counter in the modeled hardware.
_MAX_ELEMS = 2 ** 64 - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero (returns float array)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def saturate(q: np.ndarray) -> np.ndarray:
    """Clamp integer values into the int8 grid [-127, 127]."""
    return np.clip(q, QMIN, QMAX)


def check_shape(dims) -> tuple[int, ...]:
    shape = tuple(int(d) for d in dims)
    if len(shape) == 0:
        raise ValueError("shape must have at least one dimension")
    n = 1
    for d in shape:
        if d < 1:
            raise ValueError(f"shape dimensions must be >= 1, got {shape}")
        n *= d
    if n > _MAX_ELEMS:
        raise ValueError(f"element count {n} does not fit the address space")
    return shape


@dataclass(eq=False)
class QuantTensor:
    """An int8 array plus the scale that maps it back to reals."""

    data: np.ndarray
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int8:
            raise ValueError(f"quantized data must be int8, got {self.data.dtype}")
        check_shape(self.data.shape)
        self.scale = float(self.scale)
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"scale must be a positive finite float, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point = 0) is supported")
        if self.data.size and (self.data.min() < QMIN):
            raise ValueError("quantized values must lie in [-127, 127]; -128 is reserved")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


def quantize(x: np.ndarray, scale: float) -> QuantTensor:
    """Quantize a float array: q = clamp(round(x / scale), -127, 127).

    Non-finite elements are rejected with the offending flat index so bad
    inputs are traceable through file-based workflows.
    """
    x = np.asarray(x, dtype=np.float64)
    check_shape(x.shape if x.ndim else (1,))
    if x.ndim == 0:
        x = x.reshape(1)
    finite = np.isfinite(x)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise ValueError(f"non-finite value at flat index {idx}")
    scale = float(scale)
    if not np.isfinite(scale) or scale <= 0.0:
        raise ValueError(f"scale must be a positive finite float, got {scale}")
    q = saturate(round_half_away(x / scale)).astype(np.int8)
    return QuantTensor(q, scale)


def dequantize(t: QuantTensor) -> np.ndarray:
    return t.dequantize()


def choose_scale(x: np.ndarray) -> float:
    """Pick the smallest scale covering x without saturation: max|x| / 127.

    An all-zero (or empty) tensor gets scale 1.0 so downstream math stays
    well defined.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot choose a scale for an empty tensor")
    finite = np.isfinite(x)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise ValueError(f"non-finite value at flat index {idx}")
    m = float(np.abs(x).max())
    if m == 0.0:
        return 1.0
    return m / QMAX
