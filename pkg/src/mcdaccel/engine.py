"""Layer-by-layer int8 inference with Monte Carlo Dropout.

Weight layers accumulate exactly in 32-bit signed integers and requantize
once per output element.  Dropout masks zero whole filters and scale the
survivors by 1/(1-p) in the int8 domain, using an 8-fraction-bit
fixed-point multiplier, so a software run reproduces the hardware output
bit for bit.

Two schedules produce identical results by construction:

* predict       - S full passes through the network
* predict_with_ic - the deterministic prefix runs once, its boundary
  activation is cached, and only the Bayesian suffix reruns S times
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .network import (FX_ONE, BatchNorm, Conv, DropoutSite, Linear, MaxPool,
                      AvgPool, Network, Relu, Shortcut, bayesian_boundary)
from .sampler import MaskWord, chains_for_drop_prob
from .tensor import QuantTensor, round_half_away, saturate

ACC_LIMIT = 1 << 31


class AccumulatorOverflowError(ValueError):
    """A dot product left the modeled 32-bit accumulator range."""


class CacheBudgetError(ValueError):
    """Cached boundary tensors exceed the configured on-chip budget."""


class CacheBudgetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class McdConfig:
    """Run-level MC-Dropout parameters: Bayesian depth L, samples S, rate p."""

    L: int
    S: int
    p: float

    def validate_for(self, net: Network) -> None:
        n = net.n_weight_layers
        if not (1 <= self.L <= n):
            raise ValueError(f"L must lie in 1..{n} for this network, got {self.L}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        chains_for_drop_prob(self.p)
        for i, layer in enumerate(net.layers):
            if isinstance(layer, DropoutSite) and layer.p is not None and layer.p != self.p:
                raise ValueError(
                    f"layer {i} pins dropout p = {layer.p}, run requested {self.p}; "
                    "one sampler realizes a single dyadic rate")


@dataclass
class SamplePrediction:
    """One stochastic forward pass: softmax over the dequantized logits."""

    probs: np.ndarray


@dataclass
class PredictiveResult:
    """S stochastic passes and their mean class distribution."""

    per_sample: list[np.ndarray]
    mean_probs: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).ravel()
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _rhaz_shift_fx(t: np.ndarray) -> np.ndarray:
    """Drop the 8 fraction bits, rounding half away from zero (int64 in/out)."""
    return np.sign(t) * ((np.abs(t) + (FX_ONE >> 1)) >> np.int64(np.log2(FX_ONE)))


def _requantize(acc: np.ndarray, mult: float) -> np.ndarray:
    """acc * mult rounded half away from zero and saturated to int8."""
    v = acc.astype(np.float64) * mult
    return saturate(round_half_away(v)).astype(np.int8)


def _check_acc(acc: np.ndarray, what: str) -> None:
    if acc.size and int(np.abs(acc).max()) >= ACC_LIMIT:
        raise AccumulatorOverflowError(
            f"{what} accumulator magnitude {int(np.abs(acc).max())} exceeds int32")


def conv_patches(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """im2col: (C, H, W) -> (C*K*K, H_out*W_out), rows ordered c-major then ky, kx.

    Works for any dtype; the int path casts to int64 first so accumulation
    is exact.
    """
    c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kernel} does not fit input {x.shape} with padding {padding}")
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    patches = np.empty((c, kernel, kernel, ho, wo), dtype=x.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            patches[:, ky, kx] = xp[:, ky:ky + (ho - 1) * stride + 1:stride,
                                    kx:kx + (wo - 1) * stride + 1:stride]
    return patches.reshape(c * kernel * kernel, ho * wo)


def conv_int_acc(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Exact integer conv accumulators: (F, H_out, W_out) int64."""
    f, c, k, _ = weight.shape
    cols = conv_patches(x.astype(np.int64), k, stride, padding)
    acc = weight.reshape(f, c * k * k).astype(np.int64) @ cols
    ho_wo = cols.shape[1]
    h = x.shape[1]
    ho = (h + 2 * padding - k) // stride + 1
    return acc.reshape(f, ho, ho_wo // ho)


def linear_int_acc(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Exact integer matvec accumulators: (F,) int64."""
    return weight.astype(np.int64) @ x.astype(np.int64).ravel()


def _avgpool_div(total: np.ndarray, count: int) -> np.ndarray:
    # integer division rounding half away from zero
    mag = (2 * np.abs(total) + count) // (2 * count)
    return np.sign(total) * mag


def _pool_stack(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"window {window} does not fit input {x.shape}")
    slices = [x[:, dy:dy + (ho - 1) * stride + 1:stride, dx:dx + (wo - 1) * stride + 1:stride]
              for dy in range(window) for dx in range(window)]
    return np.stack(slices, axis=-1)


def run_layer(layer, x: QuantTensor, saved: dict[int, QuantTensor] | None = None) -> QuantTensor:
    """Execute one layer on an int8 tensor.

    `saved` maps earlier layer indices to their outputs; only Shortcut
    needs it.  DropoutSite is an identity here: masking belongs to the
    forward pass, which knows which sites are active.
    """
    if isinstance(layer, Conv):
        if len(x.shape) != 3 or x.shape[0] != layer.in_channels:
            raise ValueError(
                f"conv expects ({layer.in_channels}, H, W) input, got {x.shape}")
        acc = conv_int_acc(x.data, layer.weight.data, layer.stride, layer.padding)
        if layer.bias is not None:
            acc = acc + layer.bias.astype(np.int64)[:, None, None]
        _check_acc(acc, "conv")
        mult = x.scale * layer.weight.scale / layer.output_scale
        return QuantTensor(_requantize(acc, mult), layer.output_scale)

    if isinstance(layer, Linear):
        n = int(np.prod(x.shape))
        if n != layer.in_features:
            raise ValueError(
                f"linear expects {layer.in_features} features, input flattens to {n}")
        acc = linear_int_acc(x.data, layer.weight.data)
        if layer.bias is not None:
            acc = acc + layer.bias.astype(np.int64)
        _check_acc(acc, "linear")
        mult = x.scale * layer.weight.scale / layer.output_scale
        return QuantTensor(_requantize(acc, mult), layer.output_scale)

    if isinstance(layer, BatchNorm):
        out_scale = x.scale if layer.output_scale is None else layer.output_scale
        if layer.mult_fx is None:
            mult_fx = round_half_away(layer.scale * x.scale / out_scale * FX_ONE).astype(np.int64)
            shift_fx = round_half_away(layer.shift / out_scale * FX_ONE).astype(np.int64)
        else:
            mult_fx, shift_fx = layer.mult_fx, layer.shift_fx
        q = x.data.astype(np.int64)
        bshape = (-1,) + (1,) * (q.ndim - 1)
        t = q * mult_fx.reshape(bshape) + shift_fx.reshape(bshape)
        return QuantTensor(saturate(_rhaz_shift_fx(t)).astype(np.int8), out_scale)

    if isinstance(layer, Relu):
        return QuantTensor(np.maximum(x.data, np.int8(0)), x.scale)

    if isinstance(layer, MaxPool):
        return QuantTensor(_pool_stack(x.data, layer.window, layer.stride).max(axis=-1), x.scale)

    if isinstance(layer, AvgPool):
        stack = _pool_stack(x.data.astype(np.int64), layer.window, layer.stride)
        avg = _avgpool_div(stack.sum(axis=-1), layer.window * layer.window)
        return QuantTensor(avg.astype(np.int8), x.scale)

    if isinstance(layer, Shortcut):
        if saved is None or layer.source not in saved:
            raise ValueError(f"shortcut source {layer.source} output is not available")
        other = saved[layer.source]
        if other.shape != x.shape:
            raise ValueError(f"shortcut shapes differ: {other.shape} vs {x.shape}")
        target = max(x.scale, other.scale)
        a = _requantize(x.data.astype(np.int64), x.scale / target).astype(np.int64)
        b = _requantize(other.data.astype(np.int64), other.scale / target).astype(np.int64)
        return QuantTensor(saturate(a + b).astype(np.int8), target)

    if isinstance(layer, DropoutSite):
        return x

    raise ValueError(f"unknown layer type {type(layer).__name__}")


def apply_mcd(x: QuantTensor, words: list[MaskWord], p: float) -> QuantTensor:
    """Apply a filter-wise dropout mask and rescale survivors by 1/(1-p).

    The first F bits of the word stream (in order) decide the F filters;
    kept filters are multiplied by round(256/(1-p)) and shifted back with
    round-half-away-from-zero, saturating to int8.  Dropped filters are
    exactly zero.
    """
    chains_for_drop_prob(p)
    f = x.shape[0]
    bits: list[int] = []
    for word in words:
        bits.extend(word.bits)
    if len(bits) < f:
        raise ValueError(f"mask stream holds {len(bits)} bits, layer needs {f}")
    mask = np.asarray(bits[:f], dtype=np.int64)
    mult = round(FX_ONE / (1.0 - p))
    t = x.data.astype(np.int64) * mult
    scaled = saturate(_rhaz_shift_fx(t)).astype(np.int8)
    bshape = (-1,) + (1,) * (x.data.ndim - 1)
    out = np.where(mask.reshape(bshape) == 1, scaled, np.int8(0)).astype(np.int8)
    return QuantTensor(out, x.scale)


def _shortcut_sources(layers) -> set[int]:
    return {l.source for l in layers if isinstance(l, Shortcut)}


def _check_input(net: Network, x: QuantTensor) -> None:
    if x.shape != net.input_shape:
        raise ValueError(f"input shape {x.shape} != network input {net.input_shape}")
    if not np.isclose(x.scale, net.input_scale, rtol=1e-12, atol=0.0):
        raise ValueError(f"input scale {x.scale} != network input scale {net.input_scale}")


def _run_span(layers, start, t, saved, cfg, sampler, active_from, sources):
    """Run layers[start:] on t, applying masks at active DropoutSites."""
    for i in range(start, len(layers)):
        layer = layers[i]
        try:
            if isinstance(layer, DropoutSite) and i >= active_from:
                words = sampler.mask_stream_for_layer(t.shape[0])
                t = apply_mcd(t, words, cfg.p)
            else:
                t = run_layer(layer, t, saved)
        except ValueError as e:
            raise type(e)(f"layer {i}: {e}") from None
        if i in sources:
            saved[i] = t
    return t


def forward_once(net: Network, x: QuantTensor, cfg: McdConfig, sampler,
                 active_from: int) -> SamplePrediction:
    """One stochastic pass; DropoutSites before `active_from` are identities."""
    _check_input(net, x)
    sources = _shortcut_sources(net.layers)
    t = _run_span(net.layers, 0, x, {}, cfg, sampler, active_from, sources)
    return SamplePrediction(probs=softmax(t.dequantize()))


def predict(net: Network, x: QuantTensor, cfg: McdConfig, sampler) -> PredictiveResult:
    """S full stochastic passes, averaged into a predictive distribution."""
    cfg.validate_for(net)
    active_from = bayesian_boundary(net.layers, cfg.L)
    samples = [forward_once(net, x, cfg, sampler, active_from).probs
               for _ in range(cfg.S)]
    return PredictiveResult(per_sample=samples,
                            mean_probs=np.mean(np.stack(samples), axis=0))


def cache_bits(net: Network, l_bayes: int) -> int:
    """On-chip bits needed to hold the boundary activation plus any prefix
    outputs that suffix shortcuts still reference (8 bits per element)."""
    boundary = bayesian_boundary(net.layers, l_bayes)
    elems = int(np.prod(net.input_shapes[boundary]))
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Shortcut) and i >= boundary and layer.source < boundary:
            elems += int(np.prod(net.input_shapes[layer.source + 1]))
    return 8 * elems


def predict_with_ic(net: Network, x: QuantTensor, cfg: McdConfig, sampler,
                    mem_budget_bits: int | None = None,
                    strict_mem: bool = False) -> PredictiveResult:
    """Prefix once, cache the boundary activation, rerun the suffix S times.

    Produces bit-identical results to predict() for the same sampler seed:
    the prefix is deterministic (its DropoutSites are inactive and draw no
    bits) and the suffix consumes the mask stream in the same order.
    """
    cfg.validate_for(net)
    _check_input(net, x)
    boundary = bayesian_boundary(net.layers, cfg.L)
    if mem_budget_bits is not None:
        need = cache_bits(net, cfg.L)
        if need > mem_budget_bits:
            msg = (f"boundary cache needs {need} bits, budget is {mem_budget_bits}")
            if strict_mem:
                raise CacheBudgetError(msg)
            warnings.warn(msg, CacheBudgetWarning)
    sources = _shortcut_sources(net.layers)
    saved_prefix: dict[int, QuantTensor] = {}
    t = x
    for i in range(boundary):
        layer = net.layers[i]
        try:
            t = run_layer(layer, t, saved_prefix)
        except ValueError as e:
            raise type(e)(f"layer {i}: {e}") from None
        if i in sources:
            saved_prefix[i] = t
    samples = []
    for _ in range(cfg.S):
        saved = dict(saved_prefix)
        out = _run_span(net.layers, boundary, t, saved, cfg, sampler, boundary, sources)
        samples.append(softmax(out.dequantize()))
    return PredictiveResult(per_sample=samples,
                            mean_probs=np.mean(np.stack(samples), axis=0))
