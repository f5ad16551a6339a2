"""Post-training quantization of float models into int8 manifests.

A float model mirrors the manifest layout with float32 payloads and no
scales.  Quantization runs the float network over a calibration batch,
chooses per-tensor scales with choose_scale (max|x| / 127), converts
weights to int8 and biases to int32 at accumulator scale, and assembles
a validated Network ready to save.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import conv_patches
from .network import (AvgPool, BatchNorm, Conv, DropoutSite, Linear,
                      ManifestError, MaxPool, Network, Relu, Shortcut)
from .tensor import choose_scale, quantize, round_half_away

_INT32_MAX = 2 ** 31 - 1


def load_float_model(path) -> dict:
    """Read a float model description: manifest-shaped JSON + float32 blobs."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as e:
        raise ManifestError(f"cannot read float model {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(
            f"float model {path.name}: parse error at line {e.lineno} "
            f"column {e.colno}: {e.msg}") from None
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        if entry.get("dtype") != "float32":
            raise ManifestError(f"tensor '{name}': float models use dtype float32")
        blob = path.parent / entry["file"]
        if not blob.exists():
            raise ManifestError(f"tensor '{name}': payload file {entry['file']} not found")
        raw = np.fromfile(blob, dtype="<f4")
        shape = tuple(int(d) for d in entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise ManifestError(
                f"tensor '{name}': payload holds {raw.size} elements, "
                f"shape {list(shape)} needs {int(np.prod(shape))}")
        tensors[name] = raw.reshape(shape).astype(np.float64)
    layers = []
    for i, entry in enumerate(manifest.get("layers", [])):
        entry = dict(entry)
        for role in ("weight", "bias"):
            if role in entry:
                if entry[role] not in tensors:
                    raise ManifestError(
                        f"layer {i}: {role} references unknown tensor '{entry[role]}'")
                entry[role] = tensors[entry[role]]
        layers.append(entry)
    if "input" not in manifest or "shape" not in manifest["input"]:
        raise ManifestError("float model must declare input.shape")
    return {"name": manifest.get("name", path.parent.name),
            "input_shape": tuple(int(d) for d in manifest["input"]["shape"]),
            "layers": layers}


def _conv_float(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    f, c, k, _ = w.shape
    cols = conv_patches(x, k, stride, padding)
    ho = (x.shape[1] + 2 * padding - k) // stride + 1
    out = w.reshape(f, -1) @ cols
    return out.reshape(f, ho, -1)


def _pool_float(x: np.ndarray, window: int, stride: int, op: str) -> np.ndarray:
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    slices = [x[:, dy:dy + (ho - 1) * stride + 1:stride, dx:dx + (wo - 1) * stride + 1:stride]
              for dy in range(window) for dx in range(window)]
    stack = np.stack(slices, axis=-1)
    return stack.max(axis=-1) if op == "max" else stack.mean(axis=-1)


def _quantize_bias(bias: np.ndarray, acc_scale: float, layer_idx: int) -> np.ndarray:
    q = round_half_away(bias / acc_scale)
    if np.abs(q).max(initial=0.0) > _INT32_MAX:
        raise ManifestError(
            f"layer {layer_idx}: bias does not fit the int32 accumulator at "
            f"scale {acc_scale}")
    return q.astype(np.int32)


def quantize_model(float_model: dict, calib_inputs: np.ndarray) -> Network:
    """Calibrate scales on a float batch and build the int8 network.

    Activation scales come from the float activations of the calibration
    batch at each requantization point (conv/linear/batchnorm outputs);
    dropout sites are identities during calibration.
    """
    calib = np.asarray(calib_inputs, dtype=np.float64)
    if calib.ndim < 2 or calib.shape[0] < 1:
        raise ManifestError("calibration data must be a nonempty batch")
    input_shape = tuple(float_model["input_shape"])
    if calib.shape[1:] != input_shape:
        raise ManifestError(
            f"calibration inputs {calib.shape[1:]} do not match model input {input_shape}")

    input_scale = choose_scale(calib)
    acts = [a for a in calib]
    cur_scale = input_scale
    out_layers = []
    saved_acts: dict[int, list[np.ndarray]] = {}
    saved_scales: dict[int, float] = {}
    needed = {int(e["source"]) for e in float_model["layers"]
              if e.get("kind") == "shortcut" and "source" in e}

    for i, entry in enumerate(float_model["layers"]):
        try:
            acts, cur_scale = _calibrate_layer(entry, i, acts, cur_scale, out_layers,
                                               saved_acts, saved_scales)
        except KeyError as e:
            raise ManifestError(f"layer {i}: missing field {e.args[0]!r}") from None
        if i in needed:
            saved_acts[i] = acts
            saved_scales[i] = cur_scale

    try:
        return Network(float_model.get("name", "model"), out_layers, input_shape, input_scale)
    except ValueError as e:
        raise ManifestError(str(e)) from None


def _calibrate_layer(entry, i, acts, cur_scale, out_layers, saved_acts, saved_scales):
    """Run one float layer over the calibration activations, append its
    quantized form, and return the new (activations, scale)."""
    kind = entry.get("kind")
    if kind == "conv":
        w = np.asarray(entry["weight"], dtype=np.float64)
        s_w = choose_scale(w)
        stride = int(entry.get("stride", 1))
        padding = int(entry.get("padding", 0))
        bias = entry.get("bias")
        acts = [_conv_float(a, w, stride, padding) for a in acts]
        if bias is not None:
            acts = [a + np.asarray(bias, dtype=np.float64)[:, None, None] for a in acts]
        s_out = choose_scale(np.stack(acts))
        layer = Conv(in_channels=int(entry["in_channels"]), filters=int(entry["filters"]),
                     kernel=int(entry["kernel"]), stride=stride, padding=padding,
                     weight=quantize(w, s_w), output_scale=s_out)
        if bias is not None:
            layer.bias = _quantize_bias(np.asarray(bias, dtype=np.float64),
                                        cur_scale * s_w, i)
        out_layers.append(layer)
        return acts, s_out
    if kind == "linear":
        w = np.asarray(entry["weight"], dtype=np.float64)
        s_w = choose_scale(w)
        bias = entry.get("bias")
        acts = [w @ a.ravel() for a in acts]
        if bias is not None:
            acts = [a + np.asarray(bias, dtype=np.float64) for a in acts]
        s_out = choose_scale(np.stack(acts))
        layer = Linear(in_features=int(entry["in_features"]),
                       out_features=int(entry["out_features"]),
                       weight=quantize(w, s_w), output_scale=s_out)
        if bias is not None:
            layer.bias = _quantize_bias(np.asarray(bias, dtype=np.float64),
                                        cur_scale * s_w, i)
        out_layers.append(layer)
        return acts, s_out
    if kind == "batchnorm":
        scale = np.asarray(entry["scale"], dtype=np.float64)
        shift = np.asarray(entry["shift"], dtype=np.float64)
        bshape = (-1,) + (1,) * (acts[0].ndim - 1)
        acts = [scale.reshape(bshape) * a + shift.reshape(bshape) for a in acts]
        s_out = choose_scale(np.stack(acts))
        out_layers.append(BatchNorm(scale=scale, shift=shift, output_scale=s_out))
        return acts, s_out
    if kind == "relu":
        out_layers.append(Relu())
        return [np.maximum(a, 0.0) for a in acts], cur_scale
    if kind == "maxpool":
        out_layers.append(MaxPool(window=int(entry["window"]), stride=int(entry["stride"])))
        return [_pool_float(a, int(entry["window"]), int(entry["stride"]), "max")
                for a in acts], cur_scale
    if kind == "avgpool":
        out_layers.append(AvgPool(window=int(entry["window"]), stride=int(entry["stride"])))
        return [_pool_float(a, int(entry["window"]), int(entry["stride"]), "avg")
                for a in acts], cur_scale
    if kind == "shortcut":
        src = int(entry["source"])
        if src not in saved_acts:
            raise ManifestError(f"layer {i}: shortcut source {src} precedes no saved output")
        out_layers.append(Shortcut(source=src))
        return [a + b for a, b in zip(acts, saved_acts[src])], max(cur_scale, saved_scales[src])
    if kind == "dropout":
        out_layers.append(DropoutSite(p=float(entry["p"]) if "p" in entry else None))
        return acts, cur_scale
    raise ManifestError(f"layer {i}: unknown kind '{kind}'")


def load_calibration(path) -> np.ndarray:
    """Calibration file: {"shape": [...], "inputs": [[flat floats], ...]}."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ManifestError(f"cannot read calibration data {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(
            f"calibration {path.name}: parse error at line {e.lineno} "
            f"column {e.colno}: {e.msg}") from None
    if "shape" not in doc or "inputs" not in doc or not doc["inputs"]:
        raise ManifestError(f"calibration {path.name}: needs 'shape' and nonempty 'inputs'")
    shape = tuple(int(d) for d in doc["shape"])
    rows = [np.asarray(r, dtype=np.float64).reshape(shape) for r in doc["inputs"]]
    return np.stack(rows)
