"""Layer descriptors, network validation, and the weight-manifest format.

A network is an ordered list of layers over int8 feature maps shaped
(C, H, W), or (F,) once flattened by a Linear layer.  Weight layers are
Conv and Linear; BatchNorm, ReLU, pooling, Shortcut and DropoutSite are
function units with no weights of their own.  Validation walks the list
once, inferring every intermediate shape and scale, so structural errors
surface at load time rather than mid-inference.

Manifest format (manifest.json next to its payload blobs):

    {
      "name": "lenet5",
      "input": {"shape": [1, 32, 32], "scale": 0.0078125},
      "layers": [
        {"kind": "conv", "in_channels": 1, "filters": 6, "kernel": 5,
         "stride": 1, "padding": 0, "weight": "conv1_w", "bias": "conv1_b",
         "output_scale": 0.05},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2, "stride": 2},
        {"kind": "dropout"},
        ...
        {"kind": "linear", "in_features": 400, "out_features": 10,
         "weight": "fc_w", "output_scale": 0.1}
      ],
      "tensors": {
        "conv1_w": {"file": "conv1_w.bin", "shape": [6, 1, 5, 5],
                     "dtype": "int8", "scale": 0.004},
        "conv1_b": {"file": "conv1_b.bin", "shape": [6],
                     "dtype": "int32", "scale": 3.125e-05}
      }
    }

Payload blobs are little-endian row-major.  Weights are int8; biases are
int32 at accumulator scale (input_scale * weight_scale, validated here).
BatchNorm per-filter scale/shift are float lists inline in the JSON and
are folded to 8-fraction-bit fixed point at load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import QuantTensor, check_shape, round_half_away

FX_FRACTION_BITS = 8
FX_ONE = 1 << FX_FRACTION_BITS


class ManifestError(ValueError):
    """Malformed manifest or payload: parse errors, dangling refs, bad sizes."""


@dataclass(eq=False)
class Conv:
    in_channels: int
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0
    weight: QuantTensor | None = None
    bias: np.ndarray | None = None
    output_scale: float | None = None


@dataclass(eq=False)
class Linear:
    in_features: int
    out_features: int
    weight: QuantTensor | None = None
    bias: np.ndarray | None = None
    output_scale: float | None = None


@dataclass(eq=False)
class BatchNorm:
    """Per-filter affine y = scale * x + shift, folded to fixed point at load."""

    scale: np.ndarray
    shift: np.ndarray
    output_scale: float | None = None
    mult_fx: np.ndarray | None = field(default=None, repr=False)
    shift_fx: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Relu:
    pass


@dataclass
class MaxPool:
    window: int
    stride: int


@dataclass
class AvgPool:
    window: int
    stride: int


@dataclass
class Shortcut:
    """Adds the saved output of an earlier layer (by index) to the input."""

    source: int


@dataclass
class DropoutSite:
    """Marks where a filter-wise MC-Dropout mask may be applied.

    p, when pinned in the manifest, must match the run-level dropout rate:
    one sampler realizes exactly one dyadic probability.
    """

    p: float | None = None


WEIGHT_KINDS = (Conv, Linear)
# layers a dropout site may sit behind, between it and its weight layer
_SITE_PASSTHROUGH = (BatchNorm, Relu, MaxPool, AvgPool)


def weight_layer_indices(layers) -> list[int]:
    return [i for i, l in enumerate(layers) if isinstance(l, WEIGHT_KINDS)]


def bayesian_boundary(layers, l_bayes: int) -> int:
    """Layer-list index of the first weight layer inside the Bayesian suffix.

    With N weight layers and L of them Bayesian, that is the (N-L+1)-th
    weight layer.  DropoutSites at or after this index are active; the
    latency model splits prefix/suffix at the same point.
    """
    widx = weight_layer_indices(layers)
    n = len(widx)
    if not (1 <= l_bayes <= n):
        raise ValueError(f"L must lie in 1..{n}, got {l_bayes}")
    return widx[n - l_bayes]


class Network:
    """Validated layer stack with statically inferred shapes and scales.

    input_shapes[i] / input_scales[i] describe the tensor entering layer i;
    output_shape / output_scale describe the final tensor.  Weights are
    immutable after load.
    """

    def __init__(self, name: str, layers: list, input_shape, input_scale: float):
        self.name = str(name)
        self.layers = list(layers)
        self.input_shape = check_shape(input_shape)
        self.input_scale = float(input_scale)
        if not (self.input_scale > 0.0 and np.isfinite(self.input_scale)):
            raise ValueError(f"input scale must be positive and finite, got {input_scale}")
        self.input_shapes: list[tuple[int, ...]] = []
        self.input_scales: list[float] = []
        self._validate()

    @property
    def n_weight_layers(self) -> int:
        return len(weight_layer_indices(self.layers))

    def _validate(self):
        shape = self.input_shape
        scale = self.input_scale
        # shape/scale of every layer's saved output, for shortcut checks
        out_shapes: list[tuple[int, ...]] = []
        out_scales: list[float] = []
        for i, layer in enumerate(self.layers):
            self.input_shapes.append(shape)
            self.input_scales.append(scale)
            try:
                shape, scale = self._step(layer, i, shape, scale, out_shapes, out_scales)
            except ValueError as e:
                raise ValueError(f"layer {i} ({type(layer).__name__}): {e}") from None
            out_shapes.append(shape)
            out_scales.append(scale)
        if self.n_weight_layers < 1:
            raise ValueError("network must contain at least one Conv or Linear layer")
        self._check_site_placement()
        self.output_shape = shape
        self.output_scale = scale

    def _step(self, layer, i, shape, scale, out_shapes, out_scales):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ValueError(f"conv needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if c != layer.in_channels:
                raise ValueError(f"expects {layer.in_channels} channels, input has {c}")
            if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                raise ValueError("kernel/stride must be >= 1 and padding >= 0")
            if layer.weight is None or layer.output_scale is None:
                raise ValueError("missing weight tensor or output_scale")
            wshape = (layer.filters, layer.in_channels, layer.kernel, layer.kernel)
            if layer.weight.shape != wshape:
                raise ValueError(f"weight shape {layer.weight.shape} != {wshape}")
            self._check_bias(layer, scale)
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ValueError(f"kernel {layer.kernel} does not fit input {shape}")
            return (layer.filters, ho, wo), float(layer.output_scale)

        if isinstance(layer, Linear):
            n = int(np.prod(shape))
            if n != layer.in_features:
                raise ValueError(f"expects {layer.in_features} features, input flattens to {n}")
            if layer.weight is None or layer.output_scale is None:
                raise ValueError("missing weight tensor or output_scale")
            wshape = (layer.out_features, layer.in_features)
            if layer.weight.shape != wshape:
                raise ValueError(f"weight shape {layer.weight.shape} != {wshape}")
            self._check_bias(layer, scale)
            return (layer.out_features,), float(layer.output_scale)

        if isinstance(layer, BatchNorm):
            layer.scale = np.asarray(layer.scale, dtype=np.float64)
            layer.shift = np.asarray(layer.shift, dtype=np.float64)
            if layer.scale.shape != (shape[0],) or layer.shift.shape != (shape[0],):
                raise ValueError(f"per-filter arrays must have shape ({shape[0]},)")
            out_scale = scale if layer.output_scale is None else float(layer.output_scale)
            # fold the affine into 8-fraction-bit fixed point at load
            layer.mult_fx = round_half_away(layer.scale * scale / out_scale * FX_ONE).astype(np.int64)
            layer.shift_fx = round_half_away(layer.shift / out_scale * FX_ONE).astype(np.int64)
            return shape, out_scale

        if isinstance(layer, Relu):
            return shape, scale

        if isinstance(layer, (MaxPool, AvgPool)):
            if len(shape) != 3:
                raise ValueError(f"pooling needs a (C, H, W) input, got {shape}")
            if layer.window < 1 or layer.stride < 1:
                raise ValueError("window and stride must be >= 1")
            c, h, w = shape
            ho = (h - layer.window) // layer.stride + 1
            wo = (w - layer.window) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ValueError(f"window {layer.window} does not fit input {shape}")
            return (c, ho, wo), scale

        if isinstance(layer, Shortcut):
            if not (0 <= layer.source < i):
                raise ValueError(f"source {layer.source} must index an earlier layer")
            src_shape = out_shapes[layer.source]
            if src_shape != shape:
                raise ValueError(f"source shape {src_shape} != input shape {shape}")
            # both addends are requantized to the larger scale before adding
            return shape, max(scale, out_scales[layer.source])

        if isinstance(layer, DropoutSite):
            if layer.p is not None and not (0.0 < layer.p < 1.0):
                raise ValueError(f"pinned p must lie in (0, 1), got {layer.p}")
            return shape, scale

        raise ValueError(f"unknown layer type {type(layer).__name__}")

    def _check_bias(self, layer, in_scale):
        if layer.bias is None:
            return
        bias = np.asarray(layer.bias)
        if bias.dtype != np.int32:
            raise ValueError(f"bias must be int32, got {bias.dtype}")
        nf = layer.filters if isinstance(layer, Conv) else layer.out_features
        if bias.shape != (nf,):
            raise ValueError(f"bias shape {bias.shape} != ({nf},)")

    def _check_site_placement(self):
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, DropoutSite):
                continue
            j = i - 1
            while j >= 0 and isinstance(self.layers[j], _SITE_PASSTHROUGH):
                j -= 1
            if j < 0 or not isinstance(self.layers[j], WEIGHT_KINDS):
                raise ValueError(
                    f"layer {i} (DropoutSite): must follow a Conv or Linear, "
                    "optionally through BatchNorm/ReLU/pooling")


# ---------------------------------------------------------------------------
# manifest I/O

_DTYPES = {"int8": np.dtype("<i1"), "int32": np.dtype("<i4")}


def _load_tensors(manifest: dict, base: Path) -> dict[str, tuple[np.ndarray, float]]:
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        try:
            dtype = _DTYPES[entry["dtype"]]
        except KeyError:
            raise ManifestError(
                f"tensor '{name}': dtype must be one of {sorted(_DTYPES)}") from None
        shape = check_shape(entry["shape"])
        path = base / entry["file"]
        if not path.exists():
            raise ManifestError(f"tensor '{name}': payload file {entry['file']} not found")
        raw = np.fromfile(path, dtype=dtype)
        expected = int(np.prod(shape))
        if raw.size != expected:
            raise ManifestError(
                f"tensor '{name}': payload {entry['file']} holds {raw.size} elements "
                f"({raw.size * dtype.itemsize} bytes), manifest shape {list(shape)} "
                f"needs {expected}")
        tensors[name] = (raw.reshape(shape), float(entry["scale"]))
    return tensors


def _tensor_ref(tensors, name, layer_idx, role):
    if name not in tensors:
        raise ManifestError(f"layer {layer_idx}: {role} references unknown tensor '{name}'")
    return tensors[name]


def _layer_from_entry(entry: dict, idx: int, tensors) -> object:
    try:
        return _parse_layer(entry, idx, tensors)
    except KeyError as e:
        raise ManifestError(f"layer {idx}: missing field {e.args[0]!r}") from None


def _parse_layer(entry: dict, idx: int, tensors) -> object:
    kind = entry.get("kind")
    if kind == "conv" or kind == "linear":
        wdata, wscale = _tensor_ref(tensors, entry["weight"], idx, "weight")
        if wdata.dtype != np.int8:
            raise ManifestError(f"layer {idx}: weight tensor must be int8")
        weight = QuantTensor(wdata, wscale)
        bias = None
        if "bias" in entry:
            bdata, bscale = _tensor_ref(tensors, entry["bias"], idx, "bias")
            if bdata.dtype != np.int32:
                raise ManifestError(f"layer {idx}: bias tensor must be int32")
            bias = (bdata, bscale)
        if kind == "conv":
            layer = Conv(in_channels=int(entry["in_channels"]), filters=int(entry["filters"]),
                         kernel=int(entry["kernel"]), stride=int(entry.get("stride", 1)),
                         padding=int(entry.get("padding", 0)), weight=weight,
                         output_scale=float(entry["output_scale"]))
        else:
            layer = Linear(in_features=int(entry["in_features"]),
                           out_features=int(entry["out_features"]), weight=weight,
                           output_scale=float(entry["output_scale"]))
        layer.bias = bias  # unpacked after scale inference
        return layer
    if kind == "batchnorm":
        return BatchNorm(scale=np.asarray(entry["scale"], dtype=np.float64),
                         shift=np.asarray(entry["shift"], dtype=np.float64),
                         output_scale=(float(entry["output_scale"])
                                       if "output_scale" in entry else None))
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool(window=int(entry["window"]), stride=int(entry["stride"]))
    if kind == "avgpool":
        return AvgPool(window=int(entry["window"]), stride=int(entry["stride"]))
    if kind == "shortcut":
        return Shortcut(source=int(entry["source"]))
    if kind == "dropout":
        return DropoutSite(p=float(entry["p"]) if "p" in entry else None)
    raise ManifestError(f"layer {idx}: unknown kind '{kind}'")


def load_network(manifest_path) -> Network:
    """Load and fully validate a network from a manifest file."""
    path = Path(manifest_path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(
            f"manifest {path.name}: parse error at line {e.lineno} column {e.colno}: {e.msg}"
        ) from None
    for key in ("input", "layers"):
        if key not in manifest:
            raise ManifestError(f"manifest {path.name}: missing '{key}' section")
    tensors = _load_tensors(manifest, path.parent)
    layers = [_layer_from_entry(entry, i, tensors)
              for i, entry in enumerate(manifest["layers"])]
    net = _assemble(manifest, layers, path)
    return net


def _assemble(manifest: dict, layers: list, path: Path) -> Network:
    inp = manifest["input"]
    input_shape = check_shape(inp["shape"])
    input_scale = float(inp["scale"])
    # resolve bias scales: they must equal input_scale * weight_scale of
    # their layer, which needs the statically inferred scale chain
    probe = [l for l in layers]
    for l in probe:
        if isinstance(l, WEIGHT_KINDS) and isinstance(getattr(l, "bias", None), tuple):
            l._bias_pending = l.bias
            l.bias = None
    try:
        net = Network(manifest.get("name", path.parent.name), probe, input_shape, input_scale)
    except ValueError as e:
        raise ManifestError(f"manifest {path.name}: {e}") from None
    for i, l in enumerate(net.layers):
        pending = getattr(l, "_bias_pending", None)
        if pending is None:
            continue
        bdata, bscale = pending
        expected = net.input_scales[i] * l.weight.scale
        if not np.isclose(bscale, expected, rtol=1e-9, atol=0.0):
            raise ManifestError(
                f"manifest {path.name}: layer {i} bias scale {bscale} != "
                f"input_scale * weight_scale = {expected}")
        l.bias = bdata
        del l._bias_pending
    return net


def save_network(net: Network, out_dir) -> Path:
    """Write a network back out as manifest.json plus payload blobs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    entries = []
    widx = 0
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            name = f"conv{widx}_w"
            tensors[name] = (layer.weight.data, layer.weight.scale, "int8")
            entry = {"kind": "conv", "in_channels": layer.in_channels,
                     "filters": layer.filters, "kernel": layer.kernel,
                     "stride": layer.stride, "padding": layer.padding,
                     "weight": name, "output_scale": layer.output_scale}
            if layer.bias is not None:
                bname = f"conv{widx}_b"
                tensors[bname] = (layer.bias, net.input_scales[i] * layer.weight.scale, "int32")
                entry["bias"] = bname
            entries.append(entry)
            widx += 1
        elif isinstance(layer, Linear):
            name = f"fc{widx}_w"
            tensors[name] = (layer.weight.data, layer.weight.scale, "int8")
            entry = {"kind": "linear", "in_features": layer.in_features,
                     "out_features": layer.out_features, "weight": name,
                     "output_scale": layer.output_scale}
            if layer.bias is not None:
                bname = f"fc{widx}_b"
                tensors[bname] = (layer.bias, net.input_scales[i] * layer.weight.scale, "int32")
                entry["bias"] = bname
            entries.append(entry)
            widx += 1
        elif isinstance(layer, BatchNorm):
            entry = {"kind": "batchnorm", "scale": [float(v) for v in layer.scale],
                     "shift": [float(v) for v in layer.shift]}
            if layer.output_scale is not None:
                entry["output_scale"] = float(layer.output_scale)
            entries.append(entry)
        elif isinstance(layer, Relu):
            entries.append({"kind": "relu"})
        elif isinstance(layer, MaxPool):
            entries.append({"kind": "maxpool", "window": layer.window, "stride": layer.stride})
        elif isinstance(layer, AvgPool):
            entries.append({"kind": "avgpool", "window": layer.window, "stride": layer.stride})
        elif isinstance(layer, Shortcut):
            entries.append({"kind": "shortcut", "source": layer.source})
        elif isinstance(layer, DropoutSite):
            entry = {"kind": "dropout"}
            if layer.p is not None:
                entry["p"] = float(layer.p)
            entries.append(entry)
        else:
            raise ValueError(f"cannot serialize layer type {type(layer).__name__}")
    tensor_section = {}
    for name, (data, scale, dtype) in tensors.items():
        fname = f"{name}.bin"
        np.asarray(data, dtype=_DTYPES[dtype]).tofile(out / fname)
        tensor_section[name] = {"file": fname, "shape": [int(d) for d in data.shape],
                                "dtype": dtype, "scale": float(scale)}
    manifest = {"name": net.name,
                "input": {"shape": [int(d) for d in net.input_shape],
                          "scale": net.input_scale},
                "layers": entries, "tensors": tensor_section}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath
