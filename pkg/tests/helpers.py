"""Shared test utilities: independent oracles and a randomized net corpus.

The oracles here are deliberately naive re-implementations (triple loops,
python ints, separately coded formulas) so the package is checked against
independent derivations, not against itself.
"""

from __future__ import annotations

import json
import math

import numpy as np

from mcdaccel.quantizer import quantize_model

# ---------------------------------------------------------------------------
# numeric oracles


def oracle_round_half_away(v: float) -> int:
    if v >= 0:
        return int(math.floor(v + 0.5))
    return -int(math.floor(-v + 0.5))


def oracle_requantize(acc: int, mult: float) -> int:
    q = oracle_round_half_away(float(acc) * mult)
    return max(-127, min(127, q))


def oracle_mcd_scale(q: int, p: float) -> int:
    """Fixed-point 1/(1-p) path recomputed with python ints."""
    m = oracle_round_half_away(256.0 / (1.0 - p))
    t = q * m
    if t >= 0:
        r = (t + 128) >> 8
    else:
        r = -((-t + 128) >> 8)
    return max(-127, min(127, r))


def naive_conv_acc(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Triple-loop integer conv accumulators (python ints, no numpy matmul)."""
    f, c, k, _ = w.shape
    _, h, wd = x.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=np.int64)
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((f, ho, wo), dtype=np.int64)
    for fi in range(f):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            acc += int(xp[ci, oy * stride + ky, ox * stride + kx]) \
                                * int(w[fi, ci, ky, kx])
                out[fi, oy, ox] = acc
    return out


def naive_linear_acc(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    fo, fi = w.shape
    xf = x.ravel()
    out = np.zeros(fo, dtype=np.int64)
    for o in range(fo):
        acc = 0
        for i in range(fi):
            acc += int(w[o, i]) * int(xf[i])
        out[o] = acc
    return out


def naive_conv_float(x: np.ndarray, w: np.ndarray, bias, stride: int, padding: int) -> np.ndarray:
    f, c, k, _ = w.shape
    _, h, wd = x.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((f, ho, wo), dtype=np.float64)
    for fi in range(f):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            acc += xp[ci, oy * stride + ky, ox * stride + kx] * w[fi, ci, ky, kx]
                out[fi, oy, ox] = acc + (bias[fi] if bias is not None else 0.0)
    return out


def oracle_resources(weight_dims: list[tuple[int, int, int, int]], pc: int, pf: int,
                     pv: int, dw: int, d: int) -> tuple[int, int, int, int]:
    """Independently coded resource formulas.

    weight_dims rows are (C, H, W, K) per weight layer; Linear rows are
    (in_features, 1, 1, 1).
    """
    dsp = pc * pf * pv // 2
    mem_fifo = d * pf * dw
    mem_in = max(c * h * w for c, h, w, _ in weight_dims) * dw
    mem_weight = max(c * k * k for c, _, _, k in weight_dims) * pf * dw
    return dsp, mem_fifo, mem_in, mem_weight


# ---------------------------------------------------------------------------
# randomized small-net corpus


def random_float_model(rng: np.random.Generator, n_weight: int | None = None,
                       want_shortcut: bool | None = None, site_prob: float = 0.85,
                       n_classes: int | None = None) -> dict:
    """A random valid float model: conv blocks, optional residuals, linear tail."""
    if n_weight is None:
        n_weight = int(rng.integers(1, 9))
    if want_shortcut is None:
        want_shortcut = bool(rng.random() < 0.5)
    if n_classes is None:
        n_classes = int(rng.integers(3, 6))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(6, 11))
    input_shape = (c, h, h)
    layers: list[dict] = []
    shape = input_shape

    n_extra_linear = int(rng.integers(0, 2)) if n_weight >= 3 else 0
    n_conv = n_weight - 1 - n_extra_linear

    def wscale(fan_in):
        return 0.9 / math.sqrt(max(fan_in, 1))

    placed_shortcut = False
    for _ in range(n_conv):
        cin, hh, ww = shape
        residual = (want_shortcut and not placed_shortcut and len(layers) >= 1
                    and hh >= 3 and rng.random() < 0.7)
        if residual:
            f, k, pad = cin, 3, 1
        else:
            f = int(rng.integers(2, 9))
            k = 3 if (hh >= 3 and rng.random() < 0.7) else 1
            pad = k // 2 if rng.random() < 0.6 else 0
        entry = {"kind": "conv", "in_channels": cin, "filters": f, "kernel": k,
                 "stride": 1, "padding": pad,
                 "weight": rng.normal(0.0, wscale(cin * k * k), (f, cin, k, k))}
        if rng.random() < 0.5:
            entry["bias"] = rng.normal(0.0, 0.1, f)
        src = len(layers) - 1  # output feeding this conv, for the residual add
        layers.append(entry)
        ho = (hh + 2 * pad - k) + 1
        shape = (f, ho, ho)
        if rng.random() < 0.3:
            layers.append({"kind": "batchnorm",
                           "scale": rng.uniform(0.6, 1.4, f),
                           "shift": rng.normal(0.0, 0.2, f)})
        if rng.random() < 0.7:
            layers.append({"kind": "relu"})
        if not residual and shape[1] >= 4 and rng.random() < 0.35:
            kind = "maxpool" if rng.random() < 0.7 else "avgpool"
            layers.append({"kind": kind, "window": 2, "stride": 2})
            shape = (shape[0], (shape[1] - 2) // 2 + 1, (shape[2] - 2) // 2 + 1)
        if rng.random() < site_prob:
            layers.append({"kind": "dropout"})
        if residual:
            layers.append({"kind": "shortcut", "source": src})
            placed_shortcut = True

    for _ in range(n_extra_linear):
        nin = int(np.prod(shape))
        nout = int(rng.integers(4, 17))
        entry = {"kind": "linear", "in_features": nin, "out_features": nout,
                 "weight": rng.normal(0.0, wscale(nin), (nout, nin))}
        if rng.random() < 0.5:
            entry["bias"] = rng.normal(0.0, 0.1, nout)
        layers.append(entry)
        shape = (nout,)
        if rng.random() < 0.7:
            layers.append({"kind": "relu"})
        if rng.random() < site_prob:
            layers.append({"kind": "dropout"})

    nin = int(np.prod(shape))
    entry = {"kind": "linear", "in_features": nin, "out_features": n_classes,
             "weight": rng.normal(0.0, wscale(nin), (n_classes, nin))}
    if rng.random() < 0.5:
        entry["bias"] = rng.normal(0.0, 0.1, n_classes)
    layers.append(entry)
    shape = (n_classes,)
    if rng.random() < site_prob:
        layers.append({"kind": "dropout"})

    return {"name": "corpus-net", "input_shape": input_shape, "layers": layers}


def corpus_network(seed: int, **kwargs):
    """Quantized Network from a random float model (production quantize path)."""
    rng = np.random.default_rng(seed)
    fm = random_float_model(rng, **kwargs)
    calib = rng.normal(0.0, 1.0, (4,) + tuple(fm["input_shape"]))
    return quantize_model(fm, calib), fm


def random_input(rng: np.random.Generator, net):
    from mcdaccel.tensor import quantize
    x = rng.normal(0.0, 1.0, net.input_shape)
    return quantize(x, net.input_scale)


def float_model_to_disk(fm: dict, dirpath) -> "Path":
    """Serialize an in-memory float model to manifest JSON + float32 blobs."""
    from pathlib import Path

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    tensors = {}
    layers_out = []
    for i, entry in enumerate(fm["layers"]):
        entry = dict(entry)
        for role in ("weight", "bias"):
            if role in entry:
                name = f"l{i}_{role[0]}"
                arr = np.asarray(entry[role], dtype=np.float32)
                arr.tofile(dirpath / f"{name}.bin")
                tensors[name] = {"dtype": "float32", "shape": list(arr.shape),
                                 "file": f"{name}.bin"}
                entry[role] = name
        for key in ("scale", "shift"):
            if key in entry:
                entry[key] = [float(v) for v in np.asarray(entry[key])]
        layers_out.append(entry)
    doc = {"name": fm.get("name", "model"),
           "input": {"shape": list(fm["input_shape"])},
           "tensors": tensors, "layers": layers_out}
    path = dirpath / "model.json"
    path.write_text(json.dumps(doc, indent=1))
    return path
