"""Command-line entry point.

Subcommands: infer, sample-lfsr, perf-table, metrics, dse, quantize.
Every run is a pure function of its flags: randomness flows from --seed
through per-component derived seeds, files are written with sorted keys
and repr-precision floats, and --threads only changes wall time, never
bytes.  Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 infeasible design-space request.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dse as dse_mod
from . import metrics as metrics_mod
from .engine import CacheBudgetError, McdConfig, predict, predict_with_ic
from .network import ManifestError, load_network, save_network
from .perfmodel import (DEFAULT_CLOCK_MHZ, HwConfig, LatencyCalibration,
                        ResourceBudget)
from .quantizer import load_calibration, load_float_model, quantize_model
from .rng import derive_seed
from .sampler import BernoulliSampler, Lfsr, LfsrSpec, chains_for_drop_prob
from .tensor import quantize


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got '{text}'") from None


def build_parser() -> _Parser:
    parser = _Parser(prog="mcdaccel", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output-dir", type=Path, default=None)
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("infer", parents=[common],
                       help="MC-Dropout inference on one input")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--p", type=float, default=0.25)
    ic = p.add_mutually_exclusive_group()
    ic.add_argument("--ic", dest="ic", action="store_true", default=True)
    ic.add_argument("--no-ic", dest="ic", action="store_false")
    p.add_argument("--pf", type=int, default=64, help="mask word width (sipo)")
    p.add_argument("--fifo-depth", type=int, default=16)
    p.add_argument("--mem-budget-bits", type=int, default=None)
    p.add_argument("--strict-mem", action="store_true")

    p = sub.add_parser("sample-lfsr", parents=[common],
                       help="emit raw LFSR or sampler bitstreams")
    p.add_argument("--n-reg", type=int, default=16)
    p.add_argument("--taps", type=_csv_ints, default=None)
    p.add_argument("--k", type=int, default=None,
                   help="AND k seeded chains (drop-bit stream); omit for one raw register")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--pack", type=int, default=0,
                   help="pack this many bits per hex word (0 = 0/1 characters)")

    p = sub.add_parser("perf-table", parents=[common],
                       help="latency lookup table over (L, S)")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--hw", type=Path, default=None, help="hardware config JSON")
    p.add_argument("--pc", type=int, default=64)
    p.add_argument("--pf", type=int, default=64)
    p.add_argument("--pv", type=int, default=1)
    p.add_argument("--fifo-depth", type=int, default=16)
    p.add_argument("--clock-mhz", type=float, default=DEFAULT_CLOCK_MHZ)
    ic = p.add_mutually_exclusive_group()
    ic.add_argument("--ic", dest="ic", action="store_true", default=True)
    ic.add_argument("--no-ic", dest="ic", action="store_false")
    p.add_argument("--l-domain", type=_csv_ints, default=None)
    p.add_argument("--s-domain", type=_csv_ints, default=None)
    p.add_argument("--lat-factor", type=float, default=1.0)
    p.add_argument("--lat-overhead-ms", type=float, default=0.0)

    p = sub.add_parser("metrics", parents=[common],
                       help="accuracy / aPE / ECE from a predictions file")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--targets", type=Path, default=None)
    p.add_argument("--n-bins", type=int, default=10)

    p = sub.add_parser("dse", parents=[common],
                       help="design-space exploration over {L, S, PC, PF, PV}")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--budget", required=True, help="<dsp>,<mem-bits>")
    p.add_argument("--mode", default="opt-latency",
                   choices=[m.value for m in dse_mod.Mode])
    p.add_argument("--max-latency-ms", type=float, default=None)
    p.add_argument("--min-acc", type=float, default=None)
    p.add_argument("--min-ape", type=float, default=None)
    p.add_argument("--max-ece", type=float, default=None)
    p.add_argument("--metrics-csv", type=Path, default=None,
                   help="externally supplied (L,S) metric table")
    p.add_argument("--eval-dir", type=Path, default=None,
                   help="directory with eval.json (and optional ood.json)")
    p.add_argument("--ood-noise", type=int, default=None,
                   help="synthesize this many Gaussian OOD inputs from eval stats")
    p.add_argument("--seeds", type=_csv_ints, default=None)
    p.add_argument("--p", type=float, default=0.25)
    p.add_argument("--l-domain", type=_csv_ints, default=None)
    p.add_argument("--s-domain", type=_csv_ints, default=None)
    p.add_argument("--fifo-depth", type=int, default=16)
    p.add_argument("--clock-mhz", type=float, default=DEFAULT_CLOCK_MHZ)
    ic = p.add_mutually_exclusive_group()
    ic.add_argument("--ic", dest="ic", action="store_true", default=True)
    ic.add_argument("--no-ic", dest="ic", action="store_false")
    p.add_argument("--lat-factor", type=float, default=1.0)
    p.add_argument("--lat-overhead-ms", type=float, default=0.0)

    p = sub.add_parser("quantize", parents=[common],
                       help="calibrate and convert a float model to int8")
    p.add_argument("--float-model", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)

    return parser


def _emit(args, filename: str, text: str) -> None:
    """Write to output-dir when given, else stdout; never both."""
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        path = args.output_dir / filename
        path.write_text(text)
        print(str(path))
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise ManifestError(f"cannot read {what} {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(
            f"{what} {path.name}: parse error at line {e.lineno} "
            f"column {e.colno}: {e.msg}") from None


def _load_input_tensor(path: Path) -> np.ndarray:
    doc = _load_json(path, "input tensor")
    if "shape" not in doc or "data" not in doc:
        raise ManifestError(f"input tensor {path.name}: needs 'shape' and 'data'")
    return np.asarray(doc["data"], dtype=np.float64).reshape(
        tuple(int(d) for d in doc["shape"]))


def _cmd_infer(args) -> int:
    net = load_network(args.model)
    cfg = McdConfig(L=args.L, S=args.S, p=args.p)
    cfg.validate_for(net)
    x = quantize(_load_input_tensor(args.input), net.input_scale)
    sampler = BernoulliSampler(k=chains_for_drop_prob(args.p), sipo_width=args.pf,
                               fifo_depth=args.fifo_depth,
                               seed=derive_seed(args.seed, 0x1F0))
    run = predict_with_ic if args.ic else predict
    kwargs = {}
    if args.ic:
        kwargs = {"mem_budget_bits": args.mem_budget_bits, "strict_mem": args.strict_mem}
    result = run(net, x, cfg, sampler, **kwargs)
    doc = {
        "model": net.name, "L": args.L, "S": args.S, "p": args.p, "seed": args.seed,
        "mean_probs": [float(v) for v in result.mean_probs],
        "per_sample": [[float(v) for v in row] for row in result.per_sample],
        "masks_consumed": sampler.bits_drawn,
    }
    _emit(args, "infer.json", _dump_json(doc))
    return 0


def _cmd_sample_lfsr(args) -> int:
    if args.count < 1:
        raise ManifestError(f"count must be >= 1, got {args.count}")
    if args.k is not None:
        sampler = BernoulliSampler(k=args.k, sipo_width=1, seed=args.seed,
                                   n_reg=args.n_reg,
                                   taps=tuple(args.taps) if args.taps else None)
        bits = [sampler.draw_drop_bit() for _ in range(args.count)]
    else:
        taps = tuple(args.taps) if args.taps else None
        if taps is None:
            from .sampler import MAXIMAL_TAPS
            if args.n_reg not in MAXIMAL_TAPS:
                raise ManifestError(f"no default taps for n_reg = {args.n_reg}")
            taps = MAXIMAL_TAPS[args.n_reg]
        bits = Lfsr(LfsrSpec(args.n_reg, taps, args.seed)).step_many(args.count)
    lines = []
    if args.pack > 0:
        width = args.pack
        digits = -(-width // 4)
        for i in range(0, len(bits), width):
            chunk = bits[i:i + width]
            word = 0
            for b in chunk:
                word = (word << 1) | b
            word <<= width - len(chunk)  # ragged tail padded with zeros
            lines.append(f"{word:0{digits}x}")
    else:
        for i in range(0, len(bits), 64):
            lines.append("".join(str(b) for b in bits[i:i + 64]))
    _emit(args, "lfsr.txt", "\n".join(lines) + "\n")
    return 0


def _hw_from_args(args) -> HwConfig:
    if args.hw is not None:
        doc = _load_json(args.hw, "hardware config")
        return HwConfig(pc=int(doc["pc"]), pf=int(doc["pf"]), pv=int(doc["pv"]),
                        dw=int(doc.get("dw", 8)),
                        fifo_depth=int(doc.get("fifo_depth", 16)),
                        clock_mhz=float(doc.get("clock_mhz", DEFAULT_CLOCK_MHZ)))
    return HwConfig(pc=args.pc, pf=args.pf, pv=args.pv, fifo_depth=args.fifo_depth,
                    clock_mhz=args.clock_mhz)


def _domains(args, net) -> tuple[list[int], list[int]]:
    l_dom = args.l_domain if args.l_domain else list(dse_mod.l_domain(net.n_weight_layers))
    s_dom = args.s_domain if args.s_domain else list(dse_mod.S_DOMAIN)
    n = net.n_weight_layers
    for l_bayes in l_dom:
        if not (1 <= l_bayes <= n):
            raise ManifestError(f"L = {l_bayes} outside 1..{n} for this network")
    for s in s_dom:
        if s < 1:
            raise ManifestError(f"S must be >= 1, got {s}")
    return list(l_dom), list(s_dom)


def _cmd_perf_table(args) -> int:
    net = load_network(args.model)
    hw = _hw_from_args(args)
    l_dom, s_dom = _domains(args, net)
    calib = LatencyCalibration(factor=args.lat_factor, overhead_ms=args.lat_overhead_ms)
    table = dse_mod.build_lookup_table(net, hw, l_dom, s_dom, ic=args.ic,
                                       calibration=calib)
    _emit(args, "perf_table.csv", dse_mod.lookup_table_to_csv(table))
    return 0


def _cmd_metrics(args) -> int:
    doc = _load_json(args.predictions, "predictions")
    if "predictions" not in doc:
        raise ManifestError(f"predictions {args.predictions.name}: missing 'predictions'")
    per_example = doc["predictions"]
    if not per_example:
        raise ManifestError("predictions file holds no examples")
    means = np.stack([np.mean(np.asarray(rows, dtype=np.float64), axis=0)
                      for rows in per_example])
    targets = None
    if args.targets is not None:
        tdoc = _load_json(args.targets, "targets")
        targets = np.asarray(tdoc["targets"] if isinstance(tdoc, dict) else tdoc,
                             dtype=np.int64)
    report = metrics_mod.evaluate_predictions(means, targets, n_bins=args.n_bins)
    doc_out = {
        "accuracy_pct": report.accuracy_pct, "ape_nats": report.ape_nats,
        "ece_pct": report.ece_pct, "n_bins": report.n_bins,
        "per_bin": [{"lo": b.lo, "hi": b.hi, "count": b.count,
                     "mean_confidence": b.mean_confidence,
                     "mean_accuracy": b.mean_accuracy} for b in report.per_bin],
    }
    bins_csv = metrics_mod.bins_to_csv(report.per_bin)
    if args.output_dir is not None:
        _emit(args, "metrics.json", _dump_json(doc_out))
        _emit(args, "bins.csv", bins_csv)
    elif args.format == "csv":
        sys.stdout.write(bins_csv)
    else:
        sys.stdout.write(_dump_json(doc_out))
    return 0


def _load_eval_dir(args, net):
    eval_doc = _load_json(args.eval_dir / "eval.json", "evaluation set")
    for key in ("shape", "inputs", "targets"):
        if key not in eval_doc:
            raise ManifestError(f"eval.json: missing '{key}'")
    shape = tuple(int(d) for d in eval_doc["shape"])
    if shape != net.input_shape:
        raise ManifestError(
            f"eval.json inputs are {shape}, the model expects {net.input_shape}")
    inputs = np.stack([np.asarray(r, dtype=np.float64).reshape(shape)
                       for r in eval_doc["inputs"]])
    eval_set = metrics_mod.EvalSet(inputs=inputs,
                                   targets=np.asarray(eval_doc["targets"], dtype=np.int64))
    ood_path = args.eval_dir / "ood.json"
    if ood_path.exists():
        ood_doc = _load_json(ood_path, "OOD set")
        oshape = tuple(int(d) for d in ood_doc["shape"])
        ood_inputs = np.stack([np.asarray(r, dtype=np.float64).reshape(oshape)
                               for r in ood_doc["inputs"]])
        ood_set = metrics_mod.EvalSet(inputs=ood_inputs)
    else:
        n = args.ood_noise if args.ood_noise else len(eval_set)
        ood_set = metrics_mod.gaussian_noise_set(
            n, shape, inputs.mean(axis=0), inputs.std(axis=0),
            seed=derive_seed(args.seed, 0x0D5E))
    return eval_set, ood_set


def _cmd_dse(args) -> int:
    net = load_network(args.model)
    parts = args.budget.split(",")
    if len(parts) != 2:
        raise UsageError(f"--budget must be <dsp>,<mem-bits>, got '{args.budget}'")
    try:
        budget = ResourceBudget(dsp_total=int(parts[0]), mem_total_bits=int(parts[1]))
    except ValueError as e:
        raise UsageError(f"--budget must be <dsp>,<mem-bits>: {e}") from None
    mode = dse_mod.Mode(args.mode)
    hw = dse_mod.optimize_hardware(net, budget, fifo_depth=args.fifo_depth,
                                   clock_mhz=args.clock_mhz)
    l_dom, s_dom = _domains(args, net)
    calibration = LatencyCalibration(factor=args.lat_factor,
                                     overhead_ms=args.lat_overhead_ms)
    latency_table = dse_mod.build_lookup_table(net, hw, l_dom, s_dom, ic=args.ic,
                                               calibration=calibration)
    if args.metrics_csv is not None:
        try:
            metric_table = dse_mod.metric_table_from_csv(args.metrics_csv.read_text())
        except OSError as e:
            raise ManifestError(f"cannot read metric table: {e}") from None
        provenance = "supplied"
    elif args.eval_dir is not None:
        eval_set, ood_set = _load_eval_dir(args, net)
        seeds = args.seeds if args.seeds else [args.seed]
        metric_table = dse_mod.evaluate_candidates(
            net, eval_set, ood_set, l_dom, s_dom, p=args.p, seeds=seeds,
            sipo_width=hw.pf, fifo_depth=hw.fifo_depth, threads=args.threads)
        provenance = "computed"
    else:
        raise UsageError("dse needs --metrics-csv or --eval-dir for quality metrics")
    candidates = dse_mod.assemble_candidates(latency_table, metric_table)
    requirements = dse_mod.MinRequirements(
        max_latency_ms=args.max_latency_ms, min_accuracy_pct=args.min_acc,
        min_ape_nats=args.min_ape, max_ece_pct=args.max_ece)
    result = dse_mod.select(candidates, mode, requirements, hw=hw,
                            provenance=provenance, calibration=calibration)
    doc = {
        "mode": result.mode.value,
        "hw": {"pc": hw.pc, "pf": hw.pf, "pv": hw.pv, "dw": hw.dw,
               "fifo_depth": hw.fifo_depth, "clock_mhz": hw.clock_mhz},
        "chosen": vars(result.chosen),
        "provenance": result.provenance,
        "calibration": {"factor": result.calibration.factor,
                        "overhead_ms": result.calibration.overhead_ms},
        "n_candidates": len(result.candidates),
        "n_feasible": len(result.candidates) - len(result.excluded),
        "excluded": [{"L": c.L, "S": c.S, "violations": v} for c, v in result.excluded],
    }
    cands_csv = dse_mod.candidates_to_csv(result)
    if args.output_dir is not None:
        _emit(args, "dse_result.json", _dump_json(doc))
        _emit(args, "candidates.csv", cands_csv)
    elif args.format == "csv":
        sys.stdout.write(cands_csv)
    else:
        sys.stdout.write(_dump_json(doc))
    return 0


def _cmd_quantize(args) -> int:
    if args.output_dir is None:
        raise UsageError("quantize requires --output-dir for the manifest and blobs")
    fm = load_float_model(args.float_model)
    calib = load_calibration(args.calib)
    net = quantize_model(fm, calib)
    manifest = save_network(net, args.output_dir)
    print(str(manifest))
    return 0


_COMMANDS = {
    "infer": _cmd_infer,
    "sample-lfsr": _cmd_sample_lfsr,
    "perf-table": _cmd_perf_table,
    "metrics": _cmd_metrics,
    "dse": _cmd_dse,
    "quantize": _cmd_quantize,
}


def _fail(kind: str, message: str) -> None:
    flat = " ".join(str(message).split())
    print(f"mcdaccel: error: {kind}: {flat}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _fail("usage", str(e))
        return 1
    if args.command is None:
        print(parser.format_usage(), end="")
        _fail("usage", "a subcommand is required")
        return 1
    if args.threads < 1:
        _fail("usage", f"--threads must be >= 1, got {args.threads}")
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        _fail("usage", str(e))
        return 1
    except dse_mod.InfeasibleError as e:
        _fail("infeasible", str(e))
        return 3
    except CacheBudgetError as e:
        _fail("cache-budget", str(e))
        return 2
    except (ManifestError, ValueError, KeyError, OSError) as e:
        _fail("validation", str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
