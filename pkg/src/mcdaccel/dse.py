"""Two-stage design-space exploration over {L, S, PC, PF, PV}.

Stage one fixes the hardware: maximize PC*PF*PV subject to the resource
budget.  Stage two walks the algorithmic grid (L, S), annotating each
point with modeled latency and measured-or-supplied quality metrics,
filters by the requested bounds, and picks the optimum for the chosen
mode.  The domains are tiny (at most 100 hardware points and 55
algorithmic points), so both stages are exact exhaustive scans; ties are
broken by documented rules so results are reproducible.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .engine import McdConfig, predict_with_ic
from .metrics import (EvalSet, accuracy, average_predictive_entropy,
                      expected_calibration_error)
from .network import Network
from .perfmodel import (HwConfig, LatencyCalibration, LatencyEstimate,
                        PC_DOMAIN, PF_DOMAIN, PV_DOMAIN, ResourceBudget,
                        fits, network_latency, resource_estimate)
from .rng import derive_seed
from .sampler import BernoulliSampler, chains_for_drop_prob
from .tensor import quantize

S_DOMAIN = (3, 4, 5, 6, 7, 8, 9, 10, 20, 50, 100)


def round_half_up(x: float) -> int:
    import math
    return int(math.floor(x + 0.5))


def l_domain(n_weight_layers: int) -> tuple[int, ...]:
    """Candidate Bayesian depths: {1, N/3, N/2, 2N/3, N} rounded half-up.

    Rounding ties go up, i.e. toward the more-Bayesian depth; duplicates
    collapse for small N.
    """
    n = n_weight_layers
    if n < 1:
        raise ValueError("network must have at least one weight layer")
    raw = {1, round_half_up(n / 3), round_half_up(n / 2), round_half_up(2 * n / 3), n}
    return tuple(sorted(v for v in raw if 1 <= v <= n))


class Mode(Enum):
    OPT_LATENCY = "opt-latency"
    OPT_ACCURACY = "opt-accuracy"
    OPT_UNCERTAINTY = "opt-uncertainty"
    OPT_CONFIDENCE = "opt-confidence"


@dataclass(frozen=True)
class MinRequirements:
    """Optional box constraints applied before mode selection."""

    max_latency_ms: float | None = None
    min_accuracy_pct: float | None = None
    min_ape_nats: float | None = None
    max_ece_pct: float | None = None

    def violations(self, cand: "DseCandidate") -> list[str]:
        out = []
        if self.max_latency_ms is not None and cand.latency_ms > self.max_latency_ms:
            out.append(f"latency {cand.latency_ms:.6g} ms > {self.max_latency_ms:.6g}")
        if self.min_accuracy_pct is not None and cand.accuracy_pct < self.min_accuracy_pct:
            out.append(f"accuracy {cand.accuracy_pct:.6g}% < {self.min_accuracy_pct:.6g}%")
        if self.min_ape_nats is not None and cand.ape_nats < self.min_ape_nats:
            out.append(f"aPE {cand.ape_nats:.6g} < {self.min_ape_nats:.6g} nats")
        if self.max_ece_pct is not None and cand.ece_pct > self.max_ece_pct:
            out.append(f"ECE {cand.ece_pct:.6g}% > {self.max_ece_pct:.6g}%")
        return out


@dataclass
class DseCandidate:
    """One (L, S) point with modeled latency and quality metrics.

    std fields are zero when metrics came from a single run or an
    external table without spread information.
    """

    L: int
    S: int
    latency_ms: float
    accuracy_pct: float
    ape_nats: float
    ece_pct: float
    accuracy_std: float = 0.0
    ape_std: float = 0.0
    ece_std: float = 0.0


class InfeasibleError(Exception):
    """No candidate (or no hardware point) satisfies the constraints."""

    def __init__(self, message: str, violation_counts: dict[str, int] | None = None):
        super().__init__(message)
        self.violation_counts = violation_counts or {}


@dataclass
class DseResult:
    mode: Mode
    chosen: DseCandidate
    hw: HwConfig | None
    candidates: list[DseCandidate]
    excluded: list[tuple[DseCandidate, list[str]]]
    provenance: str  # "computed" or "supplied"
    calibration: LatencyCalibration = field(default_factory=LatencyCalibration)


def optimize_hardware(net: Network, budget: ResourceBudget,
                      fifo_depth: int = 16, clock_mhz: float = 225.0) -> HwConfig:
    """Largest-throughput configuration that fits the budget.

    Maximizes PC*PF*PV over the full domain grid; ties prefer larger PF,
    then larger PC, then larger PV (filter parallelism feeds the most
    units downstream).
    """
    best = None
    best_key = None
    for pc in PC_DOMAIN:
        for pf in PF_DOMAIN:
            for pv in PV_DOMAIN:
                hw = HwConfig(pc=pc, pf=pf, pv=pv, fifo_depth=fifo_depth,
                              clock_mhz=clock_mhz)
                if not fits(resource_estimate(net, hw), budget):
                    continue
                key = (pc * pf * pv, pf, pc, pv)
                if best_key is None or key > best_key:
                    best, best_key = hw, key
    if best is None:
        raise InfeasibleError("no hardware configuration fits the resource budget")
    return best


def build_lookup_table(net: Network, hw: HwConfig, l_dom, s_dom, ic: bool = True,
                       calibration: LatencyCalibration = LatencyCalibration()
                       ) -> dict[tuple[int, int], LatencyEstimate]:
    """Latency for every (L, S) grid point."""
    table = {}
    for l_bayes in l_dom:
        for s in s_dom:
            table[(l_bayes, s)] = network_latency(net, hw, l_bayes, s, ic,
                                                  calibration=calibration)
    return table


def _predict_one(net, inp, cfg, seed, sipo_width, fifo_depth):
    x = quantize(inp, net.input_scale)
    # int8 grid alignment: requantize the float input onto the net's scale
    sampler = BernoulliSampler(k=chains_for_drop_prob(cfg.p), sipo_width=sipo_width,
                               fifo_depth=fifo_depth, seed=seed)
    return predict_with_ic(net, x, cfg, sampler).mean_probs


def _predict_set(net, inputs, cfg, seed, sipo_width, fifo_depth, threads):
    """Mean predictive distributions for a batch of float inputs.

    Each input gets its own sampler seeded by (seed, input index), so the
    result is independent of how inputs are partitioned across threads.
    """
    seeds = [derive_seed(seed, i) for i in range(len(inputs))]
    if threads <= 1:
        rows = [_predict_one(net, inp, cfg, s, sipo_width, fifo_depth)
                for inp, s in zip(inputs, seeds)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(
                lambda args: _predict_one(net, args[0], cfg, args[1], sipo_width, fifo_depth),
                zip(inputs, seeds)))
    return np.stack(rows)


def evaluate_candidates(net: Network, eval_set: EvalSet, ood_set: EvalSet,
                        l_dom, s_dom, p: float, seeds, sipo_width: int = 64,
                        fifo_depth: int = 16, threads: int = 1
                        ) -> dict[tuple[int, int], dict[str, float]]:
    """Measured quality metrics for every (L, S) point.

    Runs the cached-prefix engine over the evaluation set (accuracy, ECE)
    and the OOD set (aPE) for each seed; reports mean and population std
    across seeds.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    table = {}
    for l_bayes in l_dom:
        for s in s_dom:
            cfg = McdConfig(L=l_bayes, S=s, p=p)
            accs, apes, eces = [], [], []
            for seed in seeds:
                preds = _predict_set(net, eval_set.inputs, cfg, derive_seed(seed, 0xE7A1),
                                     sipo_width, fifo_depth, threads)
                accs.append(accuracy(preds, eval_set.targets))
                eces.append(expected_calibration_error(preds, eval_set.targets))
                ood = _predict_set(net, ood_set.inputs, cfg, derive_seed(seed, 0x00D),
                                   sipo_width, fifo_depth, threads)
                apes.append(average_predictive_entropy(ood))
            table[(l_bayes, s)] = {
                "accuracy_pct": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
                "ape_nats": float(np.mean(apes)), "ape_std": float(np.std(apes)),
                "ece_pct": float(np.mean(eces)), "ece_std": float(np.std(eces)),
            }
    return table


def assemble_candidates(latency_table, metric_table) -> list[DseCandidate]:
    """Join the latency and metric tables on their common (L, S) keys."""
    out = []
    for key in sorted(latency_table):
        if key not in metric_table:
            raise ValueError(f"metric table is missing (L, S) = {key}")
        lat = latency_table[key]
        m = metric_table[key]
        out.append(DseCandidate(
            L=key[0], S=key[1], latency_ms=lat.latency_ms,
            accuracy_pct=m["accuracy_pct"], ape_nats=m["ape_nats"],
            ece_pct=m["ece_pct"], accuracy_std=m.get("accuracy_std", 0.0),
            ape_std=m.get("ape_std", 0.0), ece_std=m.get("ece_std", 0.0)))
    return out


_OBJECTIVES = {
    Mode.OPT_LATENCY: lambda c: c.latency_ms,
    Mode.OPT_ACCURACY: lambda c: -c.accuracy_pct,
    Mode.OPT_UNCERTAINTY: lambda c: -c.ape_nats,
    Mode.OPT_CONFIDENCE: lambda c: c.ece_pct,
}


def select(candidates: list[DseCandidate], mode: Mode,
           requirements: MinRequirements = MinRequirements(),
           hw: HwConfig | None = None, provenance: str = "supplied",
           calibration: LatencyCalibration = LatencyCalibration()) -> DseResult:
    """Filter by the box constraints, then optimize the mode's objective.

    Ties on the objective are broken by lower latency, then lower S, then
    lower L, so selection is a deterministic function of the table.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    excluded = []
    feasible = []
    counts: dict[str, int] = {}
    for cand in candidates:
        violations = requirements.violations(cand)
        if violations:
            excluded.append((cand, violations))
            for v in violations:
                bound = v.split()[0]
                counts[bound] = counts.get(bound, 0) + 1
        else:
            feasible.append(cand)
    if not feasible:
        summary = ", ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
        raise InfeasibleError(
            f"no candidate satisfies the constraints ({summary})", counts)
    objective = _OBJECTIVES[mode]
    chosen = min(feasible, key=lambda c: (objective(c), c.latency_ms, c.S, c.L))
    return DseResult(mode=mode, chosen=chosen, hw=hw, candidates=list(candidates),
                     excluded=excluded, provenance=provenance, calibration=calibration)


# ---------------------------------------------------------------------------
# CSV formats.  Floats are emitted with repr so parse(emit(x)) == x.

_CAND_FIELDS = ("L", "S", "latency_ms", "accuracy_pct", "accuracy_std",
                "ape_nats", "ape_std", "ece_pct", "ece_std", "feasible",
                "violations")


def candidates_to_csv(result: DseResult) -> str:
    """Every candidate with a feasibility column, for external plotting."""
    excluded = {(c.L, c.S): v for c, v in result.excluded}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CAND_FIELDS)
    for c in result.candidates:
        violations = excluded.get((c.L, c.S), [])
        writer.writerow([c.L, c.S, repr(c.latency_ms), repr(c.accuracy_pct),
                         repr(c.accuracy_std), repr(c.ape_nats), repr(c.ape_std),
                         repr(c.ece_pct), repr(c.ece_std),
                         0 if violations else 1, "; ".join(violations)])
    return buf.getvalue()


def candidates_from_csv(text: str) -> list[tuple[DseCandidate, bool]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != _CAND_FIELDS:
        raise ValueError(f"candidate CSV header must be {','.join(_CAND_FIELDS)}")
    out = []
    for row in reader:
        if not row:
            continue
        cand = DseCandidate(L=int(row[0]), S=int(row[1]), latency_ms=float(row[2]),
                            accuracy_pct=float(row[3]), accuracy_std=float(row[4]),
                            ape_nats=float(row[5]), ape_std=float(row[6]),
                            ece_pct=float(row[7]), ece_std=float(row[8]))
        out.append((cand, bool(int(row[9]))))
    return out


_METRIC_FIELDS = ("L", "S", "accuracy_pct", "accuracy_std", "ape_nats",
                  "ape_std", "ece_pct", "ece_std")


def metric_table_to_csv(table: dict[tuple[int, int], dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_METRIC_FIELDS)
    for (l_bayes, s), m in sorted(table.items()):
        writer.writerow([l_bayes, s] + [repr(float(m.get(f, 0.0)))
                                        for f in _METRIC_FIELDS[2:]])
    return buf.getvalue()


def metric_table_from_csv(text: str) -> dict[tuple[int, int], dict[str, float]]:
    """Parse an externally supplied metric table (header must match)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != _METRIC_FIELDS:
        raise ValueError(f"metric CSV header must be {','.join(_METRIC_FIELDS)}")
    table = {}
    for row in reader:
        if not row:
            continue
        key = (int(row[0]), int(row[1]))
        table[key] = {f: float(v) for f, v in zip(_METRIC_FIELDS[2:], row[2:])}
    return table


_PERF_FIELDS = ("L", "S", "cycles", "latency_ms")


def lookup_table_to_csv(table: dict[tuple[int, int], LatencyEstimate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_PERF_FIELDS)
    for (l_bayes, s), est in sorted(table.items()):
        writer.writerow([l_bayes, s, est.total_cycles, repr(est.latency_ms)])
    return buf.getvalue()


def lookup_table_from_csv(text: str) -> dict[tuple[int, int], dict[str, float]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != _PERF_FIELDS:
        raise ValueError(f"perf CSV header must be {','.join(_PERF_FIELDS)}")
    table = {}
    for row in reader:
        if not row:
            continue
        table[(int(row[0]), int(row[1]))] = {"cycles": int(row[2]),
                                             "latency_ms": float(row[3])}
    return table
