"""Classification accuracy, predictive entropy, and calibration error.

All three metrics operate on mean predictive distributions (the average
of S stochastic softmax passes).  aPE is reported in nats; ECE uses
right-closed bins partitioning (0, 1] - confidence is max_k p_k >= 1/K,
so the partition is total.  Conventions are pinned down here because
binning and log-base choices vary across implementations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .rng import derive_seed, normals


@dataclass
class EvalSet:
    """Float inputs with optional integer targets (OOD noise sets have none)."""

    inputs: np.ndarray
    targets: np.ndarray | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim < 2:
            raise ValueError("inputs must be (n, ...) with at least one data axis")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.int64)
            if self.targets.shape != (self.inputs.shape[0],):
                raise ValueError("inputs and targets must have equal length")
            if self.n_classes is not None and self.targets.size:
                if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
                    raise ValueError(f"targets must lie in 0..{self.n_classes - 1}")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class BinStat:
    """One confidence bin: range (lo, hi], count, mean confidence, mean accuracy."""

    lo: float
    hi: float
    count: int
    mean_confidence: float
    mean_accuracy: float


@dataclass
class MetricsReport:
    accuracy_pct: float
    ape_nats: float
    ece_pct: float
    n_bins: int
    per_bin: list[BinStat]


def _mean_probs_matrix(preds) -> np.ndarray:
    """Accept a list of PredictiveResult-likes or an (n, K) array."""
    if hasattr(preds, "ndim"):
        m = np.asarray(preds, dtype=np.float64)
    else:
        rows = [p.mean_probs if hasattr(p, "mean_probs") else p for p in preds]
        m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("predictions must be a nonempty (n, K) set of distributions")
    return m


def accuracy(preds, targets) -> float:
    """Percent of examples whose argmax class matches the target.

    Argmax ties go to the lowest class index, so degenerate uniform
    predictions are still deterministic.
    """
    m = _mean_probs_matrix(preds)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (m.shape[0],):
        raise ValueError("predictions and targets must have equal length")
    picked = np.argmax(m, axis=1)  # first max wins
    return float(np.mean(picked == t) * 100.0)


def average_predictive_entropy(preds) -> float:
    """Mean of -sum_k p_k ln p_k over the set, with 0 ln 0 = 0."""
    m = _mean_probs_matrix(preds)
    if (m < 0.0).any():
        idx = int(np.flatnonzero((m < 0.0).any(axis=1))[0])
        raise ValueError(f"negative probability in prediction {idx}")
    ent = np.where(m > 0.0, -m * np.log(np.where(m > 0.0, m, 1.0)), 0.0).sum(axis=1)
    return float(ent.mean())


def calibration_bins(preds, targets, n_bins: int = 10) -> list[BinStat]:
    """Assign examples to right-closed confidence bins over (0, 1].

    Bin b covers (b/n_bins, (b+1)/n_bins]; confidence c lands in bin
    ceil(c * n_bins) - 1.  Empty bins report zero means.
    """
    m = _mean_probs_matrix(preds)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (m.shape[0],):
        raise ValueError("predictions and targets must have equal length")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    conf = m.max(axis=1)
    correct = (np.argmax(m, axis=1) == t).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        bins.append(BinStat(
            lo=b / n_bins, hi=(b + 1) / n_bins, count=count,
            mean_confidence=float(conf[sel].mean()) if count else 0.0,
            mean_accuracy=float(correct[sel].mean()) if count else 0.0))
    return bins


def expected_calibration_error(preds, targets, n_bins: int = 10) -> float:
    """ECE in percent: sum_b (|B_b|/n) * |acc(B_b) - conf(B_b)| * 100."""
    bins = calibration_bins(preds, targets, n_bins)
    n = sum(b.count for b in bins)
    ece = sum((b.count / n) * abs(b.mean_accuracy - b.mean_confidence) for b in bins)
    return float(ece * 100.0)


def evaluate_predictions(preds, targets=None, n_bins: int = 10) -> MetricsReport:
    """Bundle the three metrics into one report.

    Without targets only aPE is defined; accuracy and ECE are reported
    as NaN so the absence is visible rather than silently zero.
    """
    ape = average_predictive_entropy(preds)
    if targets is None:
        return MetricsReport(accuracy_pct=float("nan"), ape_nats=ape,
                             ece_pct=float("nan"), n_bins=n_bins, per_bin=[])
    return MetricsReport(
        accuracy_pct=accuracy(preds, targets),
        ape_nats=ape,
        ece_pct=expected_calibration_error(preds, targets, n_bins),
        n_bins=n_bins,
        per_bin=calibration_bins(preds, targets, n_bins))


def gaussian_noise_set(n: int, shape, mean, std, seed: int) -> EvalSet:
    """n i.i.d. Gaussian inputs with per-element mean/std, reproducible by seed.

    Uses Box-Muller on the package's counter-based uniform stream, so two
    runs (or two implementations of this recipe) produce byte-identical
    sets.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    shape = tuple(int(d) for d in shape)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), shape)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), shape)
    if (std < 0.0).any():
        raise ValueError("std must be elementwise nonnegative")
    count = n * int(np.prod(shape))
    z = normals(derive_seed(seed, 0x6E6F6973), count).reshape((n,) + shape)
    return EvalSet(inputs=mean + std * z, targets=None)


# bin-table CSV round-trips exactly: floats via repr

_BIN_FIELDS = ("bin_lo", "bin_hi", "count", "mean_confidence", "mean_accuracy")


def bins_to_csv(bins: list[BinStat]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_BIN_FIELDS)
    for b in bins:
        writer.writerow([repr(b.lo), repr(b.hi), b.count,
                         repr(b.mean_confidence), repr(b.mean_accuracy)])
    return buf.getvalue()


def bins_from_csv(text: str) -> list[BinStat]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != _BIN_FIELDS:
        raise ValueError(f"bin CSV header must be {','.join(_BIN_FIELDS)}")
    return [BinStat(lo=float(row[0]), hi=float(row[1]), count=int(row[2]),
                    mean_confidence=float(row[3]), mean_accuracy=float(row[4]))
            for row in reader if row]
