"""Evaluation: piecewise error grouping and the pass/fail tradeoff sweep.

Errors are graded into six bands, each entered via a relative-error branch
or an absolute-error branch, so near-zero truths (where relative error
blows up) still grade sensibly. Fail screening shrinks the control-limit
interval symmetrically by a fraction f and predicts fail outside it;
sweeping f trades false positives for recall.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .domain import ControlLimits, ErrorRecord, Inspection, MeasurementRecord, PassFail
from .nn import ModelParams, forward_batch
from .normgroups import GroupKey, NormalizationGroup
from .preprocess import Bucket, unjoin

log = logging.getLogger(__name__)

# (relative, absolute) thresholds for groups 1..5; strict comparisons.
GROUP_THRESHOLDS = ((0.01, 0.1), (0.05, 0.5), (0.10, 1.0), (0.50, 5.0), (1.00, 10.0))

DEFAULT_F_GRID = (0.0, 0.1, 0.2, 0.3, 0.35, 0.4)


class EvaluationError(ValueError):
    pass


def _group_of(eta: float, epsilon: float) -> int:
    for k, (eta_lim, eps_lim) in enumerate(GROUP_THRESHOLDS, start=1):
        if eta < eta_lim or epsilon < eps_lim:
            return k
    return 6


def relative_error(y_hat: float, y: float) -> ErrorRecord:
    """Absolute and relative error of one prediction; eta is +inf at y = 0."""
    epsilon = abs(y_hat - y)
    eta = epsilon / abs(y) if y != 0 else float("inf")
    return ErrorRecord(eta=eta, epsilon=epsilon, group=_group_of(eta, epsilon))


def assign_group(e: ErrorRecord) -> int:
    """Smallest band whose relative or absolute threshold the error beats."""
    return _group_of(e.eta, e.epsilon)


@dataclass(frozen=True)
class GroupingReport:
    counts: tuple[int, int, int, int, int, int]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def decent_rate(self) -> float:
        """Fraction of predictions in groups 1 and 2."""
        return (self.counts[0] + self.counts[1]) / self.total

    @classmethod
    def from_counts(cls, counts) -> "GroupingReport":
        counts = tuple(int(c) for c in counts)
        if len(counts) != 6 or any(c < 0 for c in counts):
            raise EvaluationError(f"need six nonnegative counts, got {counts}")
        if sum(counts) == 0:
            raise EvaluationError("empty grouping report")
        return cls(counts)


def grouping_report(pairs) -> GroupingReport:
    """Grade (prediction, truth) pairs into the six bands."""
    counts = [0] * 6
    n = 0
    for y_hat, y in pairs:
        counts[relative_error(y_hat, y).group - 1] += 1
        n += 1
    if n == 0:
        raise EvaluationError("grouping_report: no samples")
    return GroupingReport.from_counts(counts)


def label_fail_wafer(m: MeasurementRecord, limits: ControlLimits) -> bool:
    """True iff the fail label, the inspection outcome, and the measurement
    being outside the control limits all agree the wafer failed."""
    return (
        m.passfail.is_fail
        and m.inspection in (Inspection.REWORK, Inspection.SCRAP)
        and (m.meas_med > limits.ucl or m.meas_med < limits.lcl)
    )


def label_fail_arrays(passfail, inspection, meas_med, lcl, ucl) -> np.ndarray:
    """Vectorized label_fail_wafer over bucket arrays."""
    fail_label = np.isin(passfail, [PassFail.FAIL_AVG_HI.value, PassFail.FAIL_AVG_LOW.value])
    inspected = np.isin(inspection, [Inspection.REWORK.value, Inspection.SCRAP.value])
    outside = (meas_med > ucl) | (meas_med < lcl)
    return fail_label & inspected & outside


@dataclass(frozen=True)
class FailPredicate:
    """Shrunken control-limit interval test of Eq.-style tradeoff screening."""

    b1_star: float
    b2_star: float
    f: float

    def __post_init__(self) -> None:
        if not self.b1_star < self.b2_star:
            raise EvaluationError(f"need b1* < b2*, got ({self.b1_star}, {self.b2_star})")
        if not 0.0 <= self.f < 0.5:
            raise EvaluationError(f"f must be in [0, 0.5), got {self.f}")

    @property
    def r(self) -> float:
        return self.b2_star - self.b1_star


def predict_fail(y_hat: float, p: FailPredicate) -> bool:
    """Fail iff y_hat falls outside the open interval (b1*+f*r, b2*-f*r)."""
    return not (p.b1_star + p.f * p.r < y_hat < p.b2_star - p.f * p.r)


def predict_fail_arrays(y_hat, b1_star, b2_star, f: float) -> np.ndarray:
    r = b2_star - b1_star
    return ~((b1_star + f * r < y_hat) & (y_hat < b2_star - f * r))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            log.warning("no positive truth labels: recall undefined")
            return float("nan")
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self) -> float:
        if self.fp + self.tn == 0:
            log.warning("no negative truth labels: false positive rate undefined")
            return float("nan")
        return self.fp / (self.fp + self.tn)


@dataclass(frozen=True)
class SweepRow:
    f: float
    counts: ConfusionCounts

    @property
    def recall(self) -> float:
        return self.counts.recall

    @property
    def fpr(self) -> float:
        return self.counts.fpr


def recall_fpr_sweep(y_hat, truth_fail, b1_star, b2_star, f_values) -> list[SweepRow]:
    """Confusion counts of the shrinking-interval screen at each f, sorted by f."""
    y_hat = np.asarray(y_hat, dtype=float)
    truth = np.asarray(truth_fail, dtype=bool)
    rows = []
    for f in sorted(f_values):
        predicted = predict_fail_arrays(y_hat, np.asarray(b1_star), np.asarray(b2_star), f)
        rows.append(SweepRow(f=f, counts=ConfusionCounts(
            tp=int(np.sum(predicted & truth)),
            fn=int(np.sum(~predicted & truth)),
            fp=int(np.sum(predicted & ~truth)),
            tn=int(np.sum(~predicted & ~truth)),
        )))
    return rows


def predict_bucket(params: ModelParams, bucket: Bucket, s_width: int, m_width: int,
                   chunk: int = 512) -> np.ndarray:
    """Model predictions (on the model's own output scale) for one bucket."""
    steps, meas = unjoin(bucket.features, bucket.n_steps, s_width, m_width)
    preds = np.empty(len(bucket), dtype=np.float64)
    for start in range(0, len(bucket), chunk):
        sl = slice(start, start + chunk)
        out, _ = forward_batch(params, steps[sl], meas[sl], want_trace=False)
        preds[sl] = out
    return preds


def denormalize_bucket(preds: np.ndarray, bucket: Bucket,
                       groups: dict[GroupKey, NormalizationGroup]):
    """Map normalized-scale predictions back per sample.

    Returns (y_hat, keep mask); samples whose key has no group are masked out.
    """
    y_hat = np.full(len(preds), np.nan)
    keep = np.zeros(len(preds), dtype=bool)
    for i in range(len(preds)):
        g = groups.get((bucket.kqi[i], bucket.mtype[i], bucket.stage[i]))
        if g is not None:
            y_hat[i] = preds[i] * (g.b2 - g.b1) + g.b1
            keep[i] = True
    return y_hat, keep


# Report files: a grouping CSV, a sweep CSV (doubling as plot data), and a
# human-readable text summary. All numeric cells use repr so that repeated
# runs with the same seed are byte-identical.

def write_grouping_csv(path, report: GroupingReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "count"])
        for k, count in enumerate(report.counts, start=1):
            writer.writerow([k, count])
        writer.writerow(["decent_rate", repr(report.decent_rate)])


def write_sweep_csv(path, rows: list[SweepRow], with_counts: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if with_counts:
            writer.writerow(["f", "recall", "fpr", "tp", "fn", "fp", "tn"])
            for row in rows:
                c = row.counts
                writer.writerow([repr(row.f), repr(row.recall), repr(row.fpr),
                                 c.tp, c.fn, c.fp, c.tn])
        else:
            writer.writerow(["f", "recall", "fpr"])
            for row in rows:
                writer.writerow([repr(row.f), repr(row.recall), repr(row.fpr)])


def format_report_text(grouping: GroupingReport | None, sweep: list[SweepRow],
                       diagnostics: dict[str, int]) -> str:
    lines = []
    if grouping is not None:
        lines.append("error grouping (groups 1..6): "
                     + "[" + ", ".join(str(c) for c in grouping.counts) + "]")
        lines.append(f"decent predictions: {grouping.counts[0] + grouping.counts[1]}"
                     f"/{grouping.total} = {100.0 * grouping.decent_rate:.2f}%")
    if sweep:
        lines.append("")
        lines.append("pass/fail sweep:")
        lines.append("      f   recall      fpr")
        for row in sweep:
            lines.append(f"  {row.f:5.2f}  {row.recall:7.4f}  {row.fpr:7.4f}")
    if diagnostics:
        lines.append("")
        for key in sorted(diagnostics):
            lines.append(f"diagnostics: {key} = {diagnostics[key]}")
    return "\n".join(lines) + "\n"
