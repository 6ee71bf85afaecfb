"""Case-level detection scoring from voxel-level predictions.

Rule table used by :func:`classify_case`:

=================  ============  =========  ========
prediction         tumor label   overlap    category
=================  ============  =========  ========
non-empty          non-empty     yes        TP
non-empty          non-empty     no         FP (mislocated)
non-empty          empty         n/a        FP
empty              non-empty     n/a        FN
empty              empty         n/a        TN
=================  ============  =========  ========

A mislocated prediction on a tumor case is a false positive, so FN only
counts cases where the model predicted nothing at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ShapeMismatch
from .model import softmax
from .volume import Volume3D, _as_array, dice, overlaps

CATEGORIES = ("TP", "FP", "FN", "TN")
TUMOR_CLASS = 1


def binarize(logits, threshold=0.5) -> np.ndarray:
    """uint8 mask of voxels whose tumor-class softmax probability is >= threshold.

    Equal two-class logits give probability exactly 0.5 and therefore count
    as positive at the default threshold.
    """
    prob = softmax(logits, axis=0)[TUMOR_CLASS]
    return (prob >= threshold).astype(np.uint8)


@dataclass
class DetectionOutcome:
    case_id: str
    predicted_positive: bool
    tumor_present: bool
    overlap: bool
    dice: float | None
    category: str


def classify_case(pred, y, case_id="") -> DetectionOutcome:
    p, t = _as_array(pred), _as_array(y)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{case_id}: prediction {p.shape} vs label {t.shape}")
    predicted = bool(np.any(p))
    tumor = bool(np.any(t))
    hit = overlaps(p, t) if predicted and tumor else False
    if predicted and tumor:
        category = "TP" if hit else "FP"
    elif predicted:
        category = "FP"
    elif tumor:
        category = "FN"
    else:
        category = "TN"
    return DetectionOutcome(
        case_id=case_id,
        predicted_positive=predicted,
        tumor_present=tumor,
        overlap=hit,
        dice=dice(p, t) if tumor else None,
        category=category,
    )


def _ratio(num, den):
    return num / den if den else None


@dataclass
class MetricsReport:
    outcomes: list
    counts: dict
    sensitivity: float | None
    specificity: float | None
    mean_dice: float | None
    flags: list = field(default_factory=list)

    @property
    def n_cases(self):
        return len(self.outcomes)

    def summary(self):
        return {
            "n_cases": self.n_cases,
            **{k: self.counts[k] for k in CATEGORIES},
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "mean_dice": self.mean_dice,
            "flags": ";".join(self.flags),
        }


def aggregate(outcomes) -> MetricsReport:
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyInput("aggregate needs at least one outcome")
    counts = {k: 0 for k in CATEGORIES}
    for o in outcomes:
        counts[o.category] += 1
    sens = _ratio(counts["TP"], counts["TP"] + counts["FN"])
    spec = _ratio(counts["TN"], counts["TN"] + counts["FP"])
    dices = [o.dice for o in outcomes if o.tumor_present and o.dice is not None]
    flags = []
    if sens is None:
        flags.append("sensitivity_undefined")
    if spec is None:
        flags.append("specificity_undefined")
    return MetricsReport(
        outcomes=outcomes,
        counts=counts,
        sensitivity=sens,
        specificity=spec,
        mean_dice=float(np.mean(dices)) if dices else None,
        flags=flags,
    )


def mean_sd(values):
    """Mean and population standard deviation, ignoring undefined entries."""
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return None, None
    return float(vals.mean()), float(vals.std())


def format_mean_sd(values, percent=False, decimals=2):
    """Table-style ``"0.99 ± 0.02"`` (or ``"99±2%"`` with ``percent``)."""
    mean, sd = mean_sd(values)
    if mean is None:
        return "N/A"
    if percent:
        return f"{_round_half_up(100 * mean, 0):.0f}±{_round_half_up(100 * sd, 0):.0f}%"
    return f"{_round_half_up(mean, decimals):.{decimals}f} ± {_round_half_up(sd, decimals):.{decimals}f}"


def _round_half_up(x, decimals):
    scale = 10**decimals
    return math.floor(x * scale + 0.5) / scale


def evaluate_predictions(cases, predictions, threshold=0.5) -> MetricsReport:
    """Score logits (or already binary masks) against each case label."""
    outcomes = []
    for case, pred in zip(cases, predictions):
        mask = pred if _is_mask(pred, case) else binarize(pred, threshold)
        outcomes.append(classify_case(mask, case.y, case.case_id))
    return aggregate(outcomes)


def _is_mask(pred, case):
    arr = pred.data if isinstance(pred, Volume3D) else np.asarray(pred)
    return arr.shape == case.shape


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.8f}"
    return str(v)


REPORT_COLUMNS = ("case_id", "category", "predicted_positive", "tumor_present", "overlap", "dice")


def write_report(report: MetricsReport, path):
    """Per-case TSV rows followed by a ``#``-prefixed summary block."""
    lines = ["\t".join(REPORT_COLUMNS)]
    for o in report.outcomes:
        lines.append("\t".join(_fmt(getattr(o, c)) for c in REPORT_COLUMNS))
    lines.append("")
    for key, value in report.summary().items():
        lines.append(f"# {key}\t{_fmt(value)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_report(path) -> MetricsReport:
    outcomes = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report header {header}")
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            row = dict(zip(header, line.split("\t")))
            outcomes.append(
                DetectionOutcome(
                    case_id=row["case_id"],
                    predicted_positive=row["predicted_positive"] == "1",
                    tumor_present=row["tumor_present"] == "1",
                    overlap=row["overlap"] == "1",
                    dice=None if row["dice"] == "NA" else float(row["dice"]),
                    category=row["category"],
                )
            )
    return aggregate(outcomes)
