"""Segmentation metrics from confusion counts, plus Hausdorff distance.

Undefined values (zero denominators, empty masks) are ``None`` rather than
a fill value; means are taken over the defined entries only.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from transnorm.errors import ContractError, DimensionError

COLUMNS = ("class", "acc", "se", "sp", "f1", "miou", "dsc", "hd")
METRICS = COLUMNS[1:]
RATIOS = METRICS[:-1]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred.astype(bool), truth.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    """Pixel tallies of a binary prediction against a binary truth mask."""
    p, t = _binary_pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def ratios(c: ConfusionCounts) -> dict[str, float | None]:
    """acc, se, sp, f1, miou and dsc; ``None`` where the denominator is zero."""
    return {
        "acc": _ratio(c.tp + c.tn, c.total),
        "se": _ratio(c.tp, c.tp + c.fn),
        "sp": _ratio(c.tn, c.tn + c.fp),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "miou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the image count as background, so foreground on the
    image border is always boundary.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point of ``dst``."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def hausdorff(pred, truth, percentile: float | None = None) -> float | None:
    """Symmetric Hausdorff distance in pixels between mask boundaries.

    With ``percentile`` (e.g. 95) each directed max is replaced by that
    percentile of the directed distances, and the larger one is returned.
    ``None`` if either mask is empty.
    """
    p, t = _binary_pair(pred, truth)
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bt = np.argwhere(boundary(t)).astype(np.float64)
    if len(bp) == 0 or len(bt) == 0:
        return None
    d_pt = _directed(bp, bt)
    d_tp = _directed(bt, bp)
    if percentile is None:
        return float(max(d_pt.max(), d_tp.max()))
    return float(max(np.percentile(d_pt, percentile), np.percentile(d_tp, percentile)))


@dataclass
class MetricReport:
    """Per-class metric rows plus a mean row over foreground classes.

    ``counts[m]`` is how many classes contributed a defined value to
    ``mean[m]``.
    """

    per_class: dict[int, dict[str, float | None]]
    mean: dict[str, float | None]
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = [{"class": str(k), **v} for k, v in sorted(self.per_class.items())]
        out.append({"class": "mean", **self.mean})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows():
            writer.writerow([row["class"]] + ["" if row[m] is None else repr(row[m]) for m in METRICS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": list(COLUMNS), "rows": self.rows(), "counts": self.counts}, indent=2)


def parse_csv_report(text: str) -> list[dict]:
    """Inverse of :meth:`MetricReport.to_csv` (empty cells become ``None``)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise ContractError(f"report columns {header} differ from {list(COLUMNS)}")
    return [
        {"class": r[0], **{m: (float(v) if v else None) for m, v in zip(METRICS, r[1:])}}
        for r in reader
    ]


def _mean_over_defined(per_class: dict, classes) -> tuple[dict, dict]:
    mean, counts = {}, {}
    for m in METRICS:
        vals = [per_class[k][m] for k in classes if per_class[k][m] is not None]
        counts[m] = len(vals)
        mean[m] = float(np.mean(vals)) if vals else None
    return mean, counts


def _check_ids(mask: np.ndarray, num_classes: int, what: str) -> None:
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ContractError(f"{what} ids must lie in [0, {num_classes}), got [{mask.min()}, {mask.max()}]")


def multiclass_report(pred, truth, num_classes: int, percentile: float | None = None) -> MetricReport:
    """One-vs-rest metrics per class for a single (or stacked) class-id mask.

    A class absent from both masks is undefined throughout. The mean row
    covers classes 1.. (background excluded).
    """
    return dataset_report([pred], [truth], num_classes, percentile)


def dataset_report(preds, truths, num_classes: int, percentile: float | None = None) -> MetricReport:
    """Metrics over a collection of images.

    Ratio metrics use confusion counts pooled over all images; HD is the mean
    of the per-image distances where defined.
    """
    counts = {k: ConfusionCounts(0, 0, 0, 0) for k in range(num_classes)}
    hds: dict[int, list[float]] = {k: [] for k in range(num_classes)}
    for pred, truth in zip(preds, truths):
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        _check_ids(pred, num_classes, "predicted class")
        _check_ids(truth, num_classes, "true class")
        for k in range(num_classes):
            counts[k] = counts[k] + confusion(pred == k, truth == k)
            hd = hausdorff(pred == k, truth == k, percentile)
            if hd is not None:
                hds[k].append(hd)
    per_class = {}
    for k, c in counts.items():
        if c.tp + c.fp + c.fn == 0:
            per_class[k] = dict.fromkeys(METRICS)
            continue
        row = ratios(c)
        row["hd"] = float(np.mean(hds[k])) if hds[k] else None
        per_class[k] = row
    mean, defined = _mean_over_defined(per_class, range(1, num_classes))
    return MetricReport(per_class, mean, defined)
