"""Segmentation losses, confusion counts and overlap metrics."""

import csv
import io
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, clamp, log, mul, reduce, scale, shift

BCE_CLAMP = 1e-7
THRESHOLD = 0.5


def _truth_tensor(pred: Tensor, truth) -> Tensor:
    arr = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if arr.shape != pred.dims:
        raise ShapeError(f"prediction {pred.dims} and truth {arr.shape} dims differ")
    return Tensor(arr.astype(pred.dtype, copy=False))


def dice_loss(pred: Tensor, truth) -> Tensor:
    """1 - (2 sum(x*y) + 1) / (sum(x) + sum(y) + 1) on soft predictions."""
    y = _truth_tensor(pred, truth)
    inter = reduce("sum", mul(pred, y))
    denom = shift(reduce("sum", pred) + reduce("sum", y), 1.0)
    return 1.0 - shift(scale(inter, 2.0), 1.0) / denom


def soft_dice(pred: Tensor, truth) -> float:
    return 1.0 - dice_loss(pred, truth).item()


def bce_loss(pred: Tensor, truth) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    y = _truth_tensor(pred, truth)
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = mul(y, log(p))
    neg = mul(1.0 - y, log(1.0 - p))
    return scale(reduce("mean", pos + neg), -1.0)


LOSSES = {"dice": dice_loss, "bce": bce_loss}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _arrays(pred, truth):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} dims differ")
    return p, t


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    # ties count as positive
    return np.asarray(prob) >= threshold


def confusion_counts(pred, truth, threshold: float = THRESHOLD) -> ConfusionCounts:
    p, t = _arrays(pred, truth)
    pb = binarize(p, threshold)
    tb = t.astype(bool)
    tp = int(np.count_nonzero(pb & tb))
    fp = int(np.count_nonzero(pb & ~tb))
    fn = int(np.count_nonzero(~pb & tb))
    return ConfusionCounts(tp=tp, tn=int(pb.size) - tp - fp - fn, fp=fp, fn=fn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    dsc: float
    jsc: float

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    def csv_row(self, sample_id: str) -> list:
        return [sample_id, *astuple(self)]


CSV_HEADER = ["sample_id", "accuracy", "precision", "dsc", "jsc"]


def metrics_from_counts(c: ConfusionCounts) -> MetricsReport:
    """Empty-set conventions: precision, DSC and JSC are 1 when undefined."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    dsc = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if 2 * c.tp + c.fp + c.fn else 1.0
    jsc = c.tp / (c.tp + c.fp + c.fn) if c.tp + c.fp + c.fn else 1.0
    return MetricsReport(accuracy=(c.tp + c.tn) / c.total, precision=precision, dsc=dsc, jsc=jsc)


def evaluate_pair(pred, truth, threshold: float = THRESHOLD) -> MetricsReport:
    return metrics_from_counts(confusion_counts(pred, truth, threshold))


def aggregate(reports, counts=None, pooled: bool = False) -> MetricsReport:
    """Per-slice mean of ``reports``; with ``pooled`` the metrics of summed ``counts``."""
    if pooled:
        if counts is None:
            raise ValueError("pooled aggregation needs the confusion counts")
        total = ConfusionCounts(*(sum(getattr(c, k) for c in counts) for k in ("tp", "tn", "fp", "fn")))
        return metrics_from_counts(total)
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    return MetricsReport(*(float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(MetricsReport)))


def write_report_csv(path_or_file, rows):
    """Write ``(sample_id, MetricsReport)`` pairs with the standard header."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for sid, rep in rows:
            w.writerow([sid] + [repr(v) for v in astuple(rep)])
    finally:
        if own:
            fh.close()


def report_csv_text(rows) -> str:
    buf = io.StringIO()
    write_report_csv(buf, rows)
    return buf.getvalue()


def loss_compare_experiment(samples, cfg, test_samples=None):
    """Train the same model under each loss and tabulate (loss, acc, pre, dsc).

    ``samples`` are in-memory SliceSamples; ``test_samples`` default to the
    training set. Returns rows in the order dice, bce.
    """
    from dataclasses import replace

    from .trainer import evaluate_model, train_samples

    rows = []
    for kind in ("dice", "bce"):
        run_cfg = replace(cfg, loss_kind=kind)
        model, _ = train_samples(run_cfg, samples)
        rep = evaluate_model(model, test_samples if test_samples is not None else samples, run_cfg.window)[0]
        rows.append((kind, rep.accuracy, rep.precision, rep.dsc))
    return rows


def format_loss_table(rows) -> str:
    lines = ["loss\tacc\tpre\tdsc"]
    lines += [f"{name}\t{acc:.4f}\t{pre:.4f}\t{dsc:.4f}" for name, acc, pre, dsc in rows]
    return "\n".join(lines) + "\n"
