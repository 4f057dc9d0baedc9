"""Segmentation and detection-style metrics, plus a forward-pass FPS benchmark.

Degenerate-denominator conventions: precision, recall and F1 are 0 when
their counts leave them undefined; Dice is 1 when both masks are empty.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, UndefinedMetricError
from .tensor import Tensor, no_grad

FPS_ACCEPTABLE = 30.0
FPS_SUPERIOR = 60.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class EvalConfig:
    confidence_threshold: float = 0.4
    iou_threshold: float = 0.5

    def __post_init__(self):
        for name in ("confidence_threshold", "iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")


def _flat_pair(pred, target):
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64).ravel()
    t = np.asarray(target.data if isinstance(target, Tensor) else target).ravel()
    if p.shape != t.shape:
        raise DimensionError(f"prediction has {p.size} values, target has {t.size}")
    return p, t > 0.5


def confusion(pred, target, threshold: float = 0.4) -> ConfusionCounts:
    """Binarise ``pred >= threshold`` and count against a binary target."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    p, t = _flat_pair(pred, target)
    pos = p >= threshold
    tp = int(np.count_nonzero(pos & t))
    fp = int(np.count_nonzero(pos & ~t))
    fn = int(np.count_nonzero(~pos & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


sensitivity = recall


def f1(p: float, r: float) -> float:
    s = p + r
    return 2.0 * p * r / s if s > 0 else 0.0


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def dice(pred_bin, target) -> float:
    a = np.asarray(pred_bin).ravel() > 0.5
    b = np.asarray(target).ravel() > 0.5
    if a.shape != b.shape:
        raise DimensionError(f"masks differ in size: {a.size} vs {b.size}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def iou(pred_bin, target) -> float:
    a = np.asarray(pred_bin).ravel() > 0.5
    b = np.asarray(target).ravel() > 0.5
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def _ranked_counts(pred, target):
    """Cumulative (tp, fp) at each distinct score, highest score first."""
    p, t = _flat_pair(pred, target)
    order = np.argsort(-p, kind="stable")
    ps, ts = p[order], t[order]
    tp = np.cumsum(ts)
    fp = np.cumsum(~ts)
    # last index of every run of equal scores
    last = np.flatnonzero(np.r_[ps[1:] != ps[:-1], True])
    return tp[last].astype(np.int64), fp[last].astype(np.int64), int(t.sum()), int((~t).sum())


def envelope_ap(tp, fp, n_pos) -> float:
    """All-points AP from cumulative counts ordered by decreasing threshold.

    Precision is replaced by its running maximum from the right (monotone
    envelope) and integrated against recall steps.
    """
    prec = [a / (a + b) for a, b in zip(tp, fp)]
    rec = [a / n_pos for a in tp]
    env = prec[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    prev = 0.0
    terms = []
    for r, p in zip(rec, env):
        terms.append((r - prev) * p)
        prev = r
    return math.fsum(terms)


def average_precision(pred, target) -> float:
    """Area under the precision-recall curve, sweeping every distinct score."""
    tp, fp, n_pos, _ = _ranked_counts(pred, target)
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive pixel")
    return envelope_ap(tp.tolist(), fp.tolist(), n_pos)


def mean_ap(ap_values) -> float:
    values = list(ap_values)
    if not values:
        raise ContractError("mean_ap needs at least one AP value")
    return math.fsum(values) / len(values)


def auc(pred, target) -> float:
    """Trapezoidal ROC area over all distinct thresholds (ties grouped)."""
    tp, fp, n_pos, n_neg = _ranked_counts(pred, target)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative pixels")
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def fps_benchmark(net, input_shape, warmup: int = 2, iters: int = 10, seed: int = 0) -> float:
    """Forward passes per second in eval mode on a random input."""
    if iters < 1:
        raise ContractError("iters must be >= 1")
    x = Tensor(np.random.default_rng(seed).random(input_shape, dtype=np.float32))
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            for _ in range(warmup):
                net(x)
            start = time.perf_counter()
            for _ in range(iters):
                net(x)
            elapsed = time.perf_counter() - start
    finally:
        net.train(was_training)
    return iters / elapsed if elapsed > 0 else float("inf")


def fps_verdicts(fps: float) -> list[str]:
    return [
        f"FPS >= {FPS_ACCEPTABLE:g} (meets requirement): {'yes' if fps >= FPS_ACCEPTABLE else 'no'}",
        f"FPS >= {FPS_SUPERIOR:g} (superior): {'yes' if fps >= FPS_SUPERIOR else 'no'}",
    ]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    accuracy_std: float
    sensitivity: float
    auc: float
    dice: float
    precision: float
    recall: float
    f1: float
    ap: float
    map: float
    iou_pass_rate: float
    fps: float = 0.0
    n_classes: int = 1
    n_images: int = 0

    TABLE_COLUMNS = ("AC", "SE", "AUC", "DS", "P", "R", "F1", "AP", "mAP", "IoU>=t")

    def table_values(self) -> list[str]:
        return [
            f"{self.accuracy:.4f} ± {self.accuracy_std:.4f}",
            f"{self.sensitivity:.4f}", f"{self.auc:.4f}", f"{self.dice:.4f}",
            f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}",
            f"{self.ap:.4f}", f"{self.map:.4f}", f"{self.iou_pass_rate:.4f}",
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(self)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(self).values()])
        return buf.getvalue()


def format_table(rows: list[tuple[str, MetricReport]], columns=None) -> str:
    """Aligned plain-text table, one row per (label, report)."""
    columns = columns or MetricReport.TABLE_COLUMNS
    idx = [MetricReport.TABLE_COLUMNS.index(c) for c in columns]
    body = [[label] + [r.table_values()[i] for i in idx] for label, r in rows]
    header = ["Method"] + list(columns)
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def evaluate_predictions(probs: np.ndarray, masks: np.ndarray, cfg: EvalConfig | None = None) -> MetricReport:
    """Metric battery over a stack of probability maps.

    AC (mean ± std) and DS are averaged per image; the IoU threshold gives a
    per-image pass flag whose mean is reported. P, R (= SE), F1 come from
    confusion counts pooled over all pixels; AP and AUC rank all pixels
    together. With a single foreground class mAP equals AP.
    """
    cfg = cfg or EvalConfig()
    thr = cfg.confidence_threshold
    if probs.shape != masks.shape:
        raise DimensionError(f"predictions {probs.shape} and masks {masks.shape} differ")
    total = ConfusionCounts(0, 0, 0, 0)
    accs, dices, passes = [], [], []
    for p, m in zip(probs, masks):
        c = confusion(p, m, thr)
        total = total + c
        accs.append(accuracy(c))
        pb = p >= thr
        dices.append(dice(pb, m))
        passes.append(iou(pb, m) >= cfg.iou_threshold)
    P, R = precision(total), recall(total)
    try:
        ap = average_precision(probs, masks)
    except UndefinedMetricError:
        ap = 0.0
    try:
        roc = auc(probs, masks)
    except UndefinedMetricError:
        roc = 0.5
    return MetricReport(
        accuracy=float(np.mean(accs)), accuracy_std=float(np.std(accs)),
        sensitivity=R, auc=roc, dice=float(np.mean(dices)),
        precision=P, recall=R, f1=f1(P, R), ap=ap, map=mean_ap([ap]),
        iou_pass_rate=float(np.mean(passes)), n_images=len(accs),
    )
