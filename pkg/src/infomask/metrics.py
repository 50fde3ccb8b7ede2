"""Localization and classification scoring, with KDE summaries.

Per-image localization is scored against a ground-truth box:

* iop: fraction of the predicted mask inside the box (undefined for an
  empty prediction),
* fpr: fraction of the outside-box area the prediction covers (undefined
  when the box fills the image),
* fnr: fraction of the box the prediction misses.

Undefined scores are returned as None, excluded from aggregates, and
counted. Classification adds accuracy at argmax and the rank-based AUC.
Report objects bundle per-image scores, mean and standard error
aggregates, and kernel density curves, and serialize to CSV and a plain
text summary table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LocalizationScores",
    "LocalizationReport",
    "binarize",
    "box_mask",
    "iop",
    "fpr_fnr",
    "score_mask",
    "accuracy",
    "auc",
    "classification_scores",
    "kde",
    "build_report",
    "summary_table",
]

METRIC_NAMES = ("iop", "fpr", "fnr")

KDE_GRID_POINTS = 256
KDE_FALLBACK_BANDWIDTH = 1e-3


def binarize(mask: np.ndarray, threshold: float) -> np.ndarray:
    """Strictly-above thresholding of a soft map."""
    return np.asarray(mask) > threshold


def box_mask(shape: tuple[int, int], box: tuple[int, int, int, int]) -> np.ndarray:
    h, w = shape
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise ValueError(f"box {box} outside {w}x{h} image")
    out = np.zeros(shape, dtype=bool)
    out[y0 : y1 + 1, x0 : x1 + 1] = True
    return out


def iop(pred: np.ndarray, box: tuple[int, int, int, int]) -> float | None:
    """Inside-box fraction of the prediction; None for an empty prediction."""
    pred = np.asarray(pred, dtype=bool)
    total = int(pred.sum())
    if total == 0:
        return None
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 < pred.shape[1] and 0 <= y0 <= y1 < pred.shape[0]):
        raise ValueError(f"box {box} outside {pred.shape[1]}x{pred.shape[0]} image")
    inter = int(pred[y0 : y1 + 1, x0 : x1 + 1].sum())
    return inter / total


def fpr_fnr(pred: np.ndarray, box) -> tuple[float | None, float]:
    """False positive rate over the box complement, miss rate over the box.

    fpr is None when the box covers the whole image. An empty prediction
    gives (0, 1).
    """
    pred = np.asarray(pred, dtype=bool)
    h, w = pred.shape
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise ValueError(f"box {box} outside {w}x{h} image")
    box_area = (y1 - y0 + 1) * (x1 - x0 + 1)
    inter = int(pred[y0 : y1 + 1, x0 : x1 + 1].sum())
    outside = h * w - box_area
    fpr = (int(pred.sum()) - inter) / outside if outside else None
    fnr = (box_area - inter) / box_area
    return fpr, fnr


@dataclass
class LocalizationScores:
    """Scores for one image; None marks an undefined value."""

    iop: float | None
    fpr: float | None
    fnr: float

    def get(self, name: str):
        return getattr(self, name)


def score_mask(pred: np.ndarray, box) -> LocalizationScores:
    i = iop(pred, box)
    p, n = fpr_fnr(pred, box)
    return LocalizationScores(iop=i, fpr=p, fnr=n)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or probs.shape[0] == 0:
        raise ValueError(f"accuracy: probs {probs.shape} vs labels {labels.shape}")
    return float((probs.argmax(axis=1) == labels).mean())


def auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-based AUC with midranks on ties; None when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_scores(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float | None]:
    """(accuracy at argmax, AUC of the positive-class probability)."""
    return accuracy(probs, labels), auc(np.asarray(probs)[:, 1], labels)


def kde(values, bandwidth: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian kernel density on a fixed grid spanning the data plus 3h.

    The automatic bandwidth is Silverman's rule on the smaller of the
    standard deviation and IQR/1.34; degenerate spreads fall back to a
    small fixed width so the curve stays a proper density.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError(f"kde: need at least 2 values, got {v.size}")
    if bandwidth is None:
        sd = v.std(ddof=1)
        q75, q25 = np.percentile(v, [75, 25])
        spread = min(sd, (q75 - q25) / 1.34) or sd
        bandwidth = 0.9 * spread * v.size ** (-0.2)
        # std of identical values is float noise, not zero; compare to scale
        if not bandwidth > 1e-12 * max(1.0, np.abs(v).max()):
            bandwidth = KDE_FALLBACK_BANDWIDTH
    elif not bandwidth > 0:
        raise ValueError(f"kde: bandwidth must be positive, got {bandwidth}")
    grid = np.linspace(v.min() - 3 * bandwidth, v.max() + 3 * bandwidth, KDE_GRID_POINTS)
    u = (grid[:, None] - v[None, :]) / bandwidth
    density = np.exp(-0.5 * u * u).mean(axis=1) / (bandwidth * np.sqrt(2 * np.pi))
    return grid, density


@dataclass
class LocalizationReport:
    """Everything evaluate produces for one method on one sample set."""

    scores: list[LocalizationScores]
    aggregates: dict  # metric -> (mean, sem, n_valid)
    empty_pred_count: int
    accuracy: float
    auc: float | None
    kde_curves: dict = field(default_factory=dict)  # metric -> (grid, density)

    def to_per_image_csv(self) -> str:
        lines = ["index,iop,fpr,fnr"]
        for i, s in enumerate(self.scores):
            fields = [str(i)] + [_fmt(s.get(m)) for m in METRIC_NAMES]
            lines.append(",".join(fields))
        return "\n".join(lines) + "\n"

    def to_kde_csv(self) -> str:
        lines = ["metric,value,density"]
        for metric in METRIC_NAMES:
            if metric not in self.kde_curves:
                continue
            grid, density = self.kde_curves[metric]
            for x, d in zip(grid, density):
                lines.append(f"{metric},{float(x)!r},{float(d)!r}")
        return "\n".join(lines) + "\n"

    def summary_row(self, label: str) -> str:
        cells = [label]
        for metric in METRIC_NAMES:
            mean, sem, n_valid = self.aggregates[metric]
            cells.append(f"{mean:.4f} ± {sem:.1e}" if n_valid else "n/a")
        cells.append(f"{self.accuracy:.4f}")
        cells.append("n/a" if self.auc is None else f"{self.auc:.4f}")
        return "\t".join(cells)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def aggregate_scores(scores: list[LocalizationScores]) -> tuple[dict, int]:
    """Per-metric (mean, sem, n_valid) over defined values, plus empty count."""
    aggregates = {}
    for metric in METRIC_NAMES:
        valid = np.array([s.get(metric) for s in scores if s.get(metric) is not None])
        if valid.size == 0:
            aggregates[metric] = (float("nan"), float("nan"), 0)
            continue
        sem = valid.std(ddof=1) / np.sqrt(valid.size) if valid.size > 1 else 0.0
        aggregates[metric] = (float(valid.mean()), float(sem), int(valid.size))
    empties = sum(1 for s in scores if s.iop is None)
    return aggregates, empties


def build_report(
    scores: list[LocalizationScores],
    probs: np.ndarray,
    labels: np.ndarray,
    kde_bandwidth: float | None = None,
) -> LocalizationReport:
    acc, roc = classification_scores(probs, labels)
    aggregates, empties = aggregate_scores(scores)
    curves = {}
    for metric in METRIC_NAMES:
        valid = np.array([s.get(metric) for s in scores if s.get(metric) is not None])
        if valid.size >= 2:
            curves[metric] = kde(valid, kde_bandwidth)
    return LocalizationReport(
        scores=scores,
        aggregates=aggregates,
        empty_pred_count=empties,
        accuracy=acc,
        auc=roc,
        kde_curves=curves,
    )


def summary_table(rows: list[tuple[str, LocalizationReport]]) -> str:
    header = "\t".join(["method", "IoP", "FPR", "FNR", "Acc.", "AUC"])
    lines = [header]
    for label, report in rows:
        lines.append(report.summary_row(label))
    return "\n".join(lines) + "\n"
