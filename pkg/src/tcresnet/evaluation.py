"""False-alarm / false-reject ROC curves, micro and vertical averaging, AUC.

Curves put the false alarm rate (FAR) on x and the false reject rate (FRR)
on y, so a perfect detector sits at the origin and a smaller area is better.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import RocError

DEFAULT_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class RocCurve:
    far: np.ndarray
    frr: np.ndarray
    thresholds: np.ndarray | None = None

    def __post_init__(self):
        self.far = np.asarray(self.far, dtype=np.float64)
        self.frr = np.asarray(self.frr, dtype=np.float64)
        if self.far.shape != self.frr.shape or self.far.ndim != 1:
            raise RocError("far and frr must be 1-D arrays of equal length")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.far.tolist(), self.frr.tolist()))

    @property
    def auc(self) -> float:
        return auc(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["far", "frr"])
        for a, b in self.points:
            w.writerow([f"{a:.8g}", f"{b:.8g}"])
        return buf.getvalue()


def roc_micro(scores, labels, exclude_classes=(), check_normalized: bool = True) -> RocCurve:
    """Pool every (sample, class) pair into one-vs-rest decisions and sweep a shared threshold.

    The sweep starts above the highest score (nothing accepted) and steps
    down through each distinct score, so it depends only on score order.
    Equal scores are crossed together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(labels) != len(scores):
        raise RocError("scores must be (samples, classes) with one label per sample")
    if check_normalized and not np.allclose(scores.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise RocError("score rows must sum to 1 within 1e-6")
    positive = np.zeros(scores.shape, dtype=bool)
    positive[np.arange(len(labels)), labels] = True
    keep = np.setdiff1d(np.arange(scores.shape[1]), np.asarray(exclude_classes, dtype=int))
    s = scores[:, keep].ravel()
    pos = positive[:, keep].ravel()
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0:
        raise RocError("degenerate ROC: no positive decisions")
    if n_neg == 0:
        raise RocError("degenerate ROC: no negative decisions")

    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    far = np.r_[0.0, fp[ends] / n_neg]
    frr = np.r_[1.0, 1.0 - tp[ends] / n_pos]
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(far, frr, thresholds)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under FRR(FAR) on [0, 1], flat-extended at both ends."""
    far, frr = curve.far, curve.frr
    if len(far) < 2:
        raise RocError("AUC needs at least two points")
    x = np.r_[0.0, far, 1.0]
    y = np.r_[frr[0], frr, frr[-1]]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def _collapse(curve: RocCurve) -> tuple[np.ndarray, np.ndarray]:
    # at repeated FAR values keep the lowest FRR (the best operating point)
    order = np.lexsort((curve.frr, curve.far))
    far, frr = curve.far[order], curve.frr[order]
    first = np.r_[True, far[1:] != far[:-1]]
    return far[first], frr[first]


def vertical_average(curves, grid=None) -> RocCurve:
    """Mean FRR across curves at each grid FAR, by linear interpolation."""
    curves = list(curves)
    if not curves:
        raise RocError("vertical_average needs at least one curve")
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    stacked = [np.interp(grid, *_collapse(c)) for c in curves]
    return RocCurve(grid.copy(), np.mean(stacked, axis=0))


def read_scores_csv(path):
    """Read ``label,p0,...,p{C-1}`` rows into (scores, labels)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise RocError(f"{path}: expected a header starting with 'label'")
        labels, scores = [], []
        for row in reader:
            labels.append(int(row[0]))
            scores.append([float(v) for v in row[1:]])
    return np.array(scores), np.array(labels, dtype=int)


def write_scores_csv(scores, labels, out) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8", newline="") as fh:
            write_scores_csv(scores, labels, fh)
        return
    scores = np.asarray(scores)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label", *(f"p{i}" for i in range(scores.shape[1]))])
    for y, row in zip(labels, scores):
        w.writerow([int(y), *(f"{v:.9g}" for v in row)])
