"""ACC / AUC / EER / AP / HTER for binary recapture scores.

Conventions: label 1 = recaptured = positive; a score is the probability of
being recaptured and a sample is called recaptured when ``score >= threshold``.
FAR = genuine samples called recaptured, FRR = recaptured samples called
genuine. All metrics are returned as percentages.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, UndefinedMetricError

COLUMNS = ("ACC(%)", "AUC(%)", "EER(%)", "AP(%)", "HTER(%)")
DEFAULT_THRESHOLD = 0.5


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise InputError("empty score list")
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 (genuine) or 1 (recaptured)")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    return s, y.astype(np.int64)


def _require_both(y: np.ndarray, metric: str) -> tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"{metric} needs both classes present")
    return n_pos, n_neg


def far_frr(scores, labels, threshold: float) -> tuple[float, float]:
    """(FAR, FRR) as fractions at a fixed threshold."""
    s, y = _validate(scores, labels)
    _require_both(y, "FAR/FRR")
    accept = s >= threshold
    far = float(np.mean(accept[y == 0]))
    frr = float(np.mean(~accept[y == 1]))
    return far, frr


def accuracy(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    s, y = _validate(scores, labels)
    return 100.0 * float(np.mean((s >= threshold).astype(np.int64) == y))


def mann_whitney_u2(scores, labels) -> tuple[int, int, int]:
    """Twice the Mann-Whitney U (ties count 1) and the class sizes, as integers."""
    s, y = _validate(scores, labels)
    n_pos, n_neg = _require_both(y, "AUC")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    yy = y[order]
    # For each distinct score value: negatives strictly below and tied.
    u2 = 0
    neg_below = 0
    i = 0
    n = ss.size
    while i < n:
        j = i
        while j < n and ss[j] == ss[i]:
            j += 1
        grp = yy[i:j]
        pos_here = int(grp.sum())
        neg_here = int(grp.size - pos_here)
        u2 += pos_here * (2 * neg_below + neg_here)
        neg_below += neg_here
        i = j
    return u2, n_pos, n_neg


def auc(scores, labels) -> float:
    """Area under ROC: P(pos > neg) + P(tie) / 2, in percent."""
    u2, n_pos, n_neg = mann_whitney_u2(scores, labels)
    return float(Fraction(100 * u2, 2 * n_pos * n_neg))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Candidate thresholds (ascending) with false-accept / false-reject counts.

    Candidates are -inf, the midpoints between consecutive distinct scores,
    and +inf.
    """
    distinct = np.unique(s)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    thr = np.concatenate([[-np.inf], mids, [np.inf]])
    neg = np.sort(s[y == 0])
    pos = np.sort(s[y == 1])
    # score >= t  <=>  not (score < t)
    fa = neg.size - np.searchsorted(neg, thr, side="left")
    fr = np.searchsorted(pos, thr, side="left")
    return thr, fa, fr, neg.size, pos.size


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate (percent) and the threshold where it is attained.

    |FAR - FRR| is compared on integer counts so ties resolve to the lowest
    threshold regardless of rounding.
    """
    s, y = _validate(scores, labels)
    _require_both(y, "EER")
    thr, fa, fr, n_neg, n_pos = _sweep(s, y)
    idx = int(np.argmin(np.abs(fa * n_pos - fr * n_neg)))
    value = Fraction(int(fa[idx]) * n_pos + int(fr[idx]) * n_neg, 2 * n_neg * n_pos)
    return float(100 * value), float(thr[idx])


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, FAR, 1 - FRR) for every candidate threshold."""
    s, y = _validate(scores, labels)
    _require_both(y, "ROC")
    thr, fa, fr, n_neg, n_pos = _sweep(s, y)
    return [(float(t), a / n_neg, 1.0 - r / n_pos) for t, a, r in zip(thr, fa.tolist(), fr.tolist())]


def average_precision(scores, labels) -> float:
    """Sum over the descending ranking of (recall step) x precision.

    Equal scores keep their input order (stable sort).
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    return 100.0 * float(np.sum((tp / ranks)[hits == 1]) / n_pos)


def hter(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    far, frr = far_frr(scores, labels, threshold)
    return 100.0 * (far + frr) / 2.0


def hter_at_dev_eer(dev_scores, dev_labels, scores, labels) -> tuple[float, float]:
    """HTER on ``scores`` at the EER threshold found on a development set."""
    _, t = eer(dev_scores, dev_labels)
    return hter(scores, labels, t), t


@dataclass
class EvalReport:
    scenario: str
    scores: list[float]
    labels: list[int]
    acc: float
    auc: float
    eer: float
    ap: float
    hter: float
    threshold: float  # EER threshold
    hter_threshold: float = DEFAULT_THRESHOLD
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scenario: str, scores: Sequence[float], labels: Sequence[int],
                    threshold: float = DEFAULT_THRESHOLD, meta: Optional[dict] = None) -> "EvalReport":
        s, y = _validate(scores, labels)
        e, t = eer(s, y)
        return cls(
            scenario=scenario,
            scores=[float(v) for v in s],
            labels=[int(v) for v in y],
            acc=accuracy(s, y, threshold),
            auc=auc(s, y),
            eer=e,
            ap=average_precision(s, y),
            hter=hter(s, y, threshold),
            threshold=t,
            hter_threshold=threshold,
            meta=dict(meta or {}),
        )

    def metrics(self) -> tuple[float, float, float, float, float]:
        return (self.acc, self.auc, self.eer, self.ap, self.hter)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("threshold", "hter_threshold"):
            if not math.isfinite(d[key]):
                d[key] = str(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        for key in ("threshold", "hter_threshold"):
            d[key] = float(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def recompute(self) -> "EvalReport":
        return EvalReport.from_scores(self.scenario, self.scores, self.labels, self.hter_threshold, self.meta)

    def csv_row(self, name: Optional[str] = None) -> list[str]:
        return [name or self.scenario] + [f"{v:.2f}" for v in self.metrics()]


def reports_to_csv(rows: Sequence[tuple[str, EvalReport]], first_column: str = "Model") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((first_column,) + COLUMNS)
    for name, rep in rows:
        w.writerow(rep.csv_row(name))
    return buf.getvalue()
