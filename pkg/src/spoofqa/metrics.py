"""Detection metrics.

Score convention: ``p_fake`` in [0, 1], fake (spoof) is the positive class.
At threshold ``t`` a trial is called fake iff ``p_fake >= t``::

    FAR(t) = #{real: p >= t} / n_real   (false alarm)
    FRR(t) = #{fake: p <  t} / n_fake   (miss)

Zero-shot counts follow the five-way taxonomy where the *real* class is the
positive one (TP = real called real). Fail trials enter the accuracy and
recall denominators but carry no score.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .corpus import Key


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    fail: int = 0
    total_real: int | None = None
    total_fake: int | None = None

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn, self.fail) < 0:
            raise ValueError("confusion counts must be nonnegative")
        # with no Fails the class totals follow from the decided counts
        if self.total_real is None and self.total_fake is None and self.fail == 0:
            object.__setattr__(self, "total_real", self.tp + self.fn)
            object.__setattr__(self, "total_fake", self.tn + self.fp)
        if self.total_real is None or self.total_fake is None:
            raise ValueError("total_real and total_fake are required when fail > 0")
        if self.tp + self.fn > self.total_real or self.tn + self.fp > self.total_fake:
            raise ValueError("counts exceed class totals")
        if self.total_real + self.total_fake != self.total:
            raise ValueError("total_real + total_fake must equal total trials")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn + self.fail

    def scaled(self, m: int) -> "ConfusionCounts":
        return ConfusionCounts(self.tp * m, self.tn * m, self.fp * m, self.fn * m,
                               self.fail * m, self.total_real * m, self.total_fake * m)


@dataclass(frozen=True)
class Eq2Metrics:
    accuracy: float
    precision: float
    mrecall: float
    mf1: float
    degenerate: bool  # some ratio had a zero denominator and was set to 0


def eq2_metrics(c: ConfusionCounts) -> Eq2Metrics:
    """Accuracy, precision, modified recall and modified F1 over all trials."""
    if c.total == 0:
        raise ValueError("no trials")
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp)
    mrecall = ratio(c.tp, c.total_real)
    mf1 = ratio(2 * precision * mrecall, precision + mrecall)
    return Eq2Metrics((c.tp + c.tn) / c.total, precision, mrecall, mf1, degenerate)


# ---------------------------------------------------------------------------
# score-based metrics


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray  # p_fake per trial
    is_fake: np.ndarray  # bool per trial

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, Key | bool]]) -> "ScoreSet":
        pairs = list(pairs)
        s = np.array([p for p, _ in pairs], dtype=np.float64)
        y = np.array([k is Key.SPOOF if isinstance(k, Key) else bool(k) for _, k in pairs],
                     dtype=bool)
        return cls(s, y)

    @classmethod
    def from_arrays(cls, fake_scores, real_scores) -> "ScoreSet":
        f = np.asarray(fake_scores, dtype=np.float64).ravel()
        r = np.asarray(real_scores, dtype=np.float64).ravel()
        return cls(np.concatenate([f, r]),
                   np.concatenate([np.ones(f.size, bool), np.zeros(r.size, bool)]))

    @property
    def fake(self) -> np.ndarray:
        return self.scores[self.is_fake]

    @property
    def real(self) -> np.ndarray:
        return self.scores[~self.is_fake]

    def __len__(self) -> int:
        return self.scores.size


def _need_both(s: ScoreSet) -> None:
    if not s.is_fake.any() or s.is_fake.all():
        raise ValueError("score set needs at least one real and one fake trial")


def operating_points(s: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) at every distinct score plus +inf, ascending."""
    _need_both(s)
    fake = np.sort(s.fake)
    real = np.sort(s.real)
    thr = np.unique(s.scores)
    far = (real.size - np.searchsorted(real, thr, side="left")) / real.size
    frr = np.searchsorted(fake, thr, side="left") / fake.size
    return (np.append(thr, np.inf), np.append(far, 0.0), np.append(frr, 1.0))


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float


def eer(s: ScoreSet) -> EERResult:
    """Equal error rate, linearly interpolated between adjacent operating points."""
    thr, far, frr = operating_points(s)
    d = far - frr  # starts at 1, ends at -1, non-increasing
    i = int(np.argmax(d <= 0))
    if d[i] == 0 or i == 0:
        return EERResult(float(far[i]), float(thr[i]))
    w = d[i - 1] / (d[i - 1] - d[i])
    rate = far[i - 1] + w * (far[i] - far[i - 1])
    t = thr[i - 1] if np.isinf(thr[i]) else thr[i - 1] + w * (thr[i] - thr[i - 1])
    return EERResult(float(rate), float(t))


def auc(s: ScoreSet) -> float:
    """P(score_fake > score_real) with ties counted one half."""
    _need_both(s)
    real = np.sort(s.real)
    fake = s.fake
    below = np.searchsorted(real, fake, side="left")
    ties = np.searchsorted(real, fake, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (fake.size * real.size))


def acc_at(s: ScoreSet, threshold: float = 0.5) -> float:
    if len(s) == 0:
        raise ValueError("empty score set")
    pred_fake = s.scores >= threshold
    return float(np.mean(pred_fake == s.is_fake))


def roc_points(s: ScoreSet) -> list[tuple[float, float]]:
    """(FAR, TPR) from (0, 0) to (1, 1), thresholds descending."""
    _, far, frr = operating_points(s)
    pts = [(float(a), float(1.0 - b)) for a, b in zip(far[::-1], frr[::-1])]
    if pts[0] != (0.0, 0.0):
        pts.insert(0, (0.0, 0.0))
    return pts


def det_points(s: ScoreSet) -> list[tuple[float, float]]:
    """(FAR, FRR) pairs in the same order as ``roc_points``."""
    return [(a, 1.0 - t) for a, t in roc_points(s)]


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


@dataclass(frozen=True)
class Summary:
    eer: float
    auc: float
    acc: float
    threshold: float
    acc_threshold: float
    n_real: int
    n_fake: int

    def as_dict(self) -> dict:
        return asdict(self)


def summarize(s: ScoreSet, acc_threshold: float = 0.5) -> Summary:
    e = eer(s)
    return Summary(e.eer, auc(s), acc_at(s, acc_threshold), e.threshold, acc_threshold,
                   int((~s.is_fake).sum()), int(s.is_fake.sum()))
