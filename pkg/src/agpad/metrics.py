"""PAD evaluation metrics.

Decision rule everywhere: a sample is called PA when ``score >= threshold``.
FDR (= BPCER) is the fraction of live samples called PA; TDR (= 1 - APCER)
is the fraction of PA samples called PA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ScoreSet:
    """Paired live and PA scores."""

    def __init__(self, live_scores, pa_scores):
        self.live_scores = np.asarray(live_scores, dtype=np.float64).reshape(-1)
        self.pa_scores = np.asarray(pa_scores, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.live_scores)) and np.all(np.isfinite(self.pa_scores))):
            raise ValueError("scores must be finite")

    @classmethod
    def from_labels(cls, scores, labels) -> "ScoreSet":
        """Split by label (0 = live, 1 = PA)."""
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        return cls(scores[labels == 0], scores[labels == 1])

    def check(self) -> None:
        if self.live_scores.size == 0 or self.pa_scores.size == 0:
            raise ValueError(
                f"need both classes: {self.live_scores.size} live, {self.pa_scores.size} PA scores"
            )


@dataclass
class RocCurve:
    """Operating points sorted by strictly decreasing threshold.

    The first point uses threshold ``+inf`` and sits at (0, 0).
    """

    thresholds: np.ndarray
    fdr: np.ndarray
    tdr: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fdr.tolist(), self.tdr.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("threshold,fdr,tdr\n")
            for t, f, d in self.points():
                fh.write(f"{t!r},{f!r},{d!r}\n")


def _rate_at_or_above(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    # fraction of scores >= t, via binary search on the ascending sort
    below = np.searchsorted(sorted_scores, thresholds, side="left")
    return (sorted_scores.size - below) / sorted_scores.size


def roc(scores: ScoreSet) -> RocCurve:
    scores.check()
    live = np.sort(scores.live_scores)
    pa = np.sort(scores.pa_scores)
    distinct = np.unique(np.concatenate([live, pa]))[::-1]
    thresholds = np.concatenate([[np.inf], distinct])
    return RocCurve(thresholds, _rate_at_or_above(live, thresholds), _rate_at_or_above(pa, thresholds))


def tdr_at_fdr(scores: ScoreSet, fdr_target: float) -> tuple[float, float]:
    """Best TDR among thresholds whose FDR does not exceed ``fdr_target``.

    Returns ``(tdr, threshold)``; among thresholds reaching that TDR the
    largest (most conservative) one is returned.
    """
    if not 0.0 <= fdr_target < 1.0:
        raise ValueError(f"fdr_target must be in [0, 1), got {fdr_target}")
    curve = roc(scores)
    ok = curve.fdr <= fdr_target
    best = curve.tdr[ok].max()
    # thresholds decrease along the curve, so the first hit is the largest
    idx = np.flatnonzero(ok & (curve.tdr == best))[0]
    return float(best), float(curve.thresholds[idx])


def fdr_target_supported(n_live: int, fdr_target: float) -> bool:
    """False when the target is finer than one live sample can resolve."""
    return fdr_target == 0.0 or fdr_target * n_live >= 1.0 - 1e-9


def apcer_bpcer(scores: ScoreSet, threshold: float = 0.5) -> tuple[float, float]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    scores.check()
    apcer = float(np.mean(scores.pa_scores < threshold))
    bpcer = float(np.mean(scores.live_scores >= threshold))
    return apcer, bpcer


def format_target(fdr_target: float) -> str:
    pct = fdr_target * 100
    return f"{pct:g}%"


def summary(scores: ScoreSet, fdr_targets: Sequence[float] = (0.001, 0.002, 0.01), threshold: float = 0.5) -> str:
    """Plain-text report: TDR at each FDR target, then APCER/BPCER."""
    scores.check()
    n_live = scores.live_scores.size
    lines = [f"live samples: {n_live}", f"PA samples: {scores.pa_scores.size}"]
    for target in fdr_targets:
        label = f"TDR @ {format_target(target)} FDR"
        if not fdr_target_supported(n_live, target):
            lines.append(f"{label}: unsupported at this sample size (needs >= {math.ceil(1 / target)} live)")
            continue
        tdr, thr = tdr_at_fdr(scores, target)
        lines.append(f"{label}: {tdr * 100:.2f} (threshold {thr:.6g})")
    apcer, bpcer = apcer_bpcer(scores, threshold)
    lines.append(f"APCER @ {threshold:g}: {apcer * 100:.2f}")
    lines.append(f"BPCER @ {threshold:g}: {bpcer * 100:.2f}")
    return "\n".join(lines) + "\n"
