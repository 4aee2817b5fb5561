"""APCER / BPCER / ACER / AUC and the cross-task aggregate.

Scores follow the convention "higher means more likely living". A sample is
accepted as living when its score is at or above the threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

Z_95 = 1.96


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    score: float
    living: bool


def _split(scores, living):
    if living is None:
        scores, living = _unpack(scores)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    living = np.asarray(living, dtype=bool).ravel()
    if scores.shape != living.shape:
        raise MetricError(f"{scores.size} scores but {living.size} labels")
    live, spoof = scores[living], scores[~living]
    if live.size == 0 or spoof.size == 0:
        raise MetricError("need at least one living and one spoofing sample")
    return live, spoof


def _unpack(scored: Iterable[ScoredSample]):
    scored = list(scored)
    return [s.score for s in scored], [s.living for s in scored]


def classify(scores, living=None, threshold: float | None = None) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) at ``threshold``."""
    if threshold is None:
        raise MetricError("classify needs a threshold")
    live, spoof = _split(scores, living)
    apcer = float(np.mean(spoof >= threshold))
    bpcer = float(np.mean(live < threshold))
    return apcer, bpcer, (apcer + bpcer) / 2


def auc(scores, living=None) -> float:
    """P(random living score > random spoofing score), ties counted half."""
    live, spoof = _split(scores, living)
    ranks = rankdata(np.concatenate([live, spoof]))
    u = ranks[: live.size].sum() - live.size * (live.size + 1) / 2
    return float(u / (live.size * spoof.size))


def select_threshold(scores, living=None) -> float:
    """Threshold minimising ACER on a labelled calibration set.

    Candidates sit midway between adjacent distinct scores, plus one below the
    minimum and one above the maximum. Among equally good candidates the
    middle one is taken.
    """
    live, spoof = _split(scores, living)
    values = np.unique(np.concatenate([live, spoof]))
    spread = max(values[-1] - values[0], 1.0)
    candidates = np.concatenate([[values[0] - spread], (values[1:] + values[:-1]) / 2, [values[-1] + spread]])
    apcer = (spoof[None, :] >= candidates[:, None]).mean(axis=1)
    bpcer = (live[None, :] < candidates[:, None]).mean(axis=1)
    acer = (apcer + bpcer) / 2
    best = np.flatnonzero(acer == acer.min())
    return float(candidates[best[len(best) // 2]])


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 1.96 * sample std / sqrt(T); the interval is 0 for T = 1."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise MetricError("cannot aggregate an empty list")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    sigma = float(arr.std(ddof=1))
    return mean, Z_95 * sigma / math.sqrt(arr.size)


def format_interval(mean: float, interval: float, percent: bool = True) -> str:
    scale = 100.0 if percent else 1.0
    return f"{mean * scale:.2f}±{interval * scale:.2f}"


@dataclass(frozen=True)
class TaskMetrics:
    apcer: float
    bpcer: float
    acer: float
    auc: float
    threshold: float = float("nan")
    K: int = -1


@dataclass
class EvalReport:
    per_task: list
    acer_mean: float
    acer_interval: float
    T: int
    label: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_tasks(cls, per_task: Sequence[TaskMetrics], label: str = "", **meta) -> "EvalReport":
        mean, interval = aggregate([m.acer for m in per_task])
        return cls(list(per_task), mean, interval, len(per_task), label, dict(meta))

    @property
    def auc_mean(self) -> float:
        return float(np.mean([m.auc for m in self.per_task]))

    def summary(self) -> str:
        return format_interval(self.acer_mean, self.acer_interval)

    def to_text(self) -> str:
        """Tab-separated per-task rows followed by the aggregate row (percent)."""
        lines = []
        if self.label:
            lines.append(f"# label: {self.label}")
        for k in sorted(self.meta):
            lines.append(f"# {k}={self.meta[k]}")
        lines.append("task\tK\tAPCER\tBPCER\tACER\tAUC\tthreshold")
        for i, m in enumerate(self.per_task):
            lines.append(
                f"{i}\t{m.K}\t{100 * m.apcer:.4f}\t{100 * m.bpcer:.4f}\t{100 * m.acer:.4f}\t{100 * m.auc:.4f}\t{m.threshold:.10g}"
            )
        lines.append(f"aggregate\tT={self.T}\tACER={self.summary()}\tAUC={100 * self.auc_mean:.2f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        per_task, label, meta = [], "", {}
        for line in text.splitlines():
            if line.startswith("# label: "):
                label = line[len("# label: "):]
                continue
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
                continue
            cells = line.split("\t")
            if not cells or cells[0] in ("task", "aggregate", ""):
                continue
            _, K, ap, bp, ac, au, th = cells
            per_task.append(TaskMetrics(float(ap) / 100, float(bp) / 100, float(ac) / 100, float(au) / 100, float(th), int(K)))
        return cls.from_tasks(per_task, label, **meta)
