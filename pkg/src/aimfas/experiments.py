"""Trend and ablation experiments on the synthetic benchmark.

One *suite* trains, per seed, the fusion-trained model, the w/o-AIU model, one
w/o-FT model per evaluated shot count and the conventionally trained
baseline, then evaluates all of them on the same test tasks. The trend and
ablation verdicts are computed from the suite and always carry the per-seed
numbers so that a failing seed is visible even when the mean passes.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import pipeline
from .config import RunConfig, desk_config


@dataclass
class Suite:
    seeds: list
    shots: tuple
    # reports[arm][seed][K] -> EvalReport
    reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    aiu: dict = field(default_factory=dict)  # (arm, seed) -> (alpha, gamma)

    def acer(self, arm: str, K: int, seed=None) -> float:
        if seed is not None:
            return self.reports[arm][seed][K].acer_mean
        return float(np.mean([self.reports[arm][s][K].acer_mean for s in self.seeds]))

    def table(self) -> str:
        """Mean ACER (percent) of every arm and shot count, per seed and averaged."""
        arms = sorted(self.reports)
        lines = ["arm\tseed\t" + "\t".join(f"K={K}" for K in self.shots)]
        for arm in arms:
            for s in self.seeds + ["mean"]:
                cells = []
                for K in self.shots:
                    try:
                        v = self.acer(arm, K, None if s == "mean" else s)
                        cells.append(f"{100 * v:.2f}")
                    except KeyError:
                        cells.append("-")
                lines.append(f"{arm}\t{s}\t" + "\t".join(cells))
        return "\n".join(lines)


def _cfg(base: Mapping, seed: int, **sections) -> RunConfig:
    d = copy.deepcopy(dict(base))
    d["seed"] = seed
    d.setdefault("data", {}).setdefault("synthetic", {})["seed"] = seed
    for name, values in sections.items():
        if isinstance(values, Mapping):
            d.setdefault(name, {}).update(values)
        else:
            d[name] = values
    return RunConfig.from_dict(d).validate()


def run_suite(
    seeds: Sequence[int] = (0,),
    shots: Sequence[int] = (0, 1, 5),
    base: Mapping | None = None,
    ablation_shots: Sequence[int] = (0, 5),
    progress: Callable[[str], None] | None = None,
) -> Suite:
    """Train and evaluate every arm for every seed (identical data, tasks and budgets)."""
    base = desk_config() if base is None else base
    suite = Suite(list(seeds), tuple(shots))
    say = progress or (lambda msg: None)
    suite.reports = {"aim-fas": {}, "w/o AIU": {}, "w/o FT": {}, "baseline": {}}
    for seed in seeds:
        full_cfg = _cfg(base, seed)
        pools = pipeline.load_pools(full_cfg)
        tasks = {K: pipeline.evaluation_tasks(full_cfg, pools, K) for K in set(shots) | set(ablation_shots)}

        def run(arm, cfg, ks):
            t0 = time.time()
            result = pipeline.train(cfg, pools)
            suite.aiu[(arm, seed)] = (result.learner.aiu.alpha, result.learner.aiu.gamma)
            out = suite.reports[arm].setdefault(seed, {})
            for K in ks:
                out[K] = pipeline.evaluate(cfg, result.checkpoint, tasks=tasks[K])
            suite.seconds[(arm, seed, tuple(ks))] = time.time() - t0
            say(f"seed {seed} {arm} " + " ".join(f"K={K}:{100 * out[K].acer_mean:.2f}" for K in ks)
                + f" ({time.time() - t0:.0f}s)")

        run("aim-fas", full_cfg, sorted(set(shots) | set(ablation_shots)))
        run("w/o AIU", _cfg(base, seed, ablation={"without_aiu": True}), list(ablation_shots))
        for K in ablation_shots:
            run("w/o FT", _cfg(base, seed, ablation={"without_ft": True}, episode={"k_menu": [K]}), [K])
        run("baseline", _cfg(base, seed, eval={"mode": "baseline"}, train_mode="baseline"), list(shots))
    return suite


@dataclass
class Verdict:
    ok: bool
    lines: list

    def text(self) -> str:
        return "\n".join(self.lines)


def trend_verdict(suite: Suite, low: int = 0, mid: int = 1, high: int = 5) -> Verdict:
    """ACER(high) < ACER(mid) < ACER(low) for the full model, and full beats the baseline at ``low``."""
    a = {K: suite.acer("aim-fas", K) for K in (low, mid, high)}
    b = suite.acer("baseline", low)
    ordering = a[high] < a[mid] < a[low]
    beats = a[low] < b
    lines = [
        f"aim-fas mean ACER  {low}-shot {100 * a[low]:.2f}  {mid}-shot {100 * a[mid]:.2f}  {high}-shot {100 * a[high]:.2f}"
        f"  -> ordering {'holds' if ordering else 'violated'}",
        f"baseline {low}-shot {100 * b:.2f} vs aim-fas {100 * a[low]:.2f} -> {'aim-fas better' if beats else 'baseline not beaten'}",
    ]
    for s in suite.seeds:
        per = {K: suite.acer("aim-fas", K, s) for K in (low, mid, high)}
        flag = per[high] < per[mid] < per[low] and per[low] < suite.acer("baseline", low, s)
        lines.append(
            f"  seed {s}: " + " ".join(f"{K}-shot {100 * per[K]:.2f}" for K in (low, mid, high))
            + f" baseline {100 * suite.acer('baseline', low, s):.2f}" + ("" if flag else "  [violates at this seed]")
        )
    return Verdict(ordering and beats, lines)


def ablation_verdict(suite: Suite, shots: Sequence[int] = (0, 5)) -> Verdict:
    """Full model mean ACER <= each ablated variant's, at every shot count in ``shots``."""
    ok, lines = True, []
    for K in shots:
        full = suite.acer("aim-fas", K)
        for arm in ("w/o AIU", "w/o FT"):
            other = suite.acer(arm, K)
            good = full <= other
            ok &= good
            lines.append(f"{K}-shot: aim-fas {100 * full:.2f} vs {arm} {100 * other:.2f} -> {'ok' if good else 'VIOLATED'}")
            for s in suite.seeds:
                f, o = suite.acer("aim-fas", K, s), suite.acer(arm, K, s)
                lines.append(f"  seed {s}: {100 * f:.2f} vs {100 * o:.2f}" + ("" if f <= o else "  [violates at this seed]"))
    return Verdict(ok, lines)
