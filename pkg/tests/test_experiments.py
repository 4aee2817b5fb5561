from aimfas import experiments
from aimfas.config import desk_config
from aimfas.experiments import Suite
from aimfas.metrics import EvalReport, TaskMetrics


def _report(acer):
    return EvalReport.from_tasks([TaskMetrics(acer, acer, acer, 0.5)])


def _suite(values):
    """values: arm -> seed -> K -> ACER."""
    s = Suite(sorted({seed for arm in values.values() for seed in arm}), (0, 1, 5))
    s.reports = {arm: {seed: {K: _report(v) for K, v in ks.items()} for seed, ks in seeds.items()}
                 for arm, seeds in values.items()}
    return s


GOOD = {
    "aim-fas": {0: {0: 0.2, 1: 0.1, 5: 0.05}, 1: {0: 0.3, 1: 0.2, 5: 0.1}},
    "baseline": {0: {0: 0.3, 1: 0.1, 5: 0.05}, 1: {0: 0.35, 1: 0.2, 5: 0.1}},
    "w/o AIU": {0: {0: 0.25, 5: 0.06}, 1: {0: 0.3, 5: 0.2}},
    "w/o FT": {0: {0: 0.2, 5: 0.07}, 1: {0: 0.4, 5: 0.1}},
}


def test_verdicts_pass_and_show_every_seed():
    s = _suite(GOOD)
    trend, ablation = experiments.trend_verdict(s), experiments.ablation_verdict(s)
    assert trend.ok and ablation.ok
    assert sum("seed" in line for line in trend.lines) == 2
    assert sum("seed" in line for line in ablation.lines) == 8  # 2 shots x 2 arms x 2 seeds
    assert "[violates" not in ablation.text()


def test_seed_failure_is_flagged_even_when_mean_passes():
    values = {arm: {seed: dict(ks) for seed, ks in seeds.items()} for arm, seeds in GOOD.items()}
    values["w/o AIU"][0][5] = 0.5
    values["w/o AIU"][1][5] = 0.09  # seed 1 beats the full model at 5-shot, the mean does not
    s = _suite(values)
    v = experiments.ablation_verdict(s)
    assert v.ok
    assert "seed 1: 10.00 vs 9.00  [violates at this seed]" in v.text()


def test_trend_fails_on_ordering_or_baseline():
    values = {arm: {seed: dict(ks) for seed, ks in seeds.items()} for arm, seeds in GOOD.items()}
    values["aim-fas"][0][1] = 0.4  # 1-shot mean above 0-shot mean
    assert not experiments.trend_verdict(_suite(values)).ok
    values = {arm: {seed: dict(ks) for seed, ks in seeds.items()} for arm, seeds in GOOD.items()}
    values["baseline"][0][0] = 0.1
    values["baseline"][1][0] = 0.1
    v = experiments.trend_verdict(_suite(values))
    assert not v.ok and "baseline not beaten" in v.text()


def test_table_lists_arms_and_means():
    text = _suite(GOOD).table()
    assert "aim-fas\tmean\t25.00\t15.00\t7.50" in text
    assert "w/o FT\t0\t20.00\t-\t7.00" in text


def test_run_suite_smoke():
    base = desk_config(
        model={"input_side": 8, "depth_side": 2, "blocks": 1, "channels": [2], "head_channels": 0},
        data={"synthetic": {"image_side": 8, "depth_side": 2, "samples_per_category": 30}},
        meta={"iterations": 2, "meta_batch": 1, "pretrain_epochs": 0},
        baseline={"epochs": 1},
        eval={"T": 3},
    )
    messages = []
    s = experiments.run_suite([3], base=base, progress=messages.append)
    assert set(s.reports) == {"aim-fas", "w/o AIU", "w/o FT", "baseline"}
    assert set(s.reports["aim-fas"][3]) == {0, 1, 5} and set(s.reports["w/o FT"][3]) == {0, 5}
    assert s.aiu[("w/o AIU", 3)] == (0.001, 1.0)
    assert len(messages) == 5
    # all arms at one seed are scored on the same tasks: same T and same task seed
    assert {r.T for arm in s.reports.values() for r in arm[3].values()} == {3}
