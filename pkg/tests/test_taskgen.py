from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from aimfas.taskgen import (
    DEFAULT_K_MENU,
    EpisodeConfig,
    FineGrainedPool,
    ManifestError,
    SyntheticSpec,
    TaskGenerationError,
    export_benchmark,
    generate_synthetic_benchmark,
    generate_task,
    generate_tasks,
    load_manifest,
    read_manifest,
    sample_k,
    task_rng,
    write_manifest,
)

EP = EpisodeConfig()


@pytest.fixture(scope="module")
def pools():
    return generate_synthetic_benchmark(SyntheticSpec(image_side=8, depth_side=2, samples_per_category=30, seed=3))


def _uids(samples):
    return {s.uid for s in samples}


def test_five_shot_sizes(pools):
    t = generate_task(pools["train"], pools["test"], 5, EP, np.random.default_rng(0))
    assert len(t.support) == 20 and len(t.query) == 30


def test_zero_shot_support_is_predefined_only(pools):
    t = generate_task(pools["train"], pools["test"], 0, EP, np.random.default_rng(1))
    assert {s.category for s in t.support} == set(t.predefined)
    assert {s.category for s in t.query} == set(t.novel)
    assert not {s.category for s in t.support} & set(t.novel)


def test_k_shot_support_composition(pools):
    t = generate_task(pools["train"], pools["test"], 3, EP, np.random.default_rng(2))
    counts = Counter(s.category for s in t.support)
    assert counts == {t.predefined[0]: 7, t.predefined[1]: 7, t.novel[0]: 3, t.novel[1]: 3}
    assert not _uids(t.support) & _uids(t.query)


def test_without_predefined_support(pools):
    ep = EpisodeConfig(mode="without_predefined")
    t = generate_task(pools["train"], pools["test"], 3, ep, np.random.default_rng(3))
    assert len(t.support) == 6 and t.predefined is None
    with pytest.raises(TaskGenerationError, match="K >= 1"):
        generate_task(pools["train"], pools["test"], 0, ep, np.random.default_rng(3))


def test_training_tasks_use_distinct_pairs(pools):
    for i in range(50):
        t = generate_task(pools["train"], pools["train"], 1, EP, task_rng(0, i))
        assert t.predefined[0] != t.novel[0] and t.predefined[1] != t.novel[1]


def test_generation_is_reproducible(pools):
    a = generate_tasks(pools["train"], pools["test"], 5, EP, seed=9, count=5)
    b = generate_tasks(pools["train"], pools["test"], 5, EP, seed=9, count=5)
    for x, y in zip(a, b):
        assert [s.uid for s in x.support] == [s.uid for s in y.support]
        assert [s.uid for s in x.query] == [s.uid for s in y.query]


def test_deficits_are_named(pools):
    one = FineGrainedPool("train", {"train-living-0": pools["train"].living["train-living-0"]},
                          {"train-spoofing-0": pools["train"].spoofing["train-spoofing-0"]})
    with pytest.raises(TaskGenerationError) as exc:
        generate_task(one, one, 1, EP, np.random.default_rng(0))
    assert len(exc.value.deficits) == 4  # source and novel roles, both liveness groups
    assert "living categories" in str(exc.value) and "spoofing categories" in str(exc.value)
    with pytest.raises(TaskGenerationError, match="needs 51"):
        generate_task(pools["train"], pools["test"], 1, EpisodeConfig(Q=50), np.random.default_rng(0))
    with pytest.raises(TaskGenerationError, match="outside"):
        generate_task(pools["train"], pools["test"], 11, EP, np.random.default_rng(0))


def test_episode_config_problems():
    problems = EpisodeConfig(M=3, Q=0, k_menu=(0, 5), mode="odd").problems()
    assert len(problems) == 3


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.sampled_from(DEFAULT_K_MENU), same=st.booleans())
def test_task_invariants_property(pools, seed, K, same):
    novel = pools["train"] if same else pools["test"]
    t = generate_task(pools["train"], novel, K, EP, np.random.default_rng(seed))
    assert len(t.support) == 2 * EP.M and len(t.query) == 2 * EP.Q
    assert not _uids(t.support) & _uids(t.query)
    assert {s.category for s in t.query} == set(t.novel)
    assert set(t.novel) <= set(novel.categories())
    assert sum(s.living for s in t.query) == EP.Q
    if K == 0:
        assert not {s.category for s in t.support} & set(t.novel)


def test_sample_k_frequencies():
    rng = np.random.default_rng(0)
    draws = Counter(sample_k(EP, rng) for _ in range(100_000))
    assert set(draws) == set(DEFAULT_K_MENU) == {0, 1, 3, 5, 7, 9}
    for k in DEFAULT_K_MENU:
        assert abs(draws[k] / 100_000 - 1 / 6) < 0.02


def test_singleton_menu():
    rng = np.random.default_rng(1)
    assert {sample_k(EpisodeConfig(k_menu=(5,)), rng) for _ in range(100)} == {5}


# -- synthetic benchmark --------------------------------------------------------


def test_synthetic_labels(pools):
    for pool in pools.values():
        for s in pool.samples():
            if s.living:
                assert s.depth.min() >= 0.0 and s.depth.max() <= 1.0 and s.depth.max() > 0.0
            else:
                assert np.all(s.depth == 0.0)
            assert s.image.shape == (8, 8, 3) and 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(image_side=8, depth_side=2, samples_per_category=3, seed=11)
    a, b = generate_synthetic_benchmark(spec), generate_synthetic_benchmark(spec)
    for split in a:
        assert [x.uid for x in a[split].samples()] == [y.uid for y in b[split].samples()]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a[split].samples(), b[split].samples()))


def test_synthetic_splits_are_disjoint(pools):
    names = [set(p.categories()) for p in pools.values()]
    assert not names[0] & names[1] and not names[0] & names[2] and not names[1] & names[2]

    def freqs(split):
        return [p["freq"] for n, p in pools[split].category_params.items() if "spoofing" in n]

    assert max(freqs("train")) < min(freqs("test"))


def test_degenerate_spec_rejected():
    with pytest.raises(ValueError, match="living"):
        generate_synthetic_benchmark(SyntheticSpec(living=(1, 2, 2)))


# -- manifests ----------------------------------------------------------------------


def _png(path, side=8, mode="RGB", value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = (side, side, 3) if mode == "RGB" else (side, side)
    Image.fromarray(np.full(shape, value, dtype=np.uint8), mode).save(path)
    return path.name


def test_manifest_with_table_one_categories(tmp_path):
    rows = []
    for cat, live in (("Living1", "living"), ("Print2", "spoofing"), ("Replay2", "spoofing")):
        for i in range(2):
            _png(tmp_path / "img" / f"{cat}{i}.png")
            depth = ""
            if live == "living":
                _png(tmp_path / "dep" / f"{cat}{i}.png", 4, "L", 255)
                depth = f"dep/{cat}{i}.png"
            rows.append({"split": "test", "category": cat, "liveness": live, "image": f"img/{cat}{i}.png", "depth": depth})
    write_manifest(tmp_path / "m.tsv", rows)
    pool = load_manifest(tmp_path / "m.tsv", input_side=16, depth_side=2)["test"]
    assert sorted(pool.living) == ["Living1"] and sorted(pool.spoofing) == ["Print2", "Replay2"]
    s = pool.living["Living1"][0]
    assert s.image.shape == (16, 16, 3) and np.allclose(s.depth, 1.0)
    assert np.all(pool.spoofing["Print2"][0].depth == 0.0)


def test_manifest_errors(tmp_path):
    write_manifest(tmp_path / "empty.tsv", [])
    with pytest.raises(ManifestError, match="no samples"):
        read_manifest(tmp_path / "empty.tsv")
    both = [
        {"split": "train", "category": "P", "liveness": "spoofing", "image": "a.png"},
        {"split": "test", "category": "P", "liveness": "spoofing", "image": "b.png"},
    ]
    write_manifest(tmp_path / "both.tsv", both)
    with pytest.raises(ManifestError, match="both train and test"):
        read_manifest(tmp_path / "both.tsv")
    write_manifest(tmp_path / "tag.tsv", [{"split": "train", "category": "P", "liveness": "fake", "image": "a.png"}])
    with pytest.raises(ManifestError, match="liveness"):
        read_manifest(tmp_path / "tag.tsv")
    write_manifest(tmp_path / "missing.tsv", [{"split": "train", "category": "P", "liveness": "spoofing", "image": "nope.png"}])
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "missing.tsv")
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "absent.tsv")


def test_export_then_load_round_trip(tmp_path):
    spec = SyntheticSpec(image_side=8, depth_side=2, samples_per_category=2, seed=1)
    pools = generate_synthetic_benchmark(spec)
    export_benchmark(pools, tmp_path)
    back = load_manifest(tmp_path / "manifest.tsv", 8, 2)
    for split, pool in pools.items():
        assert back[split].categories() == pool.categories()
        for a, b in zip(pool.samples(), back[split].samples()):
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
            assert a.living == b.living
