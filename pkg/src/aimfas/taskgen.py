"""Fine-grained pools, zero/few-shot episode generation, synthetic data, manifests."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .models import Batch, DepthLabel

SPLITS = ("train", "val", "test")
LIVENESS = ("living", "spoofing")
DEFAULT_K_MENU = (0, 1, 3, 5, 7, 9)
MODES = ("standard", "without_predefined")


class TaskGenerationError(ValueError):
    def __init__(self, deficits: Sequence[str]):
        self.deficits = list(deficits)
        super().__init__("; ".join(self.deficits))


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    uid: str
    category: str
    image: np.ndarray  # (H, W, C) in [0, 1]
    label: DepthLabel

    @property
    def living(self) -> bool:
        return self.label.living

    @property
    def depth(self) -> np.ndarray:
        return self.label.map


def stack(samples: Sequence[Sample]) -> Batch:
    return Batch(
        np.stack([s.image for s in samples]),
        np.stack([s.depth for s in samples]),
        np.array([s.living for s in samples], dtype=bool),
    )


@dataclass
class FineGrainedPool:
    split: str
    living: dict = field(default_factory=dict)
    spoofing: dict = field(default_factory=dict)
    category_params: dict = field(default_factory=dict)

    def __post_init__(self):
        for group, flag in ((self.living, True), (self.spoofing, False)):
            for name, samples in group.items():
                for s in samples:
                    if s.living != flag or s.category != name:
                        raise ValueError(
                            f"sample {s.uid} (category {s.category!r}, living={s.living}) "
                            f"filed under {'living' if flag else 'spoofing'} category {name!r}"
                        )
        clash = set(self.living) & set(self.spoofing)
        if clash:
            raise ValueError(f"categories {sorted(clash)} are both living and spoofing")

    def categories(self) -> list[str]:
        return sorted(self.living) + sorted(self.spoofing)

    def samples(self) -> list[Sample]:
        out = []
        for group in (self.living, self.spoofing):
            for name in sorted(group):
                out.extend(group[name])
        return out

    def __len__(self):
        return sum(len(v) for v in self.living.values()) + sum(len(v) for v in self.spoofing.values())


def check_disjoint(pools: Sequence[FineGrainedPool]) -> None:
    seen: dict[str, str] = {}
    for pool in pools:
        for name in pool.categories():
            if name in seen and seen[name] != pool.split:
                raise ManifestError(f"category {name!r} appears in both {seen[name]} and {pool.split} splits")
            seen[name] = pool.split


@dataclass(frozen=True)
class EpisodeConfig:
    M: int = 10
    Q: int = 15
    k_menu: tuple = DEFAULT_K_MENU
    mode: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "k_menu", tuple(int(k) for k in self.k_menu))

    def problems(self) -> list[str]:
        out = []
        if not self.k_menu:
            out.append("k_menu must not be empty")
        elif min(self.k_menu) < 0:
            out.append(f"shot counts must be >= 0, got {self.k_menu}")
        elif self.M < max(self.k_menu):
            out.append(f"M={self.M} must be >= max(k_menu)={max(self.k_menu)}")
        if self.Q < 1:
            out.append(f"Q must be >= 1, got {self.Q}")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}, got {self.mode!r}")
        return out

    def validate(self) -> "EpisodeConfig":
        problems = self.problems()
        if problems:
            raise TaskGenerationError(problems)
        return self


@dataclass(eq=False)
class Task:
    K: int
    support: list
    query: list
    predefined: tuple | None  # (living, spoofing) names, None without predefined faces
    novel: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    def support_batch(self) -> Batch:
        if "s" not in self._cache:
            self._cache["s"] = stack(self.support)
        return self._cache["s"]

    def query_batch(self) -> Batch:
        if "q" not in self._cache:
            self._cache["q"] = stack(self.query)
        return self._cache["q"]


def sample_k(config: EpisodeConfig, rng: np.random.Generator) -> int:
    """Uniform draw of a shot count from the menu (fusion training)."""
    if not config.k_menu:
        raise TaskGenerationError(["k_menu must not be empty"])
    return int(config.k_menu[rng.integers(len(config.k_menu))])


def _draw(rng, samples, n):
    idx = rng.choice(len(samples), size=n, replace=False)
    return [samples[i] for i in idx]


def generate_task(
    source: FineGrainedPool,
    novel: FineGrainedPool,
    K: int,
    config: EpisodeConfig,
    rng: np.random.Generator,
) -> Task:
    """One K-shot episode.

    Predefined categories (one living, one spoofing) come from ``source``,
    new-emerged ones from ``novel``. ``M - K`` faces are drawn from each
    predefined category and ``K + Q`` from each new one; ``Q`` of each new
    category form the query and the rest joins the support. When both pools
    are the same split the new pair is forced to differ from the predefined
    pair.
    """
    M, Q = config.M, config.Q
    without_pd = config.mode == "without_predefined"
    deficits = list(config.problems())
    if not 0 <= K <= M:
        deficits.append(f"K={K} outside [0, M={M}]")
    if without_pd and K < 1:
        deficits.append("without_predefined mode needs K >= 1 (the support would be empty)")
    same = source is novel or source.split == novel.split
    need = 2 if same and not without_pd else 1
    for pool, role in ((novel, "novel"),) if without_pd else ((source, "source"), (novel, "novel")):
        for kind, group in (("living", pool.living), ("spoofing", pool.spoofing)):
            if len(group) < need:
                deficits.append(f"{role} pool ({pool.split}) has {len(group)} {kind} categories, needs {need}")
    if deficits:
        raise TaskGenerationError(deficits)

    def pick(group, exclude=None):
        names = sorted(n for n in group if n != exclude)
        return names[rng.integers(len(names))]

    support: list[Sample] = []
    predefined = None
    if not without_pd:
        li, sm = pick(source.living), pick(source.spoofing)
        predefined = (li, sm)
    lj = pick(novel.living, predefined[0] if same and predefined else None)
    sn = pick(novel.spoofing, predefined[1] if same and predefined else None)

    counts = []
    if predefined:
        counts += [(source.living, predefined[0], M - K), (source.spoofing, predefined[1], M - K)]
    counts += [(novel.living, lj, K + Q), (novel.spoofing, sn, K + Q)]
    short = [f"category {name!r} has {len(group[name])} samples, needs {n}" for group, name, n in counts if len(group[name]) < n]
    if short:
        raise TaskGenerationError(short)

    if predefined:
        support += _draw(rng, source.living[predefined[0]], M - K)
        support += _draw(rng, source.spoofing[predefined[1]], M - K)
    query: list[Sample] = []
    for group, name in ((novel.living, lj), (novel.spoofing, sn)):
        drawn = _draw(rng, group[name], K + Q)
        support += drawn[:K]
        query += drawn[K:]
    return Task(K, support, query, predefined, (lj, sn))


def task_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one task, keyed by seed and indices."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def generate_tasks(source, novel, K, config, seed: int, count: int, stream: int = 0) -> list[Task]:
    return [generate_task(source, novel, K, config, task_rng(seed, stream, i)) for i in range(count)]


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Category counts per split, samples per category and image geometry."""

    living: tuple = (4, 2, 3)  # train, val, test
    spoofing: tuple = (6, 2, 4)
    samples_per_category: int = 40
    image_side: int = 32
    depth_side: int = 4
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        for kind, counts in (("living", self.living), ("spoofing", self.spoofing)):
            if len(counts) != len(SPLITS):
                out.append(f"{kind} needs one count per split {SPLITS}")
                continue
            for split, n in zip(SPLITS, counts):
                if n < 2:
                    out.append(f"{split} split needs >= 2 {kind} categories, got {n}")
        if self.samples_per_category < 1:
            out.append("samples_per_category must be >= 1")
        if self.depth_side < 1 or self.image_side % self.depth_side:
            out.append(f"image_side {self.image_side} must be a multiple of depth_side {self.depth_side}")
        return out

    def validate(self) -> "SyntheticSpec":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self


# Per split, the interval each category's signature parameter is drawn from.
# Intervals never overlap across splits, so no test category can coincide
# with a training one.
# colour cast of the capture domain, shared by living and spoofing faces of a split
_DOMAIN_TINT = {"train": (0.0, 0.35), "val": (0.35, 0.5), "test": (0.5, 1.0)}
_SPOOF_FREQ = {"train": (0.18, 0.30), "val": (0.30, 0.34), "test": (0.34, 0.46)}
# relief-preserving masks only ever appear as unseen attacks
_SPOOF_KINDS = {"train": ("print", "replay"), "val": ("print", "replay"), "test": ("print", "replay", "mask")}


def _split_interval(table, split, i, n):
    lo, hi = table[split]
    width = (hi - lo) / n
    return lo + i * width, lo + (i + 1) * width


def _category_params(rng, split, kind, i, n):
    tint = float(rng.uniform(*_DOMAIN_TINT[split]))
    if kind == "living":
        return {
            "tint": tint,
            "light": float(rng.uniform(0.3, 0.6)),
            "grain": float(rng.uniform(0.02, 0.05)),
        }
    lo, hi = _split_interval(_SPOOF_FREQ, split, i, n)
    kinds = _SPOOF_KINDS[split]
    attack = kinds[i % len(kinds)]
    mask = attack == "mask"
    return {
        "kind": attack,
        "freq": float(rng.uniform(lo, hi)),
        "angle": float(rng.uniform(0.0, np.pi)),
        "strength": float(rng.uniform(0.0, 0.01) if mask else rng.uniform(0.02, 0.06)),
        "flatten": float(rng.uniform(0.6, 0.85) if mask else rng.uniform(0.2, 0.5)),
        "grain": float(rng.uniform(0.0, 0.01)),
        "tint": tint,
    }


def _face(rng, side):
    """A smooth face-like height field in [0, 1] plus its image-space grid."""
    v, u = np.mgrid[0:side, 0:side]
    u = (u + 0.5) / side * 2 - 1
    v = (v + 0.5) / side * 2 - 1
    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    rx, ry = rng.uniform(0.55, 0.75), rng.uniform(0.65, 0.85)
    r2 = ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    nose = 0.35 * np.exp(-(((u - cx) / 0.12) ** 2 + ((v - cy - 0.05) / 0.2) ** 2))
    z = z + nose * (r2 < 1)
    return z / z.max(), u, v


def _shade(z, u, light_angle, strength):
    gy, gx = np.gradient(z)
    lx, ly = np.cos(light_angle), np.sin(light_angle)
    return np.clip(0.55 + strength * z + 6.0 * strength * (lx * gx + ly * gy), 0.0, 1.0)


def _rgb(gray, tint):
    # tint in [0, 1] walks a warm-to-cool colour ramp
    color = np.array([0.9 - 0.3 * tint, 0.75, 0.6 + 0.3 * tint])
    return gray[..., None] * color[None, None, :]


def _downsample(z, factor):
    d = z.shape[0] // factor
    return z.reshape(d, factor, d, factor).mean(axis=(1, 3))


def synth_sample(rng, params, living, side, depth_side, uid, category) -> Sample:
    z, u, v = _face(rng, side)
    angle = rng.uniform(0, 2 * np.pi)
    if living:
        gray = _shade(z, u, angle, params["light"])
        gray = gray * (0.8 + 0.2 * z)
        img = _rgb(gray, params["tint"])
        img = img + rng.normal(0.0, params["grain"], size=img.shape)
        depth = np.clip(_downsample(z, side // depth_side), 0.0, 1.0)
        label = DepthLabel(depth, True)
    else:
        flat = params["flatten"]
        gray = _shade(z * flat, u, angle, 0.45)
        gray = gray * (0.8 + 0.2 * z * flat)
        phase = rng.uniform(0, 2 * np.pi)
        ca, sa = np.cos(params["angle"]), np.sin(params["angle"])
        k = 2 * np.pi * params["freq"] * side / 2
        wave = np.sin(k * (ca * u + sa * v) + phase)
        if params["kind"] == "print":
            wave = wave * np.sin(k * (-sa * u + ca * v) + phase)
        img = _rgb(gray + params["strength"] * wave, params["tint"])
        img = img + rng.normal(0.0, params["grain"], size=img.shape)
        label = DepthLabel.spoof(depth_side)
    return Sample(uid, category, np.clip(img, 0.0, 1.0), label)


def generate_synthetic_benchmark(spec: SyntheticSpec) -> dict[str, FineGrainedPool]:
    """Train/val/test pools of procedurally generated categories.

    Each category is a texture family: living categories differ in colour
    tint, lighting and grain, spoofing categories in attack kind, artifact
    frequency and orientation, and how much face relief survives. The test
    split adds a mask-like attack that keeps most of the relief. Living samples carry the
    downsampled face height field as depth label; spoofing labels are zero.
    """
    spec.validate()
    root = np.random.default_rng(spec.seed)
    pools = {}
    for s, split in enumerate(SPLITS):
        pool = FineGrainedPool(split)
        for kind, count in (("living", spec.living[s]), ("spoofing", spec.spoofing[s])):
            for i in range(count):
                name = f"{split}-{kind}-{i}"
                params = _category_params(root, split, kind, i, count)
                rng = np.random.default_rng([spec.seed, s, LIVENESS.index(kind), i])
                samples = [
                    synth_sample(rng, params, kind == "living", spec.image_side, spec.depth_side, f"{name}/{j}", name)
                    for j in range(spec.samples_per_category)
                ]
                (pool.living if kind == "living" else pool.spoofing)[name] = samples
                pool.category_params[name] = params
        pools[split] = pool
    return pools


# ---------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("split", "category", "liveness", "image", "depth")


def write_manifest(path, rows: Sequence[Mapping[str, str]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for row in rows:
            writer.writerow([row.get(k, "") for k in MANIFEST_FIELDS])
    return path


def read_manifest(path) -> list[dict]:
    """Parse and validate manifest records without touching image files."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} not found")
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.reader(lines, delimiter="\t")
    header = next(reader, None)
    if header is None or tuple(header[:4]) != MANIFEST_FIELDS[:4]:
        raise ManifestError(f"{path}: header must start with {MANIFEST_FIELDS[:4]}")
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) < 4:
            raise ManifestError(f"{path}:{lineno}: expected at least 4 fields, got {len(rec)}")
        row = dict(zip(MANIFEST_FIELDS, rec + [""] * (5 - len(rec))))
        if row["split"] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {row['split']!r}")
        if row["liveness"] not in LIVENESS:
            raise ManifestError(f"{path}:{lineno}: unknown liveness tag {row['liveness']!r}")
        if not row["category"]:
            raise ManifestError(f"{path}:{lineno}: empty category name")
        rows.append(row)
    if not rows:
        raise ManifestError(f"{path}: manifest lists no samples")
    owner: dict[str, tuple[str, str]] = {}
    for row in rows:
        key = (row["split"], row["liveness"])
        prev = owner.setdefault(row["category"], key)
        if prev[0] != key[0]:
            raise ManifestError(f"category {row['category']!r} listed in both {prev[0]} and {key[0]} splits")
        if prev[1] != key[1]:
            raise ManifestError(f"category {row['category']!r} tagged both {prev[1]} and {key[1]}")
    return rows


def _load_image(path: Path, side: int, mode: str) -> np.ndarray:
    from PIL import Image

    if not path.is_file():
        raise ManifestError(f"image file {path} not found")
    with Image.open(path) as im:
        im = im.convert(mode)
        if im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_manifest(path, input_side: int = 32, depth_side: int = 4) -> dict[str, FineGrainedPool]:
    """Pools for every split named in the manifest, keyed by split.

    Image and depth paths are resolved relative to the manifest. Living faces
    without a depth file are rejected; spoofing faces get all-zero labels.
    """
    path = Path(path)
    rows = read_manifest(path)
    base = path.parent
    pools: dict[str, FineGrainedPool] = {}
    counters: dict[str, int] = {}
    for row in rows:
        pool = pools.setdefault(row["split"], FineGrainedPool(row["split"]))
        living = row["liveness"] == "living"
        image = _load_image(base / row["image"], input_side, "RGB")
        if living:
            if not row["depth"]:
                raise ManifestError(f"living sample {row['image']} has no depth file")
            label = DepthLabel(_load_image(base / row["depth"], depth_side, "L"), True)
        else:
            label = DepthLabel.spoof(depth_side)
        n = counters.get(row["category"], 0)
        counters[row["category"]] = n + 1
        sample = Sample(f"{row['category']}/{n}", row["category"], image, label)
        (pool.living if living else pool.spoofing).setdefault(row["category"], []).append(sample)
    check_disjoint(list(pools.values()))
    return pools


def export_benchmark(pools: Mapping[str, FineGrainedPool], out_dir) -> list[Path]:
    """Write pools as 8-bit PNG files plus a manifest per split and a combined one."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_rows = []
    written = []
    for split in SPLITS:
        if split not in pools:
            continue
        rows = []
        for s in pools[split].samples():
            stem = s.uid.replace("/", "_")
            img_rel = Path("images") / split / f"{stem}.png"
            (out_dir / img_rel).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.round(s.image * 255).astype(np.uint8), "RGB").save(out_dir / img_rel, optimize=False)
            row = {"split": split, "category": s.category, "liveness": "living" if s.living else "spoofing",
                   "image": img_rel.as_posix(), "depth": ""}
            if s.living:
                depth_rel = Path("depth") / split / f"{stem}.png"
                (out_dir / depth_rel).parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(s.depth * 255).astype(np.uint8), "L").save(out_dir / depth_rel, optimize=False)
                row["depth"] = depth_rel.as_posix()
            rows.append(row)
        written.append(write_manifest(out_dir / f"{split}.tsv", rows))
        all_rows += rows
    written.append(write_manifest(out_dir / "manifest.tsv", all_rows))
    return written
