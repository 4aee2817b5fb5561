"""Run configuration: nested sections read from JSON, with dotted overrides.

A run is fully determined by its :class:`RunConfig` (which includes the
seed). Validation collects every problem before anything touches data.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .models import ConfigError, ModelConfig
from .taskgen import DEFAULT_K_MENU, EpisodeConfig, SyntheticSpec

EVAL_MODES = ("aimfas", "baseline")
TRAIN_MODES = ("aimfas", "baseline")


@dataclass(frozen=True)
class DataConfig:
    """Either a manifest on disk or an in-memory synthetic benchmark."""

    manifest: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.001
    gamma: float = 1.0
    beta: float = 1e-4
    u: int = 3
    meta_batch: int = 8
    optimizer: str = "sgd"
    iterations: int = 2000
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    checkpoint_every: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    """Conventional training and the fine-tune-then-evaluate protocol."""

    epochs: int = 30
    lr: float = 1e-3
    finetune_steps: int = 10
    finetune_lr: float = 0.01


@dataclass(frozen=True)
class EvalConfig:
    K: int = 0
    T: int = 100
    u: int | None = None  # None: the trained u
    mode: str = "aimfas"
    task_seed: int = 1000
    split: str = "test"


@dataclass(frozen=True)
class AblationFlags:
    without_aiu: bool = False
    without_ft: bool = False
    without_pd: bool = False
    first_order: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    train_mode: str = "aimfas"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    # -- derived settings ----------------------------------------------------

    def episode_config(self) -> EpisodeConfig:
        """Episode settings after the w/o-PD flag is applied."""
        if self.ablation.without_pd:
            return replace(self.episode, mode="without_predefined")
        return self.episode

    def problems(self) -> list[str]:
        out = []
        out += [f"model: {p}" for p in self.model.problems()]
        out += [f"episode: {p}" for p in self.episode.problems()]
        if self.data.manifest is None:
            out += [f"data.synthetic: {p}" for p in self.data.synthetic.problems()]
            syn = self.data.synthetic
            if (syn.image_side, syn.depth_side) != (self.model.input_side, self.model.depth_side):
                out.append(
                    f"data.synthetic geometry {syn.image_side}/{syn.depth_side} does not match "
                    f"model input_side/depth_side {self.model.input_side}/{self.model.depth_side}"
                )
        m = self.meta
        if m.alpha <= 0 or m.gamma <= 0:
            out.append("meta: alpha and gamma must be positive")
        if m.beta <= 0:
            out.append("meta: beta must be positive")
        if m.u < 1:
            out.append("meta: training needs u >= 1")
        if m.meta_batch < 1:
            out.append("meta: meta_batch must be >= 1")
        if m.optimizer not in ("sgd", "adam"):
            out.append(f"meta: optimizer must be sgd or adam, got {m.optimizer!r}")
        if m.iterations < 0 or m.pretrain_epochs < 0 or m.checkpoint_every < 0:
            out.append("meta: iterations, pretrain_epochs and checkpoint_every must be >= 0")
        b = self.baseline
        if b.epochs < 0 or b.finetune_steps < 0 or b.lr <= 0 or b.finetune_lr <= 0:
            out.append("baseline: epochs/finetune_steps must be >= 0 and learning rates positive")
        e = self.eval
        if e.K < 0 or e.T < 1:
            out.append("eval: need K >= 0 and T >= 1")
        if e.u is not None and e.u < 0:
            out.append("eval: u must be >= 0")
        if e.mode not in EVAL_MODES:
            out.append(f"eval: mode must be one of {EVAL_MODES}, got {e.mode!r}")
        if e.split not in ("val", "test"):
            out.append(f"eval: split must be val or test, got {e.split!r}")
        if self.train_mode not in TRAIN_MODES:
            out.append(f"train_mode must be one of {TRAIN_MODES}, got {self.train_mode!r}")
        if self.workers < 1:
            out.append("workers must be >= 1")
        a = self.ablation
        if a.without_ft and len(self.episode.k_menu) != 1:
            out.append(f"ablation: without_ft trains on one shot count, but k_menu is {list(self.episode.k_menu)}")
        if a.without_pd:
            if 0 in self.episode.k_menu:
                out.append("ablation: without_pd leaves a 0-shot support empty; remove 0 from k_menu")
            if e.K == 0:
                out.append("ablation: without_pd cannot evaluate K=0")
        if a.without_aiu and m.gamma != 1.0:
            out.append("ablation: without_aiu freezes gamma at 1")
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    # -- (de)serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["episode"]["k_menu"] = list(self.episode.k_menu)
        for key in ("living", "spoofing"):
            d["data"]["synthetic"][key] = list(d["data"]["synthetic"][key])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        problems: list[str] = []
        cfg = _build(cls, d, "", problems)
        if problems:
            raise ConfigError(problems)
        return cfg


_NESTED = {
    "data": DataConfig,
    "model": ModelConfig,
    "episode": EpisodeConfig,
    "meta": MetaConfig,
    "baseline": BaselineConfig,
    "eval": EvalConfig,
    "ablation": AblationFlags,
    "synthetic": SyntheticSpec,
}
_TUPLES = {"channels", "k_menu", "living", "spoofing"}


def _build(cls, d, prefix, problems):
    if not isinstance(d, Mapping):
        problems.append(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
        return cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in d.items():
        path = f"{prefix}{key}"
        if key not in known:
            problems.append(f"unknown key {path!r}")
        elif key in _NESTED and isinstance(value, Mapping):
            kwargs[key] = _build(_NESTED[key], value, path + ".", problems)
        elif key in _NESTED:
            problems.append(f"{path}: expected an object")
        elif key in _TUPLES:
            kwargs[key] = tuple(value) if isinstance(value, (list, tuple)) else value
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{prefix or 'config'}: {exc}")
        return cls()


def _set_path(d: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = d
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {dotted!r}: {p!r} is not a section"])
    node[leaf] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is parsed as JSON, else kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (), base: Mapping | None = None) -> RunConfig:
    """Read a JSON config (or start from ``base``/defaults) and apply overrides."""
    d: dict = json.loads(json.dumps(base)) if base is not None else {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    problems = []
    for text in overrides:
        try:
            key, value = parse_override(text)
            _set_path(d, key, value)
        except ConfigError as exc:
            problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return RunConfig.from_dict(d)


def gradcheck_model() -> ModelConfig:
    """A 75-parameter depth network on 8x8 inputs, small enough for finite differences."""
    return ModelConfig(input_side=8, depth_side=2, blocks=1, channels=(2,), head_channels=0)


def desk_config(**sections) -> dict:
    """Settings used by the acceptance experiments (16x16 faces, Adam outer step, 4 tasks per step).

    Returned as a plain dict so callers can layer overrides before building.
    """
    d = {
        "model": {"input_side": 16, "depth_side": 2, "channels": [4, 8, 16], "head_channels": 8},
        "data": {"synthetic": {"image_side": 16, "depth_side": 2}},
        "meta": {"beta": 1e-3, "optimizer": "adam", "meta_batch": 4, "iterations": 600, "pretrain_epochs": 5},
        "episode": {"k_menu": list(DEFAULT_K_MENU)},
    }
    for name, values in sections.items():
        d.setdefault(name, {}).update(values)
    return d
