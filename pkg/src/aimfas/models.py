"""Depth-regression network, binary-classification variant, and losses.

The network is a stack of conv/relu/max-pool blocks. Every block's output is
average-pooled down to the depth-map resolution and the results are
concatenated on the channel axis before the prediction head, so the head sees
features from all depths of the backbone.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "aimfas-checkpoint"
CHECKPOINT_VERSION = 1

HEADS = ("depth", "binary")

# neighbour offsets (row, col) for the eight contrast kernels
CONTRAST_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _contrast_kernels() -> np.ndarray:
    k = np.zeros((3, 3, 1, len(CONTRAST_OFFSETS)))
    for i, (dr, dc) in enumerate(CONTRAST_OFFSETS):
        k[1, 1, 0, i] = -1.0
        k[1 + dr, 1 + dc, 0, i] = 1.0
    k.setflags(write=False)
    return k


CONTRAST_KERNELS = _contrast_kernels()


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 32
    depth_side: int = 4
    blocks: int = 3
    channels: tuple = (8, 16, 32)
    head: str = "depth"
    in_channels: int = 3
    head_channels: int = 16
    convs_per_block: int = 1
    lambda_cdl: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def problems(self) -> list[str]:
        out = []
        if self.head not in HEADS:
            out.append(f"head must be one of {HEADS}, got {self.head!r}")
        if self.blocks < 1:
            out.append(f"blocks must be >= 1, got {self.blocks}")
        if len(self.channels) != self.blocks:
            out.append(f"need one channel width per block ({self.blocks}), got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            out.append(f"channel widths must be >= 1, got {self.channels}")
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        if self.convs_per_block < 1:
            out.append("convs_per_block must be >= 1")
        if self.head_channels < 0:
            out.append("head_channels must be >= 0")
        if self.lambda_cdl < 0:
            out.append("lambda_cdl must be >= 0")
        if self.depth_side < 1 or self.input_side < 1:
            out.append("input_side and depth_side must be positive")
        elif self.blocks >= 1:
            if self.input_side % self.depth_side:
                out.append(f"input_side {self.input_side} is not a multiple of depth_side {self.depth_side}")
            last = self.input_side / 2 ** self.blocks
            if last != int(last) or int(last) % self.depth_side or last < self.depth_side:
                out.append(
                    f"{self.blocks} halving blocks take {self.input_side} to {last}, "
                    f"which must be a positive multiple of depth_side {self.depth_side}"
                )
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def block_sides(self) -> list[int]:
        return [self.input_side // 2 ** (b + 1) for b in range(self.blocks)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "channels" else v) for k, v in d.items()})


@dataclass(frozen=True)
class DepthLabel:
    map: np.ndarray
    living: bool

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"depth map must be square 2-D, got shape {m.shape}")
        if self.living:
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError("living depth values must lie in [0, 1]")
        elif np.any(m != 0.0):
            raise ValueError("spoofing depth label must be all zeros")
        object.__setattr__(self, "map", m)

    @classmethod
    def spoof(cls, side: int) -> "DepthLabel":
        return cls(np.zeros((side, side)), False)


class Batch(NamedTuple):
    images: np.ndarray  # (N, H, W, C)
    depths: np.ndarray  # (N, d, d)
    live: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.live)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_model(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Deterministically initialised weight collection for ``config``."""
    config.validate()
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    cin = config.in_channels
    for b, cout in enumerate(config.channels):
        for c in range(config.convs_per_block):
            w[f"block{b}.conv{c}.weight"] = _he(rng, (3, 3, cin, cout), 9 * cin)
            w[f"block{b}.conv{c}.bias"] = np.zeros(cout)
            cin = cout
    feat = sum(config.channels)
    if config.head == "depth":
        if config.head_channels:
            w["head.conv.weight"] = _he(rng, (3, 3, feat, config.head_channels), 9 * feat)
            w["head.conv.bias"] = np.zeros(config.head_channels)
            feat = config.head_channels
        w["head.out.weight"] = rng.normal(0.0, np.sqrt(1.0 / (9 * feat)), size=(3, 3, feat, 1))
        w["head.out.bias"] = np.zeros(1)
    else:
        if config.head_channels:
            w["head.fc.weight"] = _he(rng, (feat, config.head_channels), feat)
            w["head.fc.bias"] = np.zeros(config.head_channels)
            feat = config.head_channels
        w["head.out.weight"] = rng.normal(0.0, np.sqrt(1.0 / feat), size=(feat, 1))
        w["head.out.bias"] = np.zeros(1)
    return {name: Tensor(v, requires_grad=True) for name, v in w.items()}


def count_parameters(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def backbone_features(params: Mapping[str, Tensor], x, config: ModelConfig) -> Tensor:
    h = ad.as_tensor(x)
    feats = []
    for b in range(config.blocks):
        for c in range(config.convs_per_block):
            h = ad.relu(ad.conv2d(h, params[f"block{b}.conv{c}.weight"], params[f"block{b}.conv{c}.bias"]))
        h = ad.max_pool2d(h, 2)
        feats.append(ad.avg_pool2d(h, h.shape[1] // config.depth_side))
    return ad.concat(feats, axis=-1) if len(feats) > 1 else feats[0]


def forward(params: Mapping[str, Tensor], x, config: ModelConfig) -> Tensor:
    """Network output: depth maps ``(N, d, d, 1)`` or logits ``(N,)``.

    A single unbatched image ``(H, W, C)`` gives an unbatched output.
    """
    x = ad.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    expected = (config.input_side, config.input_side, config.in_channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ad.ShapeError("forward", f"expected input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    z = backbone_features(params, x, config)
    if config.head == "depth":
        if "head.conv.weight" in params:
            z = ad.relu(ad.conv2d(z, params["head.conv.weight"], params["head.conv.bias"]))
        out = ad.conv2d(z, params["head.out.weight"], params["head.out.bias"])
        if single:
            out = ad.reshape(out, out.shape[1:])
        return out
    z = ad.mean(z, axis=(1, 2))
    if "head.fc.weight" in params:
        z = ad.relu(z @ params["head.fc.weight"] + params["head.fc.bias"])
    logits = ad.reshape(z @ params["head.out.weight"] + params["head.out.bias"], (z.shape[0],))
    if single:
        logits = ad.reshape(logits, ())
    return logits


def predict_depth(params: Mapping[str, Tensor], x, config: ModelConfig) -> Tensor:
    if config.head != "depth":
        raise ValueError("predict_depth needs a depth-regression model")
    return forward(params, x, config)


def contrastive_depth_loss(pred, target) -> Tensor:
    """Sum over the eight contrast kernels of squared response differences.

    Accepts single maps ``(d, d)`` / ``(d, d, 1)`` or batches ``(N, d, d, 1)``;
    the sum runs over every pixel of every map. Kernel responses use zero
    padding, and since the kernels are linear the response difference is the
    response of ``pred - target``.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError("contrastive_depth_loss", f"prediction {pred.shape} vs label {target.shape}")
    diff = pred - target
    if diff.ndim == 2:
        diff = ad.reshape(diff, (1,) + diff.shape + (1,))
    elif diff.ndim == 3:
        diff = ad.reshape(diff, (1,) + diff.shape)
    if diff.ndim != 4 or diff.shape[-1] != 1:
        raise ad.ShapeError("contrastive_depth_loss", f"expected depth maps, got {pred.shape}")
    response = ad.conv2d(diff, Tensor._wrap(CONTRAST_KERNELS.astype(diff.data.dtype)))
    return ad.tsum(ad.square(response))


def task_loss(params: Mapping[str, Tensor], batch: Batch, config: ModelConfig) -> Tensor:
    """Mean per-sample loss over a labelled batch.

    Depth head: pixel MSE plus ``lambda_cdl`` times the contrastive depth
    loss of each sample. Binary head: logistic cross-entropy.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("task_loss needs a non-empty batch")
    out = forward(params, batch.images, config)
    if config.head == "depth":
        target = Tensor._wrap(np.asarray(batch.depths, dtype=out.data.dtype).reshape(out.shape))
        loss = ad.mean(ad.square(out - target))
        if config.lambda_cdl:
            loss = loss + ad.scale(contrastive_depth_loss(out, target), config.lambda_cdl / n)
        return loss
    y = Tensor._wrap(np.asarray(batch.live, dtype=out.data.dtype))
    return ad.mean(ad.softplus(out) - out * y)


def live_score(output, head: str = "depth") -> np.ndarray:
    """Liveness score per sample: mean predicted depth, or P(living) for logits."""
    arr = np.asarray(output.data if isinstance(output, Tensor) else output, dtype=np.float64)
    if head == "binary":
        return 1.0 / (1.0 + np.exp(-arr))
    if arr.ndim <= 2 or (arr.ndim == 3 and arr.shape[-1] == 1):  # one (d, d) or (d, d, 1) map
        return np.float64(arr.mean())
    return arr.reshape(arr.shape[0], -1).mean(axis=1)


def score_batch(params: Mapping[str, Tensor], images: np.ndarray, config: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        out = forward(params, images, config)
    return np.atleast_1d(live_score(out, config.head))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    seed: int
    params: dict
    alpha: float
    gamma: float
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": checkpoint.config.to_dict(),
        "seed": int(checkpoint.seed),
        "alpha": float(checkpoint.alpha),
        "gamma": float(checkpoint.gamma),
        "weights": list(checkpoint.params),
        "extra": checkpoint.extra,
    }
    arrays = {f"w:{name}": np.asarray(t.data if isinstance(t, Tensor) else t) for name, t in checkpoint.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path}: not an aimfas checkpoint")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {name: Tensor(data[f"w:{name}"], requires_grad=True) for name in meta["weights"]}
    config = ModelConfig.from_dict(meta["config"]).validate()
    expected = build_model(config, meta["seed"])
    for name, t in expected.items():
        if name not in params or params[name].shape != t.shape:
            raise ValueError(f"{path}: weight {name!r} missing or mis-shaped for its config")
    return Checkpoint(config, meta["seed"], params, meta["alpha"], meta["gamma"], meta.get("extra", {}))
