"""A tiny single-level dense detector: conv backbone, sigmoid class head, box-delta head."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .anchors import AnchorSet
from .losses import optimal_bias, prior_bias
from .tensor import ParamStore, Value

INIT_POLICIES = ("default_zero_bias", "manual_pi", "optimal_bias")
# std of the final box-delta conv weights
REG_HEAD_STD = 0.01


@dataclass
class DetectorConfig:
    channels: List[int] = field(default_factory=lambda: [8, 16, 16])
    strides: List[int] = field(default_factory=lambda: [2, 2, 1])
    head_depth: int = 1
    num_anchors: int = 12
    C: int = 3
    in_channels: int = 1
    init_policy: str = "default_zero_bias"
    init_pi: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.init_policy not in INIT_POLICIES:
            raise ValueError(f"init_policy must be one of {INIT_POLICIES}")
        if self.init_policy == "manual_pi" and self.init_pi is None:
            raise ValueError("manual_pi needs init_pi")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("backbone strides must be 1 or 2")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        return asdict(self)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3) -> np.ndarray:
    # He-normal, gain sqrt(2) for ReLU
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))


def final_cls_bias(config: DetectorConfig, stats=None) -> float:
    if config.init_policy == "default_zero_bias":
        return 0.0
    if config.init_policy == "manual_pi":
        return prior_bias(config.init_pi)
    if stats is None:
        raise ValueError("optimal_bias initialisation needs imbalance statistics")
    return optimal_bias(stats.N_total, stats.N_f_total, config.C)[1]


def init_detector(config: DetectorConfig, stats=None, learning_rate: float = 0.01) -> ParamStore:
    """Seeded parameters; only the final class bias depends on ``init_policy``.

    The final class-conv weights are zero, so every initial score equals
    sigmoid(final bias) whatever the input.
    """
    bias = final_cls_bias(config, stats)
    rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    cin = config.in_channels
    for i, cout in enumerate(config.channels):
        params[f"backbone.{i}.w"] = _he_conv(rng, cout, cin)
        params[f"backbone.{i}.b"] = np.zeros(cout)
        cin = cout
    feat = cin
    for head in ("cls", "reg"):
        for i in range(config.head_depth):
            params[f"{head}_tower.{i}.w"] = _he_conv(rng, feat, feat)
            params[f"{head}_tower.{i}.b"] = np.zeros(feat)
    params["cls_out.w"] = np.zeros((config.num_anchors * config.C, feat, 3, 3))
    params["cls_out.b"] = np.full(config.num_anchors * config.C, bias)
    params["reg_out.w"] = rng.normal(0.0, REG_HEAD_STD, size=(config.num_anchors * 4, feat, 3, 3))
    params["reg_out.b"] = np.zeros(config.num_anchors * 4)
    return ParamStore(params, learning_rate)


def _to_anchor_rows(x: Value, per_anchor: int) -> Value:
    # [B, A*K, h, w] -> [B*h*w*A, K], matching AnchorSet ordering
    b, ak, h, w = x.shape
    a = ak // per_anchor
    x = T.reshape(x, (b, a, per_anchor, h, w))
    x = T.transpose(x, (0, 3, 4, 1, 2))
    return T.reshape(x, (b * h * w * a, per_anchor))


def forward_logits(store: ParamStore, config: DetectorConfig, images) -> Tuple[Value, Value]:
    """Class logits [B*N, C] and box deltas [B*N, 4] for images [B, 1, H, W]."""
    x = T.as_value(images)
    if x.data.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or x.shape[1] != config.in_channels:
        raise T.ShapeError(f"detector expects [B, {config.in_channels}, H, W], got {x.shape}")
    if x.shape[2] % config.total_stride or x.shape[3] % config.total_stride:
        raise T.ShapeError(f"image size {x.shape[2:]} not divisible by stride {config.total_stride}")
    for i, s in enumerate(config.strides):
        x = T.relu(T.conv2d(x, store[f"backbone.{i}.w"], store[f"backbone.{i}.b"], stride=s, padding=1))
    cls, reg = x, x
    for i in range(config.head_depth):
        cls = T.relu(T.conv2d(cls, store[f"cls_tower.{i}.w"], store[f"cls_tower.{i}.b"], padding=1))
        reg = T.relu(T.conv2d(reg, store[f"reg_tower.{i}.w"], store[f"reg_tower.{i}.b"], padding=1))
    cls = T.conv2d(cls, store["cls_out.w"], store["cls_out.b"], padding=1)
    reg = T.conv2d(reg, store["reg_out.w"], store["reg_out.b"], padding=1)
    return _to_anchor_rows(cls, config.C), _to_anchor_rows(reg, 4)


def forward(store: ParamStore, config: DetectorConfig, images) -> Tuple[Value, Value]:
    """Class probabilities [B*N, C] (sigmoid) and box deltas [B*N, 4]."""
    logits, deltas = forward_logits(store, config, images)
    return T.sigmoid(logits), deltas


def check_alignment(config: DetectorConfig, anchors: AnchorSet, H: int, W: int) -> None:
    gh, gw = H // config.total_stride, W // config.total_stride
    if len(anchors.strides) != 1 or anchors.strides[0] != config.total_stride:
        raise ValueError(f"detector stride {config.total_stride} does not match anchor strides {anchors.strides}")
    if gh * gw * config.num_anchors != anchors.N:
        raise ValueError(f"head yields {gh * gw * config.num_anchors} rows but AnchorSet has N={anchors.N}")


def save_checkpoint(store: ParamStore, config: DetectorConfig, path: str, extra: Optional[dict] = None) -> None:
    """Directory with manifest.json and one text file of flat row-major values per parameter."""
    os.makedirs(path, exist_ok=True)
    entries = {}
    for name, arr in store.arrays().items():
        fname = f"{name}.txt"
        with open(os.path.join(path, fname), "w") as f:
            f.write("\n".join(repr(float(v)) for v in arr.ravel()) + "\n")
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "schema_version": 1,
        "detector": config.to_dict(),
        "learning_rate": store.learning_rate,
        "t": store.t,
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str) -> Tuple[ParamStore, DetectorConfig, dict]:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(mpath) as f:
        manifest = json.load(f)
    params = {}
    for name, e in manifest["params"].items():
        flat = np.loadtxt(os.path.join(path, e["file"]), dtype=np.float64, ndmin=1)
        params[name] = flat.reshape(e["shape"])
    store = ParamStore(params, manifest["learning_rate"], manifest["t"])
    return store, DetectorConfig(**manifest["detector"]), manifest
