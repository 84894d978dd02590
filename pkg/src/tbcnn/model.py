"""Tri-branch CNN scoring model with one fusion head per major.

Three branches read the same (day, slot, location) trajectory tensor, with
the location axis as the channel axis:

* ``P`` (persistence): 1 x s convolutions along the slots of each day,
  attention over days, max over slots at the end.
* ``R`` (regularity): s x 1 convolutions along the days of each slot,
  attention over slots, max over days at the end.
* ``D`` (distribution): depthwise s x s convolutions, attention over
  locations, non-overlapping max pooling at the end.

Branch parameters are shared by all majors; each major owns a three-layer
fusion head that maps the concatenated branch outputs to a scalar score.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .autograd import (
    Tensor,
    affine,
    broadcast_mul,
    concat,
    conv2d_same,
    depthwise_conv2d_same,
    flatten,
    max_over_axis,
    max_pool2d,
    mean_over_axes,
    relu,
    sigmoid,
    squeeze_excite,
    squeeze_last,
    take,
)

BRANCHES = ("P", "R", "D")
# axis of a (batch, day, slot, location) tensor that each branch attends over
_ATTENTION_AXIS = {"P": 1, "R": 2, "D": 3}
_AXIS_NAME = {"P": "day", "R": "slot", "D": "location"}


@dataclass(frozen=True)
class ModelConfig:
    n_d: int = 30
    n_t: int = 18
    n_l: int = 12
    s: int = 3
    reduction_ratio: int = 4
    blocks: int = 3
    fusion_hidden: tuple[int, int] = (512, 256)
    pool_region: tuple[int, int] = (5, 3)
    majors: tuple[str, ...] = ("m0",)
    attention_enabled: bool = True
    enabled_branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        object.__setattr__(self, "fusion_hidden", tuple(self.fusion_hidden))
        object.__setattr__(self, "pool_region", tuple(self.pool_region))
        object.__setattr__(self, "majors", tuple(self.majors))
        branches = tuple(b for b in BRANCHES if b in set(self.enabled_branches))
        unknown = set(self.enabled_branches) - set(BRANCHES)
        if unknown or not branches:
            raise ValueError(f"enabled_branches must be a non-empty subset of P, R, D; "
                             f"got {self.enabled_branches}")
        object.__setattr__(self, "enabled_branches", branches)
        for name in ("n_d", "n_t", "n_l", "reduction_ratio", "blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"kernel size s must be odd and >= 1, got {self.s}")
        if len(self.fusion_hidden) != 2 or min(self.fusion_hidden) < 1:
            raise ValueError(f"fusion_hidden must be two positive widths, got {self.fusion_hidden}")
        pd, pt = self.pool_region
        if not (1 <= pd <= self.n_d and 1 <= pt <= self.n_t):
            raise ValueError(f"pool_region {self.pool_region} does not fit in "
                             f"{self.n_d}x{self.n_t}")
        if not self.majors or len(set(self.majors)) != len(self.majors):
            raise ValueError(f"majors must be distinct and non-empty, got {self.majors}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.n_d, self.n_t, self.n_l)

    def axis_length(self, branch: str) -> int:
        return {"P": self.n_d, "R": self.n_t, "D": self.n_l}[branch]

    def branch_width(self, branch: str) -> int:
        if branch == "P":
            return self.n_d * self.n_l
        if branch == "R":
            return self.n_t * self.n_l
        if branch == "D":
            pd, pt = self.pool_region
            return (self.n_d // pd) * (self.n_t // pt) * self.n_l
        raise ValueError(f"unknown branch {branch!r}")

    @property
    def fusion_width(self) -> int:
        return sum(self.branch_width(b) for b in self.enabled_branches)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("fusion_hidden", "pool_region", "majors", "enabled_branches"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**dict(d))


def attention_hidden(length: int, ratio: int) -> int:
    return max(1, math.ceil(length / ratio))


def _param_shapes(cfg: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    s, n_l = cfg.s, cfg.n_l
    conv = {"P": (n_l, 1, s, n_l), "R": (n_l, s, 1, n_l), "D": (n_l, s, s)}
    shared: dict[str, tuple] = {}
    for br in cfg.enabled_branches:
        L = cfg.axis_length(br)
        h = attention_hidden(L, cfg.reduction_ratio)
        for i in range(cfg.blocks):
            shared[f"{br}.{i}.conv.weight"] = conv[br]
            shared[f"{br}.{i}.conv.bias"] = (n_l,)
            if cfg.attention_enabled:
                shared[f"{br}.{i}.att1.weight"] = (h, L)
                shared[f"{br}.{i}.att1.bias"] = (h,)
                shared[f"{br}.{i}.att2.weight"] = (L, h)
                shared[f"{br}.{i}.att2.bias"] = (L,)
    h1, h2 = cfg.fusion_hidden
    head = {
        "fc1.weight": (h1, cfg.fusion_width), "fc1.bias": (h1,),
        "fc2.weight": (h2, h1), "fc2.bias": (h2,),
        "out.weight": (1, h2), "out.bias": (1,),
    }
    return shared, head


def fan_in(name: str, shape: tuple) -> int:
    """Inputs feeding one output unit of a weight tensor."""
    if name.endswith("conv.weight"):
        return math.prod(shape[1:])  # (C_out, kh, kw, C) or depthwise (C, kh, kw)
    return shape[1]


@dataclass
class ModelParams:
    """Shared branch parameters plus one fusion head per major."""

    shared: dict[str, Tensor]
    heads: dict[str, dict[str, Tensor]]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.shared:
            yield f"shared.{name}", self.shared[name]
        for major in self.heads:
            for name in self.heads[major]:
                yield f"heads.{major}.{name}", self.heads[major][name]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: Tensor(v.data.copy(), True) for k, v in self.shared.items()},
            {m: {k: Tensor(v.data.copy(), True) for k, v in h.items()}
             for m, h in self.heads.items()})

    def frozen(self) -> ModelParams:
        """Copies that do not track gradients, for inference."""
        return ModelParams(
            {k: Tensor(v.data) for k, v in self.shared.items()},
            {m: {k: Tensor(v.data) for k, v in h.items()} for m, h in self.heads.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], cfg: ModelConfig) -> ModelParams:
        shared_shapes, head_shapes = _param_shapes(cfg)
        expected = [f"shared.{n}" for n in shared_shapes] + [
            f"heads.{m}.{n}" for m in cfg.majors for n in head_shapes]
        if sorted(expected) != sorted(arrays):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter names do not match config: missing {missing[:3]}, "
                             f"unexpected {extra[:3]}")
        shared = {}
        for n, shape in shared_shapes.items():
            shared[n] = _checked(arrays[f"shared.{n}"], shape, n)
        heads = {m: {n: _checked(arrays[f"heads.{m}.{n}"], shape, n)
                     for n, shape in head_shapes.items()} for m in cfg.majors}
        return cls(shared, heads)


def _checked(arr, shape, name) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"parameter {name} has shape {arr.shape}, expected {tuple(shape)}")
    return Tensor(arr.copy(), True)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights uniform in +-sqrt(6 / fan_in), biases zero; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shared_shapes, head_shapes = _param_shapes(cfg)

    def draw(name, shape):
        if name.endswith("bias"):
            return Tensor(np.zeros(shape), True)
        bound = math.sqrt(6.0 / fan_in(name, shape))
        return Tensor(rng.uniform(-bound, bound, size=shape), True)

    shared = {n: draw(n, shape) for n, shape in shared_shapes.items()}
    heads = {m: {n: draw(n, shape) for n, shape in head_shapes.items()} for m in cfg.majors}
    return ModelParams(shared, heads)


# blocks -------------------------------------------------------------------------------

def _block(F: Tensor, branch: str, i: int, params: ModelParams, cfg: ModelConfig,
           trace: dict | None = None) -> Tensor:
    p = params.shared
    w, b = p[f"{branch}.{i}.conv.weight"], p[f"{branch}.{i}.conv.bias"]
    conv = depthwise_conv2d_same if branch == "D" else conv2d_same
    Z = conv(F, w, b)
    if not cfg.attention_enabled:
        return relu(Z)
    out, a = squeeze_excite(Z, _ATTENTION_AXIS[branch] - 4,
                            p[f"{branch}.{i}.att1.weight"], p[f"{branch}.{i}.att1.bias"],
                            p[f"{branch}.{i}.att2.weight"], p[f"{branch}.{i}.att2.bias"])
    if trace is not None:
        trace.setdefault(branch, []).append(a)
    return out


def _block_reference(F: Tensor, branch: str, i: int, params: ModelParams,
                     cfg: ModelConfig) -> Tensor:
    """Same block built from unfused ops; used to check the fused path."""
    p = params.shared
    w, b = p[f"{branch}.{i}.conv.weight"], p[f"{branch}.{i}.conv.bias"]
    conv = depthwise_conv2d_same if branch == "D" else conv2d_same
    H = relu(conv(F, w, b))
    if not cfg.attention_enabled:
        return H
    # H is (..., day, slot, location); squeeze the two axes other than the attended one
    axis = _ATTENTION_AXIS[branch] - 4
    d = mean_over_axes(H, [a for a in (-3, -2, -1) if a != axis])
    z = relu(affine(d, p[f"{branch}.{i}.att1.weight"], p[f"{branch}.{i}.att1.bias"]))
    a = sigmoid(affine(z, p[f"{branch}.{i}.att2.weight"], p[f"{branch}.{i}.att2.bias"]))
    return broadcast_mul(H, a, axis)


def persistence_block(F: Tensor, params: ModelParams, cfg: ModelConfig, i: int = 0) -> Tensor:
    return _block(F, "P", i, params, cfg)


def regularity_block(F: Tensor, params: ModelParams, cfg: ModelConfig, i: int = 0) -> Tensor:
    return _block(F, "R", i, params, cfg)


def distribution_block(F: Tensor, params: ModelParams, cfg: ModelConfig, i: int = 0) -> Tensor:
    return _block(F, "D", i, params, cfg)


def _check_input(X: Tensor, cfg: ModelConfig) -> None:
    if X.shape[-3:] != cfg.input_shape or X.ndim not in (3, 4):
        raise ValueError(f"input shape {X.shape} does not match config {cfg.input_shape}")


def branch_forward(X, branch: str, params: ModelParams, cfg: ModelConfig,
                   trace: dict | None = None) -> Tensor:
    """Run one branch's blocks and its pooling; returns the flattened feature vector."""
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    if branch not in cfg.enabled_branches:
        raise ValueError(f"branch {branch!r} is disabled in this config")
    X = X if isinstance(X, Tensor) else Tensor(X)
    _check_input(X, cfg)
    F = X
    for i in range(cfg.blocks):
        F = _block(F, branch, i, params, cfg, trace)
    start = X.ndim - 3
    if branch == "P":
        pooled = max_over_axis(F, -2)
    elif branch == "R":
        pooled = max_over_axis(F, -3)
    else:
        pooled = max_pool2d(F, cfg.pool_region)
    return flatten(pooled, start)


def features(X, params: ModelParams, cfg: ModelConfig, trace: dict | None = None) -> Tensor:
    """Concatenated outputs of the enabled branches (input to the fusion heads)."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    return concat([branch_forward(X, br, params, cfg, trace) for br in cfg.enabled_branches])


def _head_hidden(h: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    h = relu(affine(h, head["fc1.weight"], head["fc1.bias"]))
    return relu(affine(h, head["fc2.weight"], head["fc2.bias"]))


def _head(params: ModelParams, major: str) -> Mapping[str, Tensor]:
    try:
        return params.heads[major]
    except KeyError:
        raise KeyError(f"no fusion head for major {major!r}") from None


def embed(X, major: str, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Activation of the last hidden fusion layer (the student embedding)."""
    head = _head(params, major)
    return _head_hidden(features(X, params, cfg), head)


def model_forward(X, major: str, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Scalar score of one student; higher means better predicted performance."""
    head = _head(params, major)
    e = _head_hidden(features(X, params, cfg), head)
    return squeeze_last(affine(e, head["out.weight"], head["out.bias"]))


def score_batch(X, majors: Sequence[str], params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Scores for a batch ``(B, D, T, L)`` whose rows belong to ``majors``.

    Branches run once on the whole batch; each row then goes through the head
    of its own major.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim != 4 or len(majors) != X.shape[0]:
        raise ValueError(f"need a (batch, D, T, L) input with one major per row; "
                         f"got {X.shape} and {len(majors)} majors")
    feats = features(X, params, cfg)
    groups: dict[str, list[int]] = {}
    for row, m in enumerate(majors):
        _head(params, m)
        groups.setdefault(m, []).append(row)
    parts, order = [], []
    for m in sorted(groups):
        rows = groups[m]
        head = params.heads[m]
        f = feats if len(groups) == 1 else take(feats, rows)
        parts.append(squeeze_last(affine(_head_hidden(f, head), head["out.weight"], head["out.bias"])))
        order.extend(rows)
    scores = parts[0] if len(parts) == 1 else concat(parts)
    if order == sorted(order):
        return scores
    inverse = np.empty(len(order), dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(len(order))
    return take(scores, inverse)


def export_attention(X_batch, params: ModelParams, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Batch-mean attention of the first block of each enabled branch.

    Returns vectors keyed by axis name: ``day`` (P), ``slot`` (R), ``location`` (D).
    """
    if not cfg.attention_enabled:
        raise ValueError("attention is disabled in this model")
    X = np.asarray(X_batch.data if isinstance(X_batch, Tensor) else X_batch, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    trace: dict[str, list[np.ndarray]] = {}
    for br in cfg.enabled_branches:
        F = Tensor(X)
        _check_input(F, cfg)
        _block(F, br, 0, params, cfg, trace)
    return {_AXIS_NAME[br]: np.atleast_2d(trace[br][0]).mean(axis=0) for br in cfg.enabled_branches}


# checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seed: int = 0
    epoch: int = 0
    run_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "run_config": self.run_config,
            "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                       for name, arr in self.params.to_arrays().items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Checkpoint:
        cfg = ModelConfig.from_dict(d["config"])
        arrays = {n: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for n, v in d["params"].items()}
        return cls(cfg, ModelParams.from_arrays(arrays, cfg), int(d.get("seed", 0)),
                   int(d.get("epoch", 0)), dict(d.get("run_config", {})))

    def save(self, path: str | Path) -> None:
        # repr-based float output round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
