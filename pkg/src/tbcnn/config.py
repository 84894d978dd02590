"""Run configuration: one flat JSON object with dotted keys.

Example::

    {"train.epochs": 5, "model.enabled_branches": ["P", "R"], "loss.k": 10}

Missing keys take their defaults; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import DatasetDims, SyntheticConfig
from .model import ModelConfig
from .ranking import LossConfig
from .train import TrainConfig

# ModelConfig fields that come from the data rather than the config file
_MODEL_DERIVED = ("n_d", "n_t", "n_l", "majors")


@dataclass(frozen=True)
class RunConfig:
    dims: DatasetDims = DatasetDims()
    synthetic: SyntheticConfig = SyntheticConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    split_seed: int = 0
    paths: dict[str, str | None] = field(default_factory=lambda: {"data": None, "out": None})

    def model_for(self, majors) -> ModelConfig:
        """The model config with dimensions and heads filled in from the data."""
        return replace(self.model, n_d=self.dims.n_d, n_t=self.dims.n_t, n_l=self.dims.n_l,
                       majors=tuple(sorted(majors)))

    def synthetic_config(self) -> SyntheticConfig:
        return replace(self.synthetic, dims=self.dims)

    # flat form ------------------------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(DatasetDims):
            out[f"data.{f.name}"] = getattr(self.dims, f.name)
        for f in fields(SyntheticConfig):
            if f.name != "dims":
                out[f"synthetic.{f.name}"] = getattr(self.synthetic, f.name)
        out["split.seed"] = self.split_seed
        for f in fields(ModelConfig):
            if f.name not in _MODEL_DERIVED:
                v = getattr(self.model, f.name)
                out[f"model.{f.name}"] = list(v) if isinstance(v, tuple) else v
        for f in fields(TrainConfig):
            if f.name != "loss":
                out[f"train.{f.name}"] = getattr(self.train, f.name)
        out["loss.k"] = self.train.loss.k
        out["loss.eta"] = self.train.loss.eta
        for k, v in self.paths.items():
            out[f"paths.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any]) -> RunConfig:
        defaults = cls().to_flat()
        unknown = sorted(set(flat) - set(defaults))
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        merged = dict(defaults)
        for key, value in flat.items():
            merged[key] = _coerce(key, value, defaults[key])

        def section(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in merged.items() if k.startswith(prefix + ".")}

        dims = DatasetDims(**section("data"))
        synthetic = SyntheticConfig(dims=dims, **section("synthetic"))
        model = ModelConfig(n_d=dims.n_d, n_t=dims.n_t, n_l=dims.n_l, **section("model"))
        train = TrainConfig(loss=LossConfig(**section("loss")), **section("train"))
        return cls(dims, synthetic, model, train, merged["split.seed"], section("paths"))

    def with_overrides(self, overrides: Mapping[str, Any]) -> RunConfig:
        flat = self.to_flat()
        flat.update(overrides)
        return self.from_flat(flat)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise ValueError(f"{path}: expected a JSON object of dotted keys")
        return cls.from_flat(obj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of the default; ints may stand in for floats."""
    if key in ("train.pairs_per_epoch_cap", "paths.data", "paths.out") and value is None:
        return None
    if key == "train.pairs_per_epoch_cap":
        default = 0
    elif key.startswith("paths."):
        default = ""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ValueError(f"configuration key {key} expects {type(default).__name__}, "
                         f"got {value!r}")
    return value
