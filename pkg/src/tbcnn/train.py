"""Mini-batch training with Adam, step-decay learning rate and pair sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from ._runtime import tune_allocator
from .data import Dataset, DatasetSplit, build_pairs, rankings_for
from .model import Checkpoint, ModelConfig, ModelParams, init_params, score_batch
from .ranking import LossConfig, MetricsReport, PairSample, major_metrics, pair_weights, \
    weighted_hinge_loss

logger = logging.getLogger(__name__)

LOSS_MODES = ("topk_focused", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    initial_lr: float = 1e-5
    epochs: int = 50
    lr_halving_period: int = 20
    loss_mode: str = "topk_focused"
    loss: LossConfig = LossConfig()
    pairs_per_epoch_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not (self.initial_lr > 0 and math.isfinite(self.initial_lr)):
            raise ValueError(f"initial_lr must be a positive number, got {self.initial_lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr_halving_period < 1:
            raise ValueError(f"lr_halving_period must be positive, got {self.lr_halving_period}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.pairs_per_epoch_cap is not None and self.pairs_per_epoch_cap < 1:
            raise ValueError(f"pairs_per_epoch_cap must be positive, got {self.pairs_per_epoch_cap}")

    def to_dict(self) -> dict:
        return asdict(self)


# optimiser -------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, written into ``params`` in place.

    Parameters whose gradient is None took no part in the loss (the head of a
    major absent from the batch) and are left alone, moments included.
    """
    for name, g in grads.items():
        if g is not None and g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    state.t += 1
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                            state.m[name].reshape(-1), state.v[name].reshape(-1),
                            lr, state.beta1, state.beta2, state.eps, state.t)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.initial_lr * 0.5 ** (epoch // cfg.lr_halving_period)


# batching --------------------------------------------------------------------------

def pair_pool(pairs: Mapping[str, Sequence[PairSample]] | Sequence[PairSample]) -> list[PairSample]:
    """Flatten per-major pair lists in sorted major order."""
    if isinstance(pairs, Mapping):
        return [p for m in sorted(pairs) for p in pairs[m]]
    return list(pairs)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def sample_batches(pairs: Mapping[str, Sequence[PairSample]] | Sequence[PairSample],
                   cfg: TrainConfig, rng: np.random.Generator) -> list[list[PairSample]]:
    """Shuffle the pooled pairs (capped if configured) into mixed-major batches.

    The last batch keeps whatever is left over.
    """
    pool = pair_pool(pairs)
    if not pool:
        raise ValueError("no pairs to sample from")
    order = rng.permutation(len(pool))
    if cfg.pairs_per_epoch_cap is not None:
        order = order[:cfg.pairs_per_epoch_cap]
    b = cfg.batch_size
    return [[pool[i] for i in order[k:k + b]] for k in range(0, len(order), b)]


# training ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[dict]


class DivergenceError(RuntimeError):
    pass


def training_pairs(dataset: Dataset, split: DatasetSplit, cfg: TrainConfig
                   ) -> tuple[dict[str, list[PairSample]], dict[PairSample, float]]:
    """All training pairs per major and their loss weights.

    Weights come from the training-split true ranking of each major.
    """
    truths = rankings_for(split.train, dataset.gpa)
    pairs: dict[str, list[PairSample]] = {}
    weights: dict[PairSample, float] = {}
    for major in sorted(truths):
        ps = build_pairs(split.train[major], truths[major])
        if not ps:
            raise ValueError(f"major {major!r} has fewer than 2 training students")
        pairs[major] = ps
        ws = (pair_weights(ps, truths[major], cfg.loss) if cfg.loss_mode == "topk_focused"
              else [1.0] * len(ps))
        weights.update(zip(ps, ws))
    return pairs, weights


def _stack(dataset: Dataset, students: Sequence[int]) -> np.ndarray:
    return np.stack([dataset.tensors[s] for s in students])


def score_students(params: ModelParams, cfg: ModelConfig, dataset: Dataset,
                   students: Sequence[int], chunk: int = 64) -> dict[int, float]:
    """Model scores without gradient tracking."""
    frozen = params.frozen()
    major_of = dataset.major_of
    out: dict[int, float] = {}
    students = list(students)
    for k in range(0, len(students), chunk):
        ids = students[k:k + chunk]
        s = score_batch(_stack(dataset, ids), [major_of[i] for i in ids], frozen, cfg)
        out.update(zip(ids, s.data.tolist()))
    return out


def evaluate(model: Checkpoint | ModelParams, dataset: Dataset, part: Mapping[str, Sequence[int]],
             cfg: ModelConfig | None = None, warn: bool = True) -> MetricsReport:
    """Per-major Acc, rho, p@10 and p@20 against the true rankings of ``part``."""
    if isinstance(model, Checkpoint):
        params, cfg = model.params, model.config
    else:
        params = model
        if cfg is None:
            raise ValueError("evaluating bare parameters needs a model config")
    students = [s for m in sorted(part) for s in part[m]]
    scores = score_students(params, cfg, dataset, students)
    truths = rankings_for(part, dataset.gpa)
    per_major = {}
    for m in sorted(truths):
        if truths[m].n < 2:
            logger.warning("major %s has %d students in this split; skipped", m, truths[m].n)
            continue
        per_major[m] = major_metrics(scores, truths[m], warn=warn)
    return MetricsReport(per_major)


def _step(params: ModelParams, arrays: dict, named: dict, state: OptimizerState,
          dataset: Dataset, model_cfg: ModelConfig, batch: Sequence[PairSample],
          weights: Sequence[float], lr: float, where: str) -> float:
    """Forward, backward and one Adam update on a batch; returns the batch loss."""
    students = sorted({s for p in batch for s in (p.u, p.v)})
    major_of = dataset.major_of
    params.zero_grad()
    scores = score_batch(_stack(dataset, students), [major_of[s] for s in students],
                         params, model_cfg)
    loss = weighted_hinge_loss(scores, batch, weights, {s: i for i, s in enumerate(students)})
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {where} (lr={lr:g}); "
                              f"try a smaller initial_lr")
    loss.backward()
    adam_step(arrays, {n: t.grad for n, t in named.items()}, state, lr)
    # a ReLU can hide NaN weights from the loss, so look at the weights too
    bad = next((n for n, a in arrays.items() if not np.isfinite(a.sum())), None)
    if bad is not None:
        raise DivergenceError(f"non-finite parameter {bad} at {where} (lr={lr:g}); "
                              f"try a smaller initial_lr")
    return value


def fit_batch(dataset: Dataset, batch: Sequence[PairSample], model_cfg: ModelConfig,
              steps: int, lr: float, seed: int = 0,
              weights: Sequence[float] | None = None) -> tuple[ModelParams, list[float]]:
    """Repeated Adam steps on one fixed batch at a constant rate.

    A sanity check for the whole pipeline: a working model should drive the
    loss of a handful of pairs to zero. Returns the parameters and
    ``steps + 1`` losses: one before each step, then the loss after the last.
    """
    params = init_params(model_cfg, seed)
    named = dict(params.named())
    arrays = {n: t.data for n, t in named.items()}
    state = OptimizerState()
    w = list(weights) if weights is not None else [1.0] * len(batch)
    losses = [_step(params, arrays, named, state, dataset, model_cfg, batch, w, lr, f"step {i}")
              for i in range(steps)]
    students = sorted({s for p in batch for s in (p.u, p.v)})
    major_of = dataset.major_of
    scores = score_batch(_stack(dataset, students), [major_of[s] for s in students],
                         params.frozen(), model_cfg)
    final = weighted_hinge_loss(scores, batch, w, {s: i for i, s in enumerate(students)})
    return params, losses + [float(final.data)]


def train(dataset: Dataset, split: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig,
          run_config: Mapping | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Fit the model on all training pairs; keep the final and best-validation checkpoints.

    ``log_path``, when given, receives one JSON line per epoch as it finishes.
    """
    tune_allocator()
    missing = [m for m in split.train if m not in model_cfg.majors]
    if missing:
        raise ValueError(f"training majors {missing} have no head in the model config")
    pairs, weights = training_pairs(dataset, split, train_cfg)
    params = init_params(model_cfg, train_cfg.seed)
    named = dict(params.named())
    arrays = {n: t.data for n, t in named.items()}
    state = OptimizerState()
    run_config = dict(run_config or {})

    def checkpoint(p: ModelParams, epoch: int) -> Checkpoint:
        return Checkpoint(model_cfg, p, train_cfg.seed, epoch, run_config)

    best = checkpoint(params.copy(), 0)
    best_acc = -math.inf
    log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_schedule(epoch, train_cfg)
            total, count = 0.0, 0
            for step, batch in enumerate(sample_batches(pairs, train_cfg, epoch_rng(train_cfg.seed, epoch))):
                value = _step(params, arrays, named, state, dataset, model_cfg, batch,
                              [weights[p] for p in batch], lr, f"epoch {epoch}, step {step}")
                total += value * len(batch)
                count += len(batch)
            if any(len(ids) >= 2 for ids in split.val.values()):
                val = evaluate(params, dataset, split.val, model_cfg, warn=epoch == 0).macro
            else:
                val = dict.fromkeys(("acc", "rho", "p_at_10", "p_at_20"))
            row = {"epoch": epoch, "lr": lr, "train_loss": total / count,
                   "val_acc": val["acc"], "val_rho": val["rho"],
                   "val_p10": val["p_at_10"], "val_p20": val["p_at_20"]}
            log.append(row)
            if log_fh is not None:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            logger.info("epoch %d lr=%g loss=%.6f val_acc=%s", epoch, lr, row["train_loss"],
                        val["acc"])
            if val["acc"] is not None and val["acc"] > best_acc:
                best_acc = val["acc"]
                best = checkpoint(params.copy(), epoch + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(checkpoint(params, train_cfg.epochs), best, log)
