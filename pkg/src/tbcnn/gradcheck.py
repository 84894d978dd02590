"""Central finite-difference checks for every differentiable op and the full model.

Each case maps a few input arrays to a scalar. Non-scalar op outputs are
reduced with a fixed random projection so every output element matters.
Errors are measured elementwise as ``|a - n| / max(|a|, |n|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ModelConfig, ModelParams, init_params, model_forward, score_batch
from .ranking import PairSample, weighted_hinge_loss

TOY_CONFIG = ModelConfig(n_d=8, n_t=6, n_l=3, fusion_hidden=(12, 8), majors=("a", "b"))


@dataclass(frozen=True)
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: Sequence[np.ndarray]


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_case(case: GradCase, h: float = 1e-6, tol: float = 1e-4) -> CheckResult:
    arrays = [np.array(a, dtype=np.float64) for a in case.inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    # share storage so in-place perturbations reach the leaves
    for t, a in zip(leaves, arrays):
        t.data = a
    case.fn(*leaves).backward()
    worst, count = 0.0, 0
    for t, a in zip(leaves, arrays):
        num = numeric_grad(lambda: float(case.fn(*[Tensor(x) for x in arrays]).data), a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        if ana.size:
            worst = max(worst, float(rel_error(ana, num).max()))
        count += a.size
    return CheckResult(case.name, worst, count, bool(worst < tol))


def _project(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(seed).uniform(-1.0, 1.0, out.shape)
    return (out * r).sum()


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-1.0, 1.0, shape)

    def proj(op):
        return lambda *ts: _project(op(*ts), seed + 1)

    cases = [
        GradCase("add", proj(lambda a, b: a + b), [u(3, 4), u(4)]),
        GradCase("sub", proj(lambda a, b: a - b), [u(3, 4), u(3, 1)]),
        GradCase("mul", proj(lambda a, b: a * b), [u(2, 3, 4), u(3, 1)]),
        GradCase("neg", proj(lambda a: -a), [u(5)]),
        GradCase("sum", lambda a: a.sum(), [u(3, 4)]),
        GradCase("mean", lambda a: a.mean(), [u(3, 4)]),
        GradCase("relu", proj(ag.relu), [u(4, 5)]),
        GradCase("sigmoid", proj(ag.sigmoid), [u(4, 5) * 4]),
        GradCase("mean_over_axes", proj(lambda a: ag.mean_over_axes(a, (0, 2))), [u(2, 3, 4)]),
        GradCase("broadcast_mul", proj(lambda a, w: ag.broadcast_mul(a, w, 1)), [u(3, 4, 2), u(4)]),
        GradCase("broadcast_mul_batched", proj(lambda a, w: ag.broadcast_mul(a, w, 2)),
                 [u(2, 3, 4, 5), u(2, 4)]),
        GradCase("max_over_axis", proj(lambda a: ag.max_over_axis(a, 1)), [u(3, 5, 2)]),
        GradCase("affine", proj(ag.affine), [u(3, 5), u(4, 5), u(4)]),
        GradCase("concat", proj(lambda a, b: ag.concat([a, b])), [u(2, 3), u(2, 4)]),
        GradCase("flatten", proj(lambda a: ag.flatten(a, 1)), [u(2, 3, 4)]),
        GradCase("squeeze_last", proj(ag.squeeze_last), [u(4, 1)]),
        GradCase("take", proj(lambda a: ag.take(a, [2, 0, 2, 1])), [u(3, 2)]),
        GradCase("conv2d_same", proj(ag.conv2d_same), [u(5, 4, 3), u(2, 3, 3, 3), u(2)]),
        GradCase("conv2d_same_batched", proj(ag.conv2d_same), [u(2, 4, 5, 2), u(3, 1, 3, 2), u(3)]),
        GradCase("conv2d_same_column", proj(ag.conv2d_same), [u(2, 5, 4, 3), u(3, 3, 1, 3), u(3)]),
        GradCase("depthwise_conv2d_same", proj(ag.depthwise_conv2d_same),
                 [u(5, 4, 3), u(3, 3, 3), u(3)]),
        GradCase("depthwise_conv2d_same_batched", proj(ag.depthwise_conv2d_same),
                 [u(2, 6, 5, 2), u(2, 3, 3), u(2)]),
        GradCase("max_pool2d", proj(lambda a: ag.max_pool2d(a, (2, 3))), [u(2, 5, 7, 2)]),
    ]
    for axis, length in ((-3, 4), (-2, 5), (-1, 3)):
        hidden = max(1, -(-length // 2))
        cases.append(GradCase(
            f"squeeze_excite_axis{axis}",
            proj(lambda x, w1, b1, w2, b2, axis=axis: ag.squeeze_excite(x, axis, w1, b1, w2, b2)[0]),
            [u(2, 4, 5, 3), u(hidden, length), u(hidden), u(length, hidden), u(length)]))
    pairs = [PairSample(0, 1, 1), PairSample(2, 1, -1), PairSample(0, 3, -1), PairSample(3, 2, 1)]
    cases.append(GradCase(
        "weighted_hinge_loss",
        lambda s: weighted_hinge_loss(s, pairs, [0.5, 1.0, 0.25, 0.01], {i: i for i in range(4)}),
        [u(4) * 0.3]))
    return cases


def _randomised_params(cfg: ModelConfig, seed: int) -> ModelParams:
    # nonzero biases keep ReLU inputs off their kink where the input is all zeros
    rng = np.random.default_rng(seed + 7)
    params = init_params(cfg, seed)
    for t in params.tensors():
        t.data = t.data + rng.uniform(-0.1, 0.1, t.shape)
    return params


def _bind(names: Sequence[str], tensors: Sequence[Tensor]) -> ModelParams:
    """Parameters that are exactly the given tensors, so gradients land on them."""
    shared: dict[str, Tensor] = {}
    heads: dict[str, dict[str, Tensor]] = {}
    for name, t in zip(names, tensors):
        part, rest = name.split(".", 1)
        if part == "shared":
            shared[rest] = t
        else:
            major, key = rest.split(".", 1)
            heads.setdefault(major, {})[key] = t
    return ModelParams(shared, heads)


def model_cases(seed: int = 0, cfg: ModelConfig = TOY_CONFIG) -> list[GradCase]:
    """Gradients of the end-to-end score with respect to every parameter."""
    rng = np.random.default_rng(seed)
    # continuous inputs: binary ones create exact and near ties in the pooling
    # layers, where a finite difference straddles the kink
    x_one = Tensor(rng.uniform(-1.0, 1.0, cfg.input_shape))
    x_batch = Tensor(rng.uniform(-1.0, 1.0, (3,) + cfg.input_shape))
    majors = [cfg.majors[0], cfg.majors[-1], cfg.majors[0]]
    no_att = replace(cfg, attention_enabled=False)
    cases = []
    for label, c in (("", cfg), ("_no_attention", no_att)):
        arrays = _randomised_params(c, seed).to_arrays()
        names = list(arrays)

        def single(*ts, c=c, names=names):
            return model_forward(x_one, c.majors[0], _bind(names, ts), c)

        def batch(*ts, c=c, names=names):
            return _project(score_batch(x_batch, majors, _bind(names, ts), c), seed + 3)

        inputs = [arrays[n] for n in names]
        cases.append(GradCase(f"model_score{label}", single, inputs))
        cases.append(GradCase(f"model_score_batch{label}", batch, inputs))
    return cases


def run_suite(seed: int = 0, h: float = 1e-6, tol: float = 1e-4) -> list[CheckResult]:
    return [check_case(c, h, tol) for c in op_cases(seed) + model_cases(seed)]
