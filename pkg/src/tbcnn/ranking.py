"""Top-k focused pair weights, the pairwise hinge loss, and ranking metrics.

Rankings are ascending in performance: position 1 is the worst student of a
major, so the "top-k" of a ranking are the k students most at risk.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor, concat, flatten, relu, take

logger = logging.getLogger(__name__)

StudentId = int


@dataclass(frozen=True)
class LossConfig:
    k: int = 10
    eta: float = 0.01

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")


@dataclass(frozen=True)
class Ranking:
    """A bijection from students onto positions ``1..n``.

    Used both for true rankings (built from GPA) and predicted rankings
    (built from model scores).
    """

    positions: Mapping[StudentId, int]
    major: str | None = None

    def __post_init__(self):
        n = len(self.positions)
        if sorted(self.positions.values()) != list(range(1, n + 1)):
            raise ValueError("ranking positions must be a permutation of 1..n")

    @property
    def n(self) -> int:
        return len(self.positions)

    def __getitem__(self, student: StudentId) -> int:
        return self.positions[student]

    def __contains__(self, student) -> bool:
        return student in self.positions

    def students(self) -> list[StudentId]:
        return sorted(self.positions)

    def ordered(self) -> list[StudentId]:
        """Students from position 1 (worst) upward."""
        return sorted(self.positions, key=self.positions.__getitem__)

    def top(self, k: int) -> set[StudentId]:
        return {s for s, p in self.positions.items() if p <= k}

    @classmethod
    def from_values(cls, values: Mapping[StudentId, float], major: str | None = None) -> Ranking:
        """Sort ascending by value; ties go to the smaller student id."""
        order = sorted(values, key=lambda s: (values[s], s))
        return cls({s: i + 1 for i, s in enumerate(order)}, major)


TrueRanking = Ranking
PredictedRanking = Ranking


def true_ranking(gpas: Mapping[StudentId, float], major: str | None = None) -> Ranking:
    return Ranking.from_values(gpas, major)


def predicted_ranking(scores: Mapping[StudentId, float]) -> Ranking:
    """Lowest score takes position 1 (predicted worst); ties go to the smaller id."""
    if not scores:
        raise ValueError("cannot rank an empty score map")
    return Ranking.from_values(scores)


# pair weights -----------------------------------------------------------------------

def gain(r_u: int, n_s: int) -> int:
    if not 1 <= r_u <= n_s:
        raise ValueError(f"position {r_u} outside 1..{n_s}")
    return n_s - r_u + 1


def delta_dcg(r_u: int, r_v: int, n_s: int | None = None) -> float:
    """Absolute DCG change when the students at ``r_u`` and ``r_v`` swap places."""
    if r_u == r_v:
        raise ValueError(f"exchange of a position with itself ({r_u}) is undefined")
    if min(r_u, r_v) < 1 or (n_s is not None and max(r_u, r_v) > n_s):
        raise ValueError(f"positions ({r_u}, {r_v}) outside 1..{n_s}")
    return abs((r_v - r_u) * (1.0 / math.log2(1 + r_u) - 1.0 / math.log2(1 + r_v)))


def delta_dcg_max(n_s: int) -> float:
    """DCG change from swapping the first and last of ``n_s`` students."""
    if n_s < 2:
        raise ValueError(f"need at least 2 students, got {n_s}")
    return (n_s - 1) * (1.0 - 1.0 / math.log2(1 + n_s))


def pair_weight(r_u: int, r_v: int, n_s: int, cfg: LossConfig = LossConfig()) -> float:
    """Normalised DCG change when the pair touches the top-k, ``eta`` otherwise."""
    d = delta_dcg(r_u, r_v, n_s)
    if min(r_u, r_v) <= cfg.k:
        return d / delta_dcg_max(n_s)
    return cfg.eta


# pairs and the loss ----------------------------------------------------------------

@dataclass(frozen=True)
class PairSample:
    """``y = +1`` means ``u`` performs better than ``v`` (``r(u) > r(v)``)."""

    u: StudentId
    v: StudentId
    y: int
    major: str | None = None

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"a pair needs two distinct students, got {self.u} twice")
        if self.y not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.y}")


def pair_weights(pairs: Sequence[PairSample], truth: Ranking, cfg: LossConfig) -> list[float]:
    return [pair_weight(truth[p.u], truth[p.v], truth.n, cfg) for p in pairs]


def hinge_terms(f_u: Tensor, f_v: Tensor, y: np.ndarray) -> Tensor:
    """Per-pair ``max(0, y (f_v - f_u) + 1)``."""
    return relu((f_v - f_u) * y + 1.0)


def weighted_hinge_loss(scores: Mapping[StudentId, Tensor] | Tensor,
                        pairs: Sequence[PairSample],
                        weights: Sequence[float] | None = None,
                        index: Mapping[StudentId, int] | None = None) -> Tensor:
    """Mean over pairs of ``w * max(0, y (f_v - f_u) + 1)``.

    ``scores`` is either a map from student to scalar tensor, or one score
    vector together with ``index`` mapping students to its rows. Unit weights
    give the plain pairwise hinge loss.
    """
    if not pairs:
        raise ValueError("no pairs to score")
    if weights is None:
        weights = [1.0] * len(pairs)
    if len(weights) != len(pairs):
        raise ValueError(f"{len(weights)} weights for {len(pairs)} pairs")
    if isinstance(scores, Tensor):
        if index is None:
            raise ValueError("a score vector needs an index from student to row")
        vec, rows = scores, index
    else:
        students = sorted(scores)
        vec = concat([flatten(scores[s]) for s in students])
        rows = {s: i for i, s in enumerate(students)}
    for p in pairs:
        for s in (p.u, p.v):
            if s not in rows:
                raise KeyError(f"no score for student {s}")
    f_u = take(vec, [rows[p.u] for p in pairs])
    f_v = take(vec, [rows[p.v] for p in pairs])
    y = np.array([p.y for p in pairs], dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return (hinge_terms(f_u, f_v, y) * w).mean()


# metrics ---------------------------------------------------------------------------

def pairwise_accuracy(scores: Mapping[StudentId, float], truth: Ranking) -> float:
    """Fraction of unordered pairs whose score order matches the true order.

    A tied score pair counts as an error.
    """
    students = truth.students()
    if len(students) < 2:
        raise ValueError("pairwise accuracy needs at least 2 students")
    missing = [s for s in students if s not in scores]
    if missing:
        raise KeyError(f"no score for students {missing[:5]}")
    f = np.array([scores[s] for s in students], dtype=np.float64)
    r = np.array([truth[s] for s in students], dtype=np.float64)
    iu = np.triu_indices(len(students), k=1)
    ds = np.sign(f[:, None] - f[None, :])[iu]
    dr = np.sign(r[:, None] - r[None, :])[iu]
    return float(np.mean(ds == dr))


def _same_students(pred: Ranking, truth: Ranking) -> None:
    if set(pred.positions) != set(truth.positions):
        raise ValueError("predicted and true rankings cover different students")


def spearman(pred: Ranking, truth: Ranking) -> float:
    _same_students(pred, truth)
    n = truth.n
    if n < 2:
        raise ValueError("Spearman's rho needs at least 2 students")
    d2 = sum((pred[s] - truth[s]) ** 2 for s in truth.positions)
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def precision_at_k(pred: Ranking, truth: Ranking, k: int) -> float:
    _same_students(pred, truth)
    if not 1 <= k <= truth.n:
        raise ValueError(f"k={k} outside 1..{truth.n}")
    return len(pred.top(k) & truth.top(k)) / k


# reports --------------------------------------------------------------------------

METRIC_KEYS = ("acc", "rho", "p_at_10", "p_at_20")


@dataclass
class MetricsReport:
    """Per-major metrics and their unweighted mean over majors.

    A metric a major cannot support (p@k with fewer than k students) is None.
    """

    per_major: dict[str, dict[str, float | None]] = field(default_factory=dict)

    @property
    def macro(self) -> dict[str, float | None]:
        return macro_average(self.per_major)

    def to_dict(self) -> dict:
        out = {m: dict(v) for m, v in sorted(self.per_major.items())}
        out["macro"] = self.macro
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> MetricsReport:
        return cls({m: dict(v) for m, v in d.items() if m != "macro"})

    def is_complete(self) -> bool:
        """Every metric is present for every major that is large enough to support it."""
        if not self.per_major:
            return False
        for row in self.per_major.values():
            n = row.get("n")
            for key in METRIC_KEYS:
                small = key.startswith("p_at_") and n is not None and n < int(key[5:])
                if row.get(key) is None and not small:
                    return False
        return all(self.macro[k] is not None for k in ("acc", "rho"))


def macro_average(per_major: Mapping[str, Mapping[str, float | None]]) -> dict[str, float | None]:
    if not per_major:
        raise ValueError("no majors to average")
    out: dict[str, float | None] = {}
    for key in METRIC_KEYS:
        vals = [m[key] for m in per_major.values() if m.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def major_metrics(scores: Mapping[StudentId, float], truth: Ranking,
                  ks: Sequence[int] = (10, 20), warn: bool = True) -> dict[str, float | None]:
    """Acc, rho and p@k of one major; ``n`` records how many students were ranked."""
    pred = predicted_ranking({s: scores[s] for s in truth.positions})
    row: dict[str, float | None] = {
        "n": truth.n,
        "acc": pairwise_accuracy(scores, truth),
        "rho": spearman(pred, truth),
    }
    for k in ks:
        if truth.n < max(k, 2):
            if warn:
                logger.warning("major %s has %d students; p@%d omitted", truth.major, truth.n, k)
            row[f"p_at_{k}"] = None
        else:
            row[f"p_at_{k}"] = precision_at_k(pred, truth, k)
    return row
