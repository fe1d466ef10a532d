"""Clean accuracy, attack success rate, model-level KL, similarity histograms
and the PAC-Bayes minimum-sample calculator."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datagen import Dataset, TriggerSpec, inject_trigger
from .model import DualEncoderModel, class_scores, pair_similarities, zero_shot_predict

PROB_FLOOR = 1e-12
DEFAULT_BINS = 50


class EvalError(ValueError):
    pass


class EmptyEvalSet(EvalError):
    pass


class TargetClassInEvalSet(EvalError):
    pass


class ContaminatedEvalSet(EvalError):
    pass


class EmptyIndexSet(EvalError):
    pass


class InvalidPacInputs(EvalError):
    pass


# ---------------------------------------------------------------- CA / ASR / KL

def _require(ds: Dataset) -> None:
    if len(ds) == 0:
        raise EmptyEvalSet("evaluation set is empty")


def clean_accuracy(model: DualEncoderModel, eval_set: Dataset, prompts) -> float:
    """Fraction of untriggered samples whose zero-shot prediction is the true class."""
    _require(eval_set)
    if eval_set.poisoned.any():
        raise ContaminatedEvalSet("clean accuracy needs an unpoisoned evaluation set")
    return float(np.mean(zero_shot_predict(model, eval_set.images, prompts) == eval_set.labels))


def non_target(eval_set: Dataset, target_class: int) -> Dataset:
    """The samples whose true class differs from ``target_class``."""
    return eval_set.subset(np.flatnonzero(eval_set.labels != target_class))


def attack_success_rate(model: DualEncoderModel, eval_set: Dataset, spec: TriggerSpec,
                        prompts) -> float:
    """Fraction of triggered non-target samples classified as the target class."""
    _require(eval_set)
    if np.any(eval_set.labels == spec.target_class):
        raise TargetClassInEvalSet(f"evaluation set contains target class {spec.target_class}")
    pred = zero_shot_predict(model, inject_trigger(eval_set.images, spec), prompts)
    return float(np.mean(pred == spec.target_class))


def softmax(scores: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, floor: float = PROB_FLOOR) -> np.ndarray:
    """Row-wise KL(p || q) with both distributions floored before the log."""
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def predictive_distribution(model: DualEncoderModel, images, prompts) -> np.ndarray:
    return softmax(class_scores(model, images, prompts), model.tau)


def model_kl(model_a: DualEncoderModel, model_b: DualEncoderModel, eval_set: Dataset,
             prompts) -> float:
    """Mean per-sample KL(p_a || p_b) between zero-shot class distributions."""
    _require(eval_set)
    pa = predictive_distribution(model_a, eval_set.images, prompts)
    pb = predictive_distribution(model_b, eval_set.images, prompts)
    # Floor round-off: identical inputs give exactly zero, tiny negatives are noise.
    return float(max(0.0, np.mean(kl_divergence(pa, pb))))


# ---------------------------------------------------------------- histograms

@dataclass
class HistogramExport:
    edges: np.ndarray             # bins + 1 edges spanning [-1, 1]
    density_backdoor: np.ndarray  # fraction of backdoor pairs per bin
    density_clean: np.ndarray
    count_backdoor: int
    count_clean: int

    @property
    def bins(self) -> int:
        return len(self.edges) - 1

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "density_backdoor", "density_clean"])
            for i in range(self.bins):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            repr(float(self.density_backdoor[i])),
                            repr(float(self.density_clean[i]))])


def histogram_from_similarities(sims, is_backdoor, bins: int = DEFAULT_BINS) -> HistogramExport:
    """Normalized per-group bin fractions over ``bins`` uniform bins on [-1, 1].

    An empty group gets an all-zero density row.
    """
    if bins < 2:
        raise EvalError("need at least 2 bins")
    sims = np.clip(np.asarray(sims, dtype=np.float64), -1.0, 1.0)
    flag = np.asarray(is_backdoor, dtype=bool)
    if len(sims) == 0:
        raise EmptyIndexSet("no pairs to histogram")
    edges = np.linspace(-1.0, 1.0, bins + 1)

    def density(values):
        counts, _ = np.histogram(values, bins=edges)
        return counts / counts.sum() if counts.sum() else counts.astype(np.float64)

    return HistogramExport(edges, density(sims[flag]), density(sims[~flag]),
                           int(flag.sum()), int((~flag).sum()))


def similarity_histogram(model: DualEncoderModel, ds: Dataset, indices=None, poison_mask=None,
                         bins: int = DEFAULT_BINS) -> HistogramExport:
    """Histogram of S(I_i, T_i) over ``indices``; ``poison_mask`` is per dataset row."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise EmptyIndexSet("index set is empty")
    mask = ds.poisoned if poison_mask is None else np.asarray(poison_mask, dtype=bool)
    sims = pair_similarities(model, ds.images[idx], ds.captions[idx])
    return histogram_from_similarities(sims, mask[idx], bins)


# ---------------------------------------------------------------- PAC-Bayes

@dataclass(frozen=True)
class PacInputs:
    kl_q: float
    c0: float = 1.0
    r: float = 1.0
    eps: float = 0.5
    delta: float = 0.05

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.kl_q, self.c0, self.r, self.eps, self.delta)):
            raise InvalidPacInputs("PAC inputs must be finite")
        if self.kl_q < 0:
            raise InvalidPacInputs("kl_q must be nonnegative")
        if self.r <= 0:
            raise InvalidPacInputs("r must be positive")
        if not 0.0 < self.eps < 1.0:
            raise InvalidPacInputs("eps must lie in (0, 1)")
        if not 0.0 < self.delta < 1.0:
            raise InvalidPacInputs("delta must lie in (0, 1)")


def _pac_base(inputs: PacInputs) -> float:
    num = inputs.kl_q + inputs.c0
    if num <= 0:
        raise InvalidPacInputs("kl_q + c0 must be positive")
    return num


def pac_min_samples(inputs: PacInputs) -> float:
    """N0 = ((kl_q + c0) / (2 r^2))^(1/eps) + 1/2, the published closed form."""
    return (_pac_base(inputs) / (2.0 * inputs.r ** 2)) ** (1.0 / inputs.eps) + 0.5


def pac_sufficient_samples(inputs: PacInputs) -> float:
    """Exact solution of sqrt((kl_q + c0) / (2n - 1)^eps) <= r for n.

    n >= ((kl_q + c0) / r^2)^(1/eps) / 2 + 1/2.  The published closed form
    places the 2 inside the power, which undershoots whenever the base > 1.
    """
    return 0.5 * (_pac_base(inputs) / inputs.r ** 2) ** (1.0 / inputs.eps) + 0.5


def relaxed_bound(kl_q: float, c0: float, n: float, eps: float) -> float:
    """sqrt((kl_q + c0) / (2n - 1)^eps), the bound after the lemma's relaxation."""
    if n < 1:
        raise InvalidPacInputs("n must be at least 1")
    return math.sqrt((kl_q + c0) / (2.0 * n - 1.0) ** eps)


def pac_bound_rhs(kl_q: float, n: int, delta: float) -> float:
    """sqrt((kl_q + log((n + 2) / delta)) / (2n - 1))."""
    if kl_q < 0 or not math.isfinite(kl_q):
        raise InvalidPacInputs("kl_q must be finite and nonnegative")
    if n < 1:
        raise InvalidPacInputs("n must be at least 1")
    if not 0.0 < delta < 1.0:
        raise InvalidPacInputs("delta must lie in (0, 1)")
    return math.sqrt((kl_q + math.log((n + 2) / delta)) / (2 * n - 1))


def lemma_holds(n: int, eps: float) -> bool:
    """log(n+2)/(2n-1) <= (2n-1)^(-eps), compared in log space so huge n never overflow."""
    return (1.0 - eps) * math.log(2 * n - 1) >= math.log(math.log(n + 2))


def _slope_ratio(n: int) -> float:
    # The gap h(n) = (1-eps) log(2n-1) - log log(n+2) grows exactly where
    # this ratio is at least 1 / (2 (1 - eps)).
    return (n + 2) * math.log(n + 2) / (2 * n - 1)


# The ratio falls from n = 1 to a single minimum, then grows without bound.
_RATIO_ARGMIN = min(range(1, 64), key=_slope_ratio)


def _first_true(pred, lo: int, hi: int | None = None) -> int:
    """Smallest n >= lo with pred(n), for pred monotone (False...True) from lo on.

    Without ``hi`` the upper end is found by doubling.
    """
    if pred(lo):
        return lo
    if hi is None:
        hi = max(2 * lo, lo + 1)
        while not pred(hi):
            lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def lemma_crossover_n(eps: float) -> int:
    """Smallest N >= 1 with log(n+2)/(2n-1) <= (2n-1)^(-eps) for every n >= N.

    The gap between the two sides (in log form) is negative at n = 1 and
    may rise, dip below zero again and finally grow without bound, so the
    answer is the last upward crossing.  Monotone pieces are located from
    the gap's derivative and searched by doubling plus integer bisection,
    which keeps eps close to 1 (answers with thousands of digits) cheap.
    """
    if not 0.0 < eps < 1.0:
        raise InvalidPacInputs("eps must lie in (0, 1)")
    holds = lambda n: lemma_holds(n, eps)  # noqa: E731
    c = 1.0 / (2.0 * (1.0 - eps))
    if _slope_ratio(_RATIO_ARGMIN) >= c:
        return _first_true(holds, 1)  # gap nondecreasing everywhere
    # Gap rises on [1, n0], falls on [n0, n1], rises again from n1 on.
    n1 = _first_true(lambda n: _slope_ratio(n) >= c, _RATIO_ARGMIN)
    if not holds(n1):
        return _first_true(holds, n1)
    rising = [n for n in range(1, _RATIO_ARGMIN + 1) if _slope_ratio(n) >= c]
    n0 = rising[-1] + 1 if rising else 1
    return _first_true(holds, 1, n0) if holds(n0) else n1


# ---------------------------------------------------------------- records

@dataclass
class MetricsRecord:
    stage: str
    seed: int
    ca: float
    asr: float
    kl_to_retrain: float | None = None
    timestamp: float = 0.0

    FIELDS = ("stage", "seed", "ca", "asr", "kl_to_retrain", "timestamp")

    def __post_init__(self):
        if not (0.0 <= self.ca <= 1.0 and 0.0 <= self.asr <= 1.0):
            raise EvalError("ca and asr must lie in [0, 1]")
        if self.kl_to_retrain is not None and self.kl_to_retrain < 0:
            raise EvalError("kl_to_retrain must be nonnegative")

    def row(self) -> list[str]:
        d = asdict(self)
        return ["" if d[k] is None else (repr(d[k]) if isinstance(d[k], float) else str(d[k]))
                for k in self.FIELDS]


def append_metrics(path, record: MetricsRecord, stamp: bool = True) -> None:
    """Append one row to a metrics CSV, writing the header on first use."""
    if stamp and not record.timestamp:
        record.timestamp = time.time()
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(MetricsRecord.FIELDS)
        w.writerow(record.row())


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
