"""UBT defense pipeline plus the ABL, clean fine-tune and retrain baselines.

Pipeline: rank all pairs by similarity under a clean reference model and take
the lowest as the suspicious set, overfit the poisoned model on it, keep the
k most similar suspicious pairs, expand them by Cartesian product plus
token-masked captions, and minimize similarity over that unlearn set.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datagen import PAD_ID, Dataset
from .model import DualEncoderModel, EmptyCaption, pair_similarities
from .objectives import LossReport, PairView, TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_MASK_THRESHOLD = 0.1
DEFAULT_POISON_GATE = 0.8
KEEP = math.inf  # attribution sentinel for tokens that can never be dropped


class InvalidCount(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


def suspicious_count(n: int, fraction: float = 0.01) -> int:
    return max(1, int(round(n * fraction)))


def topk_count(n: int, fraction: float = 0.01) -> int:
    """k = round(sqrt(|D| * fraction)), at least 1."""
    return max(1, int(round(math.sqrt(n * fraction))))


# ---------------------------------------------------------------- selection

@dataclass
class PartitionResult:
    susp_indices: np.ndarray     # ascending similarity, ties by index
    normal_indices: np.ndarray   # ascending index
    similarities: np.ndarray     # per dataset index, under the reference model

    def write_csv(self, path) -> None:
        susp = set(self.susp_indices.tolist())
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "role", "similarity"])
            for i, s in enumerate(self.similarities):
                w.writerow([i, "susp" if i in susp else "normal", repr(float(s))])


@dataclass
class TopkResult:
    topk_indices: np.ndarray     # descending similarity, ties by index
    similarities: np.ndarray     # aligned with the partition's susp_indices

    def write_csv(self, path, partition: PartitionResult) -> None:
        chosen = set(self.topk_indices.tolist())
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "selected", "overfit_similarity"])
            for i, s in zip(partition.susp_indices, self.similarities):
                w.writerow([int(i), int(i in chosen), repr(float(s))])


def partition_suspicious(reference_model: DualEncoderModel, ds: Dataset, s_susp: int) -> PartitionResult:
    """Lowest-similarity ``s_susp`` pairs under the reference model are suspicious."""
    if not 1 <= s_susp < len(ds):
        raise InvalidCount(f"s_susp must lie in [1, {len(ds)}), got {s_susp}")
    sims = pair_similarities(reference_model, ds.images, ds.captions)
    order = np.lexsort((np.arange(len(ds)), sims))
    susp = order[:s_susp]
    normal = np.sort(order[s_susp:])
    return PartitionResult(susp.astype(np.int64), normal.astype(np.int64), sims)


def select_topk(overfit_model: DualEncoderModel, ds: Dataset, partition: PartitionResult,
                k: int) -> TopkResult:
    """The k suspicious pairs the overfit model scores highest."""
    susp = partition.susp_indices
    if not 1 <= k <= len(susp):
        raise InvalidCount(f"k must lie in [1, {len(susp)}], got {k}")
    sims = pair_similarities(overfit_model, ds.images[susp], ds.captions[susp])
    order = np.lexsort((susp, -sims))
    return TopkResult(susp[order[:k]].astype(np.int64), sims)


def overfit_stage(poisoned_model: DualEncoderModel, ds: Dataset, partition: PartitionResult,
                  cfg: TrainConfig) -> tuple[DualEncoderModel, LossReport]:
    views = (PairView.from_dataset(ds, partition.susp_indices),
             PairView.from_dataset(ds, partition.normal_indices))
    return train(poisoned_model, views, "overfit", cfg, stage="overfit")


# ---------------------------------------------------------------- token masks

def _tokens(caption) -> np.ndarray:
    caption = np.asarray(caption, dtype=np.int64)
    return caption[caption != PAD_ID]


def _pad(tokens, length: int) -> np.ndarray:
    out = np.full(length, PAD_ID, dtype=np.int64)
    out[:len(tokens)] = tokens
    return out


def token_attribution(model: DualEncoderModel, image, caption) -> np.ndarray:
    """Leave-one-token-out occlusion scores for the caption's non-pad tokens.

    score[t] = S(image, caption) - S(image, caption without token t).  A
    single-token caption cannot be occluded; its token scores ``inf``.
    """
    caption = np.asarray(caption, dtype=np.int64)
    tokens = _tokens(caption)
    if len(tokens) == 0:
        raise EmptyCaption("caption has no non-pad tokens")
    if len(tokens) == 1:
        return np.array([KEEP])
    variants = [caption] + [_pad(np.delete(tokens, t), len(caption)) for t in range(len(tokens))]
    images = np.repeat(np.asarray(image)[None], len(variants), axis=0)
    sims = pair_similarities(model, images, np.stack(variants))
    return sims[0] - sims[1:]


def build_mask(caption, scores, threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Keep tokens scoring above ``threshold`` in order; fall back to the argmax token."""
    caption = np.asarray(caption, dtype=np.int64)
    tokens = _tokens(caption)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(tokens):
        raise ValueError(f"{len(scores)} scores for {len(tokens)} tokens")
    keep = scores > threshold
    if not keep.any():
        keep[int(np.argmax(scores))] = True
    return _pad(tokens[keep], len(caption))


@dataclass
class UnlearnSet:
    pairs: list[tuple[int, int]]
    masked_pairs: list[tuple[int, np.ndarray]]
    include_masks: bool = True

    def __len__(self) -> int:
        return len(self.pairs) + (len(self.masked_pairs) if self.include_masks else 0)

    def view(self, ds: Dataset) -> PairView:
        img = [i for i, _ in self.pairs]
        cap = [ds.captions[j] for _, j in self.pairs]
        if self.include_masks:
            img += [i for i, _ in self.masked_pairs]
            cap += [c for _, c in self.masked_pairs]
        return PairView(ds.images[np.array(img, dtype=np.int64)], np.stack(cap))

    def write_csv(self, path, ds: Dataset) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "image_index", "caption_index", "token_ids"])
            for (i, j), (_, masked) in zip(self.pairs, self.masked_pairs):
                w.writerow(["pair", i, j, " ".join(map(str, _tokens(ds.captions[j])))])
                w.writerow(["masked", i, j, " ".join(map(str, _tokens(masked)))])


def build_unlearn_set(ds: Dataset, topk: TopkResult, model: DualEncoderModel,
                      threshold: float = DEFAULT_MASK_THRESHOLD,
                      include_masks: bool = True) -> UnlearnSet:
    """All k^2 (image_i, caption_j) combinations plus one masked variant of each.

    ``model`` should be the poisoned model: masks are attributed under it.
    """
    idx = [int(i) for i in topk.topk_indices]
    if not idx:
        raise InvalidCount("top-k set is empty")
    pairs, masked = [], []
    for i in idx:
        for j in idx:
            scores = token_attribution(model, ds.images[i], ds.captions[j])
            pairs.append((i, j))
            masked.append((i, build_mask(ds.captions[j], scores, threshold)))
    return UnlearnSet(pairs, masked, include_masks)


# ---------------------------------------------------------------- UBT

@dataclass
class UBTConfig:
    s_susp: int
    k: int
    overfit: TrainConfig
    unlearn: TrainConfig
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    poison_gate: float | None = DEFAULT_POISON_GATE
    include_masks: bool = True


@dataclass
class UBTResult:
    model: DualEncoderModel
    partition: PartitionResult | None = None
    overfit_model: DualEncoderModel | None = None
    topk: TopkResult | None = None
    unlearn_set: UnlearnSet | None = None
    gate_similarity: float = float("nan")
    refused: bool = False
    reports: dict[str, LossReport] = field(default_factory=dict)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (nc.NumcoreError, ValueError, RuntimeError) as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc


def ubt_defend(poisoned_model: DualEncoderModel, reference_model: DualEncoderModel,
               ds: Dataset, cfg: UBTConfig) -> UBTResult:
    """Run the full pipeline; refuse (model unchanged) when the poison gate fails."""
    partition = _stage("partition", partition_suspicious, reference_model, ds, cfg.s_susp)
    overfit_model, of_report = _stage("overfit", overfit_stage, poisoned_model, ds, partition, cfg.overfit)
    topk = _stage("topk", select_topk, overfit_model, ds, partition, cfg.k)
    uset = _stage("unlearn_set", build_unlearn_set, ds, topk, poisoned_model,
                  cfg.mask_threshold, cfg.include_masks)
    view = uset.view(ds)
    gate = float(np.mean(pair_similarities(poisoned_model, view.images, view.captions)))
    result = UBTResult(poisoned_model, partition, overfit_model, topk, uset, gate,
                       reports={"overfit": of_report})
    if cfg.poison_gate is not None and gate < cfg.poison_gate:
        log.info("poison gate refused unlearning: mean similarity %.4f < %.4f", gate, cfg.poison_gate)
        result.refused = True
        return result
    model, ul_report = _stage("unlearn", train, poisoned_model, view, "unlearn", cfg.unlearn, stage="unlearn")
    result.model = model
    result.reports["unlearn"] = ul_report
    return result


# ---------------------------------------------------------------- baselines

def abl_defend(poisoned_model: DualEncoderModel, ds: Dataset, partition: PartitionResult,
               cfg: TrainConfig) -> tuple[DualEncoderModel, LossReport]:
    """Gradient ascent of the contrastive loss over the whole suspicious set."""
    cfg = TrainConfig(cfg.batch_size, cfg.learning_rate, cfg.epochs, cfg.seed, "ascend",
                      cfg.shuffle, cfg.overfit_weight)
    return train(poisoned_model, PairView.from_dataset(ds, partition.susp_indices),
                 "contrastive", cfg, stage="abl")


def clean_finetune_defend(poisoned_model: DualEncoderModel, clean_ds: Dataset,
                          cfg: TrainConfig) -> tuple[DualEncoderModel, LossReport]:
    if clean_ds.poisoned.any():
        raise ValueError("clean fine-tune set contains poisoned samples")
    return train(poisoned_model, PairView.from_dataset(clean_ds), "contrastive", cfg, stage="cleanft")


def retrain_oracle(initial_model: DualEncoderModel, clean_ds: Dataset,
                   cfg: TrainConfig) -> tuple[DualEncoderModel, LossReport]:
    """Train from ``initial_model`` on clean data only (the unlearning gold standard)."""
    if clean_ds.poisoned.any():
        raise ValueError("retrain data must exclude every poisoned sample")
    return train(initial_model, PairView.from_dataset(clean_ds), "contrastive", cfg, stage="retrain")
