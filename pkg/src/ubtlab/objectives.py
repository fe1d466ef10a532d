"""Contrastive, overfitting and unlearning losses and the shared SGD loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .model import DualEncoderModel, pair_similarity, similarity_tensor

log = logging.getLogger(__name__)

LOSS_KINDS = ("contrastive", "overfit", "unlearn")


class TrainingError(Exception):
    """Wraps a numeric failure with the stage and batch where it happened."""

    def __init__(self, stage: str, epoch: int, batch: int, cause: Exception):
        super().__init__(f"{stage}: epoch {epoch} batch {batch}: {cause}")
        self.stage, self.epoch, self.batch, self.cause = stage, epoch, batch, cause


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-2
    epochs: int = 30
    seed: int = 0
    direction: str = "descend"
    shuffle: bool = True
    overfit_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError(f"invalid TrainConfig {self}")
        if self.direction not in ("descend", "ascend"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class LossReport:
    stage: str = ""
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, epoch: int, term: str, value: float) -> None:
        if not np.isfinite(value):
            raise nc.NonFiniteValue(f"{self.stage}: {term} at epoch {epoch} is not finite")
        self.rows.append((epoch, term, float(value)))

    def series(self, term: str) -> list[float]:
        return [v for _, t, v in self.rows if t == term]

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not (append and path.exists())
        with path.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["stage", "epoch", "term", "value"])
            for epoch, term, value in self.rows:
                w.writerow([self.stage, epoch, term, repr(value)])


@dataclass
class PairView:
    """Row-aligned images and captions fed to one loss role."""

    images: np.ndarray
    captions: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.captions):
            raise ValueError("images and captions must be row-aligned")

    def __len__(self) -> int:
        return len(self.images)

    def take(self, idx) -> "PairView":
        return PairView(self.images[idx], self.captions[idx])

    @classmethod
    def from_dataset(cls, ds, indices=None) -> "PairView":
        idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
        return cls(ds.images[idx], ds.captions[idx])


# ---------------------------------------------------------------- losses

def info_nce_loss(sim, tau: float) -> nc.Tensor:
    """Symmetric in-batch InfoNCE over an (N, N) similarity matrix.

    Row i scores image i against every caption; column j scores caption j
    against every image.  Returns ``-(1/2N) * (sum_i log softmax_row(i, i)
    + sum_j log softmax_col(j, j))``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    sim = nc.as_tensor(sim)
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n or n < 1:
        raise nc.ShapeMismatch(f"InfoNCE needs a square matrix, got {sim.shape}")
    logits = sim * (1.0 / tau)
    diag = nc.diagonal(logits)
    rows = nc.total(diag - nc.logsumexp(logits, axis=1))
    cols = nc.total(diag - nc.logsumexp(logits, axis=0))
    loss = (rows + cols) * (-1.0 / (2 * n))
    if not np.isfinite(loss.data):
        raise nc.NonFiniteValue("InfoNCE loss is not finite")
    return loss


def contrastive_loss(p, batch: PairView, tau: float) -> nc.Tensor:
    return info_nce_loss(similarity_tensor(p, batch.images, batch.captions), tau)


def overfit_terms(p, susp: PairView, normal: PairView, tau: float) -> tuple[nc.Tensor, nc.Tensor]:
    """(mean (S - 1)^2 over suspicious pairs, InfoNCE over normal pairs)."""
    if len(susp) == 0 or len(normal) == 0:
        raise ValueError("overfit loss needs non-empty suspicious and normal batches")
    s = pair_similarity(p, susp.images, susp.captions)
    pull = nc.mean(nc.square(s - 1.0))
    return pull, contrastive_loss(p, normal, tau)


def overfit_loss(p, susp: PairView, normal: PairView, tau: float, weight: float = 1.0) -> nc.Tensor:
    pull, reg = overfit_terms(p, susp, normal, tau)
    return pull * weight + reg


def unlearn_loss(p, batch: PairView) -> nc.Tensor:
    """Mean cosine similarity of the batch's pairs; minimizing it separates them."""
    if len(batch) == 0:
        raise ValueError("unlearn loss needs a non-empty batch")
    return nc.mean(pair_similarity(p, batch.images, batch.captions))


# ---------------------------------------------------------------- training

def _batches(n: int, batch_size: int, rng, shuffle: bool) -> list[np.ndarray]:
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: DualEncoderModel, view, loss_kind: str, cfg: TrainConfig,
          stage: str | None = None) -> tuple[DualEncoderModel, LossReport]:
    """Run ``cfg.epochs`` of minibatch SGD and return a new model plus losses.

    ``view`` is a PairView for ``contrastive`` and ``unlearn``; for ``overfit``
    it is a ``(susp, normal)`` pair of PairViews.  An overfit epoch walks the
    normal view once; each step pairs a normal batch with the next chunk of the
    (cycled) suspicious view.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    stage = stage or loss_kind
    report = LossReport(stage)
    if cfg.epochs == 0:
        return model, report
    if loss_kind == "overfit":
        susp, normal = view
        if len(susp) == 0 or len(normal) == 0:
            raise ValueError("overfit training needs suspicious and normal views")
        main = normal
    else:
        if len(view) == 0:
            raise ValueError(f"{loss_kind} training needs a non-empty view")
        main = view

    rng = np.random.default_rng([cfg.seed, 11])
    params = model.params.copy()
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        steps = 0
        batches = _batches(len(main), cfg.batch_size, rng, cfg.shuffle)
        if loss_kind == "overfit":
            susp_order = rng.permutation(len(susp)) if cfg.shuffle else np.arange(len(susp))
            chunk = min(cfg.batch_size, len(susp))
        for b, idx in enumerate(batches):
            try:
                with nc.GradTape() as tape:
                    p = tape.watch(params)
                    if loss_kind == "contrastive":
                        loss = contrastive_loss(p, main.take(idx), model.tau)
                        terms = {"infonce": loss.item()}
                    elif loss_kind == "unlearn":
                        loss = unlearn_loss(p, main.take(idx))
                        terms = {"similarity": loss.item()}
                    else:
                        start = (b * chunk) % len(susp)
                        sidx = np.take(susp_order, range(start, start + chunk), mode="wrap")
                        pull, reg = overfit_terms(p, susp.take(sidx), normal.take(idx), model.tau)
                        loss = pull * cfg.overfit_weight + reg
                        terms = {"susp_mse": pull.item(), "infonce": reg.item()}
                    grads = nc.backward(tape, loss)
                params = nc.sgd_step(params, grads, cfg.learning_rate, cfg.direction)
            except nc.NumcoreError as exc:
                raise TrainingError(stage, epoch, b, exc) from exc
            terms["total"] = loss.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        for k, v in sums.items():
            report.add(epoch, k, v / steps)
        log.debug("%s epoch %d total %.5f", stage, epoch, sums["total"] / steps)
    return model.with_params(params), report
