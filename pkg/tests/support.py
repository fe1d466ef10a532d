"""Helpers shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import functools

import numpy as np

from ubtlab import numcore as nc
from ubtlab import objectives as obj
from ubtlab.config import ExperimentConfig
from ubtlab.datagen import PAD_ID
from ubtlab.model import init_model
from ubtlab.pipeline import run_pipeline

GRAD_TOL = 1e-4


def tiny_model(seed: int, image_size: int = 3, vocab: int = 8, hidden: int = 4, embed: int = 3,
               tau: float = 0.5):
    return init_model(image_size, vocab, hidden=hidden, embed_dim=embed, tau=tau, seed=seed)


def random_pairs(rng, n: int, image_size: int = 3, vocab: int = 8, length: int = 4) -> obj.PairView:
    images = rng.random((n, image_size, image_size))
    captions = np.full((n, length), PAD_ID, dtype=np.int64)
    for i in range(n):
        k = rng.integers(1, length + 1)
        captions[i, :k] = rng.integers(1, vocab, size=k)
    return obj.PairView(images, captions)


def loss_fn(kind: str, batch, tau: float, susp=None):
    """Scalar loss over a parameter mapping for one of the three objectives."""
    def fn(p):
        if kind == "infonce":
            return obj.contrastive_loss(p, batch, tau)
        if kind == "overfit":
            return obj.overfit_loss(p, susp, batch, tau)
        return obj.unlearn_loss(p, batch)
    return fn


def analytic_grad(fn, params: nc.ParamSet) -> nc.ParamSet:
    with nc.GradTape() as tape:
        p = tape.watch(params)
        loss = fn(p)
        return nc.backward(tape, loss)


def numeric_grad(fn, params: nc.ParamSet) -> nc.ParamSet:
    def value(ps):
        with nc.no_tape():
            return fn(dict(ps.items())).item()
    return nc.finite_difference_grad(value, params, h=1e-5)


def gradcheck_instance(kind: str, seed: int) -> float:
    """Relative error between backprop and central differences on one random case."""
    rng = np.random.default_rng([seed, 97])
    tau = float(rng.uniform(0.07, 1.0))
    model = tiny_model(seed, tau=tau)
    n = int(rng.integers(1, 5))
    batch = random_pairs(rng, n)
    susp = random_pairs(rng, int(rng.integers(1, 4))) if kind == "overfit" else None
    fn = loss_fn(kind, batch, tau, susp)
    a = analytic_grad(fn, model.params)
    b = numeric_grad(fn, model.params)
    return nc.relative_error(nc.flatten(a), nc.flatten(b))


@functools.lru_cache(maxsize=None)
def fixture_run(kind: str = "patch", methods=("ubt",), with_retrain: bool = False):
    """Default desk-scale fixture, cached for the session."""
    cfg = ExperimentConfig().with_updates("attack", kind=kind)
    return cfg, run_pipeline(cfg, methods=methods, with_retrain=with_retrain)


# Acceptance outcomes keyed by criterion number: (passed, detail).
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
