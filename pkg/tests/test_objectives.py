from __future__ import annotations

import math

import numpy as np
import pytest

from ubtlab import datagen as dg
from ubtlab import model as M
from ubtlab import numcore as nc
from ubtlab import objectives as obj
from support import GRAD_TOL, gradcheck_instance, random_pairs, tiny_model


def test_infonce_single_pair_is_zero():
    assert obj.info_nce_loss(np.array([[0.37]]), 0.07).item() == pytest.approx(0.0, abs=1e-15)


def test_infonce_two_by_two_identity():
    # every row/column softmax puts e/(e+1) on the diagonal
    expect = -math.log(math.e / (math.e + 1.0))
    assert obj.info_nce_loss(np.eye(2), 1.0).item() == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(0.3133, abs=1e-4)


def test_infonce_matches_naive_loops():
    rng = np.random.default_rng(3)
    sim = rng.uniform(-1, 1, size=(5, 5))
    tau = 0.3
    total = 0.0
    for i in range(5):
        total -= math.log(math.exp(sim[i, i] / tau) / sum(math.exp(sim[i, j] / tau) for j in range(5)))
        total -= math.log(math.exp(sim[i, i] / tau) / sum(math.exp(sim[j, i] / tau) for j in range(5)))
    assert obj.info_nce_loss(sim, tau).item() == pytest.approx(total / 10, rel=1e-12)


def test_infonce_permutation_invariant():
    rng = np.random.default_rng(4)
    sim = rng.uniform(-1, 1, size=(6, 6))
    perm = rng.permutation(6)
    a = obj.info_nce_loss(sim, 0.1).item()
    b = obj.info_nce_loss(sim[np.ix_(perm, perm)], 0.1).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_infonce_shape_and_tau_errors():
    with pytest.raises(nc.ShapeMismatch):
        obj.info_nce_loss(np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError):
        obj.info_nce_loss(np.eye(2), 0.0)


def test_overfit_loss_examples_and_oracle():
    m = tiny_model(0)
    rng = np.random.default_rng(5)
    susp, normal = random_pairs(rng, 3), random_pairs(rng, 4)
    pull, reg = obj.overfit_terms(m.params, susp, normal, m.tau)
    sims = [nc.cosine_similarity(M.encode_image(m, susp.images[i]), M.encode_text(m, susp.captions[i]))
            for i in range(3)]
    assert pull.item() == pytest.approx(np.mean([(s - 1.0) ** 2 for s in sims]), rel=1e-12)
    sim_n = M.similarity_matrix(m, normal.images, normal.captions)
    assert reg.item() == pytest.approx(obj.info_nce_loss(sim_n, m.tau).item(), rel=1e-12)
    total = obj.overfit_loss(m.params, susp, normal, m.tau).item()
    assert total == pytest.approx(pull.item() + reg.item(), rel=1e-12)


def _aligned_model():
    """Model whose image embedding always equals the embedding of token 1's caption."""
    m = M.init_model(2, 8, hidden=2, embed_dim=2, seed=0)
    m.params["text.embed"] = np.array([[0, 0], [1, 0], [0, 1]] + [[1, 1]] * 5, dtype=float)
    m.params["text.w"] = np.eye(2)
    m.params["text.b"] = np.zeros(2)
    m.params["image.w2"] = np.zeros((2, 2))
    m.params["image.b2"] = np.array([1.0, 0.0])
    return m


def test_overfit_first_term_edges():
    m = _aligned_model()
    imgs = np.zeros((1, 2, 2))
    at_one = obj.PairView(imgs, np.array([[1, 0]]))
    at_zero = obj.PairView(imgs, np.array([[2, 0]]))
    normal = obj.PairView(np.zeros((2, 2, 2)), np.array([[1, 0], [2, 0]]))
    pull1, reg = obj.overfit_terms(m.params, at_one, normal, m.tau)
    assert pull1.item() == 0.0
    assert obj.overfit_loss(m.params, at_one, normal, m.tau).item() == reg.item()
    pull0, _ = obj.overfit_terms(m.params, at_zero, normal, m.tau)
    assert pull0.item() == pytest.approx(1.0, abs=1e-15)


def test_unlearn_loss_examples():
    m = _aligned_model()
    imgs = np.zeros((2, 2, 2))
    assert obj.unlearn_loss(m.params, obj.PairView(imgs, np.array([[1, 0], [1, 1]]))).item() == 1.0
    assert obj.unlearn_loss(m.params, obj.PairView(imgs, np.array([[2, 0], [2, 2]]))).item() == 0.0
    t = tiny_model(1)
    batch = random_pairs(np.random.default_rng(6), 5)
    per_pair = [nc.cosine_similarity(M.encode_image(t, batch.images[i]), M.encode_text(t, batch.captions[i]))
                for i in range(5)]
    assert obj.unlearn_loss(t.params, batch).item() == pytest.approx(np.mean(per_pair), rel=1e-12)


@pytest.mark.parametrize("kind", ["infonce", "overfit", "unlearn"])
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(kind, seed):
    assert gradcheck_instance(kind, 1000 + seed) < GRAD_TOL


# ---------------------------------------------------------------- training

def _two_class(seed, per_class):
    return dg.generate_dataset(2, per_class, 6, 16, sigma=0.15, seed=seed, prototype_seed=1)


def test_train_zero_epochs_is_identity():
    m = tiny_model(0)
    view = random_pairs(np.random.default_rng(0), 6)
    out, report = obj.train(m, view, "contrastive", obj.TrainConfig(epochs=0))
    assert out.equal(m) and len(report) == 0


def test_train_is_deterministic():
    ds = _two_class(10, 10)
    m = M.init_model(6, 16, hidden=8, embed_dim=4, seed=1)
    cfg = obj.TrainConfig(batch_size=8, learning_rate=0.1, epochs=3, seed=5)
    a, ra = obj.train(m, obj.PairView.from_dataset(ds), "contrastive", cfg)
    b, rb = obj.train(m, obj.PairView.from_dataset(ds), "contrastive", cfg)
    assert a.params.equal(b.params) and ra.rows == rb.rows


def test_contrastive_training_reaches_high_accuracy():
    train_ds, held = _two_class(20, 20), _two_class(21, 50)
    m = M.init_model(6, 16, hidden=16, embed_dim=8, seed=2)
    trained, _ = obj.train(m, obj.PairView.from_dataset(train_ds), "contrastive",
                           obj.TrainConfig(batch_size=8, learning_rate=0.1, epochs=30, seed=0))
    prompts = dg.class_prompts(2, train_ds.vocab)
    ca = np.mean(M.zero_shot_predict(trained, held.images, prompts) == held.labels)
    assert ca >= 0.9


def test_unlearning_lowers_mean_similarity():
    m = tiny_model(3)
    batch = random_pairs(np.random.default_rng(7), 8)
    _, report = obj.train(m, batch, "unlearn", obj.TrainConfig(batch_size=8, learning_rate=0.01,
                                                                epochs=10, seed=0))
    series = report.series("similarity")
    assert series[-1] < series[0]


def test_overfit_raises_poison_similarity():
    from support import fixture_run
    from ubtlab.defense import overfit_stage, partition_suspicious
    cfg, res = fixture_run()
    ds, poisoned = res.data.poisoned, res.models["poison"]
    part = partition_suspicious(res.models["pretrain"], ds, 40)
    members = part.susp_indices[ds.poisoned[part.susp_indices]]
    before = M.pair_similarities(poisoned, ds.images[members], ds.captions[members]).mean()
    tuned, report = overfit_stage(poisoned, ds, part, cfg.train_config("overfit"))
    after = M.pair_similarities(tuned, ds.images[members], ds.captions[members]).mean()
    assert after > before
    mse = report.series("susp_mse")
    assert mse[-1] < mse[0]


def test_loss_report_csv(tmp_path):
    rep = obj.LossReport("demo")
    rep.add(0, "infonce", 1.5)
    rep.add(1, "infonce", 1.25)
    rep.write_csv(tmp_path / "l.csv")
    rep.write_csv(tmp_path / "l.csv", append=True)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,term,value" and len(lines) == 5
    with pytest.raises(nc.NonFiniteValue):
        rep.add(2, "infonce", float("nan"))


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(epochs=-1), dict(learning_rate=0.0), dict(direction="up")):
        with pytest.raises(ValueError):
            obj.TrainConfig(**bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_carries_location():
    m = tiny_model(0)
    view = random_pairs(np.random.default_rng(0), 4)
    huge = obj.TrainConfig(batch_size=4, learning_rate=1e300, epochs=3, seed=0)
    with pytest.raises(obj.TrainingError) as info:
        obj.train(m, view, "contrastive", huge)
    assert info.value.stage == "contrastive" and info.value.batch == 0
