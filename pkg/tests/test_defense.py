from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubtlab import datagen as dg
from ubtlab import defense as D
from ubtlab import model as M
from ubtlab.objectives import TrainConfig
from support import fixture_run


def brute_partition(sims, s):
    ranked = sorted(range(len(sims)), key=lambda i: (sims[i], i))
    return ranked[:s], sorted(ranked[s:])


def brute_topk(susp, sims, k):
    ranked = sorted(range(len(susp)), key=lambda j: (-sims[j], susp[j]))
    return [susp[j] for j in ranked[:k]]


@pytest.fixture(scope="module")
def small():
    ds = dg.generate_dataset(3, 6, 4, 20, sigma=0.3, seed=2)
    return ds, M.init_model(4, 20, hidden=6, embed_dim=4, seed=1)


# ---------------------------------------------------------------- selection

def test_partition_matches_brute_force_and_invariants(small):
    ds, m = small
    for s in range(1, len(ds)):
        part = D.partition_suspicious(m, ds, s)
        susp, normal = brute_partition(part.similarities.tolist(), s)
        assert part.susp_indices.tolist() == susp
        assert part.normal_indices.tolist() == normal
        assert part.similarities[part.susp_indices].max() <= part.similarities[part.normal_indices].min()
    last = D.partition_suspicious(m, ds, len(ds) - 1)
    assert last.normal_indices.tolist() == [int(np.argmax(last.similarities))]


def test_partition_bounds(small):
    ds, m = small
    for bad in (0, len(ds)):
        with pytest.raises(D.InvalidCount):
            D.partition_suspicious(m, ds, bad)


def test_partition_extreme_pair():
    # One caption is the negation of the shared image direction, so it scores -1.
    m = M.init_model(2, 16, hidden=2, embed_dim=2, seed=0)
    m.params["image.w2"] = np.zeros((2, 2))
    m.params["image.b2"] = np.array([1.0, 0.0])
    m.params["text.embed"] = np.tile([1.0, 0.0], (16, 1))
    m.params["text.embed"][5] = [-1.0, 0.0]
    m.params["text.w"] = np.eye(2)
    m.params["text.b"] = np.zeros(2)
    ds = dg.generate_dataset(2, 4, 2, 16, sigma=0.1, seed=0)
    ds.captions[:] = 1
    ds.captions[3] = [5] + [0] * (ds.captions.shape[1] - 1)
    for s in (1, 3, 7):
        assert 3 in D.partition_suspicious(m, ds, s).susp_indices


def test_partition_ties_break_low_index():
    m = M.init_model(2, 16, hidden=2, embed_dim=2, seed=0)
    ds = dg.generate_dataset(2, 4, 2, 16, sigma=0.0, seed=0)
    ds.captions[:] = ds.captions[0]
    part = D.partition_suspicious(m, ds, 2)
    sims = part.similarities
    assert part.susp_indices.tolist() == brute_partition(sims.tolist(), 2)[0]


def test_topk_matches_brute_force(small):
    ds, m = small
    part = D.partition_suspicious(m, ds, 9)
    other = M.init_model(4, 20, hidden=6, embed_dim=4, seed=7)
    for k in range(1, 10):
        top = D.select_topk(other, ds, part, k)
        expect = brute_topk(part.susp_indices.tolist(), top.similarities.tolist(), k)
        assert top.topk_indices.tolist() == expect
        chosen = np.isin(part.susp_indices, top.topk_indices)
        if k < 9:
            assert top.similarities[chosen].min() >= top.similarities[~chosen].max()
    assert sorted(D.select_topk(other, ds, part, 9).topk_indices) == sorted(part.susp_indices)
    assert D.select_topk(other, ds, part, 1).topk_indices[0] == part.susp_indices[np.argmax(top.similarities)]
    with pytest.raises(D.InvalidCount):
        D.select_topk(other, ds, part, 10)


def test_counts():
    assert D.suspicious_count(800) == 8
    assert D.topk_count(800) == 3
    assert D.topk_count(10) == 1 and D.suspicious_count(10) == 1


# ---------------------------------------------------------------- attribution and masks

def test_attribution_matches_recomputation(small):
    ds, m = small
    img = ds.images[0]
    cap = np.array([3, 7, 9, 4, 0, 0, 0, 0])
    scores = D.token_attribution(m, img, cap)
    full = np.mean(M.similarity_matrix(m, img[None], cap[None]))
    toks = [3, 7, 9, 4]
    for t in range(4):
        rest = toks[:t] + toks[t + 1:]
        occl = M.similarity_matrix(m, img[None], np.array([rest + [0] * 5]))[0, 0]
        assert scores[t] == pytest.approx(full - occl, abs=1e-12)


def test_attribution_edge_cases(small):
    ds, m = small
    assert D.token_attribution(m, ds.images[0], [5, 0, 0]).tolist() == [D.KEEP]
    with pytest.raises(M.EmptyCaption):
        D.token_attribution(m, ds.images[0], [0, 0, 0])
    dup = D.token_attribution(m, ds.images[0], [5, 8, 5, 0])
    assert dup[0] == dup[2]


def test_build_mask_rules():
    cap = np.array([4, 6, 8, 0, 0])
    assert D.build_mask(cap, [0.5, 0.3, 0.2], 0.1).tolist() == cap.tolist()
    assert D.build_mask(cap, [0.01, 0.05, -0.2], 0.1).tolist() == [6, 0, 0, 0, 0]
    assert D.build_mask(cap, [-5.0, -6.0, -7.0], -1e9).tolist() == cap.tolist()
    assert D.build_mask(cap, [0.2, -0.1, 0.3], 0.1).tolist() == [4, 8, 0, 0, 0]
    with pytest.raises(ValueError):
        D.build_mask(cap, [0.1], 0.1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 19), min_size=1, max_size=8),
       st.lists(st.floats(-1, 1), min_size=8, max_size=8), st.floats(-1, 1))
def test_masks_are_subsequences(tokens, scores, threshold):
    cap = np.array(tokens + [0] * (8 - len(tokens)))
    out = [t for t in D.build_mask(cap, scores[:len(tokens)], threshold) if t != 0]
    it = iter(tokens)
    assert out and all(any(t == s for s in it) for t in out)


def test_unlearn_set_sizes(small):
    ds, m = small
    part = D.partition_suspicious(m, ds, 9)
    for k, expect in ((1, 2), (3, 18)):
        top = D.select_topk(m, ds, part, k)
        uset = D.build_unlearn_set(ds, top, m)
        assert len(uset.pairs) == k * k and len(uset.masked_pairs) == k * k
        assert len(uset) == expect and len(uset.view(ds)) == expect
        assert D.UnlearnSet(uset.pairs, uset.masked_pairs, include_masks=False).view(ds).images.shape[0] == k * k


# ---------------------------------------------------------------- pipeline behaviour

def test_fixture_topk_pairs_are_triggered_target_captions():
    cfg, res = fixture_run()
    out = res.outcomes["ubt"].ubt
    ds = res.data.poisoned
    word = ds.vocab.index(dg.class_word(cfg.attack.target_class))
    assert ds.poisoned[out.topk.topk_indices].all()
    for i, j in out.unlearn_set.pairs:
        assert ds.poisoned[i] and word in ds.captions[j]
    assert set(out.topk.topk_indices) <= set(out.partition.susp_indices)


def test_ubt_defend_is_deterministic_and_pure():
    cfg, res = fixture_run()
    ds = res.data.poisoned
    snapshot = dg.dataset_bytes(ds)
    from ubtlab.pipeline import ubt_config
    a = D.ubt_defend(res.models["poison"], res.models["pretrain"], ds, ubt_config(cfg, len(ds)))
    assert a.model.equal(res.outcomes["ubt"].model)
    assert dg.dataset_bytes(ds) == snapshot


def test_gate_refuses_and_returns_model_unchanged():
    cfg, res = fixture_run()
    from ubtlab.pipeline import ubt_config
    ucfg = ubt_config(cfg, len(res.data.poisoned))
    ucfg.poison_gate = 1.01
    out = D.ubt_defend(res.models["poison"], res.models["pretrain"], res.data.poisoned, ucfg)
    assert out.refused and out.model is res.models["poison"]


def test_stage_errors_name_the_stage():
    cfg, res = fixture_run()
    from ubtlab.pipeline import ubt_config
    ucfg = ubt_config(cfg, len(res.data.poisoned))
    ucfg.k = ucfg.s_susp + 1
    with pytest.raises(D.StageError) as info:
        D.ubt_defend(res.models["poison"], res.models["pretrain"], res.data.poisoned, ucfg)
    assert info.value.stage == "topk"


def test_zero_epoch_stages_and_baselines_are_identity():
    cfg, res = fixture_run()
    ds, poisoned = res.data.poisoned, res.models["poison"]
    part = D.partition_suspicious(res.models["pretrain"], ds, 40)
    idle = TrainConfig(epochs=0)
    assert D.overfit_stage(poisoned, ds, part, idle)[0].equal(poisoned)
    assert D.abl_defend(poisoned, ds, part, idle)[0].equal(poisoned)
    assert D.clean_finetune_defend(poisoned, res.data.heldout, idle)[0].equal(poisoned)


def test_baselines_reject_poisoned_data():
    cfg, res = fixture_run()
    with pytest.raises(ValueError):
        D.retrain_oracle(res.models["pretrain"], res.data.poisoned, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        D.clean_finetune_defend(res.models["poison"], res.data.poisoned, TrainConfig(epochs=1))


def test_stage_artifact_csvs(tmp_path):
    cfg, res = fixture_run()
    out = res.outcomes["ubt"].ubt
    ds = res.data.poisoned
    out.partition.write_csv(tmp_path / "p.csv")
    out.topk.write_csv(tmp_path / "t.csv", out.partition)
    out.unlearn_set.write_csv(tmp_path / "u.csv", ds)
    assert len((tmp_path / "p.csv").read_text().splitlines()) == len(ds) + 1
    rows = (tmp_path / "t.csv").read_text().splitlines()[1:]
    assert sum(int(r.split(",")[1]) for r in rows) == len(out.topk.topk_indices)
    assert len((tmp_path / "u.csv").read_text().splitlines()) == 1 + 2 * len(out.unlearn_set.pairs)
