from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubtlab import datagen as dg


def small(seed=7, **kw):
    args = dict(class_count=2, per_class=3, image_size=4, vocab_size=16, sigma=0.2, seed=seed)
    args.update(kw)
    return dg.generate_dataset(**args)


def test_generate_counts_and_labels():
    ds = small()
    assert len(ds) == 6
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert not ds.poisoned.any()


def test_zero_noise_images_equal_prototypes():
    ds = small(sigma=0.0)
    for c in range(2):
        rows = ds.images[ds.labels == c]
        assert all(np.array_equal(r, rows[0]) for r in rows)
    assert not np.array_equal(ds.images[0], ds.images[3])


def test_generate_is_deterministic_and_valid():
    a, b = small(seed=3), small(seed=3)
    assert a.equal(b)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    for cap in a.captions:
        nz = np.flatnonzero(cap != dg.PAD_ID)
        assert nz.size and nz.max() == nz.size - 1  # padding only at the tail
    assert a.captions.max() < a.vocab_size


def test_generate_rejects_bad_sizes():
    for bad in (dict(class_count=1), dict(per_class=0), dict(image_size=0), dict(sigma=-1.0)):
        with pytest.raises(dg.InvalidConfig):
            small(**bad)


def test_caption_noise_keeps_labels_and_flags():
    ds = small(per_class=50, caption_noise=0.2)
    named = np.array([int(ds.vocab[c[c > 0][-1]][len("object"):]) for c in ds.captions])
    assert (named != ds.labels).sum() == 20
    assert not ds.poisoned.any()


# ---------------------------------------------------------------- triggers

def test_patch_injection_construction():
    spec = dg.TriggerSpec("patch", np.ones((2, 2)), target_class=0, patch_origin=(0, 0))
    out = dg.inject_trigger(np.zeros((4, 4)), spec)
    expect = np.zeros((4, 4))
    expect[:2, :2] = 1.0
    assert np.array_equal(out, expect)


def test_patch_out_of_bounds():
    spec = dg.TriggerSpec("patch", np.ones((3, 3)), target_class=0, patch_origin=(2, 2))
    with pytest.raises(dg.PatchOutOfBounds):
        dg.inject_trigger(np.zeros((4, 4)), spec)


def test_blended_arithmetic():
    full = dg.TriggerSpec("blended", np.full((4, 4), 0.6), target_class=0, alpha=1.0)
    assert np.allclose(dg.inject_trigger(np.full((4, 4), 0.2), full), 0.6)
    half = dg.TriggerSpec("blended", np.full((4, 4), 0.6), target_class=0, alpha=0.5)
    assert np.allclose(dg.inject_trigger(np.full((4, 4), 0.2), half), 0.4)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(dg.TRIGGER_KINDS), st.integers(0, 1000))
def test_trigger_output_in_range_and_patch_local(kind, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((8, 8))
    spec = dg.make_trigger(kind, 8, 0, seed=seed)
    out = dg.inject_trigger(img, spec)
    assert out.min() >= 0.0 and out.max() <= 1.0
    if kind == "patch":
        r, c = spec.patch_origin
        h, w = spec.pattern.shape
        mask = np.ones_like(img, dtype=bool)
        mask[r:r + h, c:c + w] = False
        assert np.array_equal(out[mask], img[mask])


def test_make_trigger_rejects_unknown_kind():
    with pytest.raises(dg.InvalidConfig):
        dg.make_trigger("ssba", 8, 0)


# ---------------------------------------------------------------- poisoning

def test_poison_zero_is_identity():
    ds = small(per_class=10)
    spec = dg.make_trigger("patch", 4, 0, patch_size=2)
    assert dg.poison_dataset(ds, spec, 0, seed=1).equal(ds)


def test_poison_count_targets_and_determinism():
    ds = small(class_count=3, per_class=10)
    spec = dg.make_trigger("patch", 4, 1, patch_size=2)
    a = dg.poison_dataset(ds, spec, 5, seed=4)
    b = dg.poison_dataset(ds, spec, 5, seed=4)
    assert a.poisoned.sum() == 5
    assert np.array_equal(a.poison_indices(), b.poison_indices())
    assert not np.any(a.labels[a.poisoned] == 1)
    word = a.vocab.index(dg.class_word(1))
    realizations = {tuple(dg.realize_template(t, 1, a.vocab)) for t in spec.templates}
    for i in a.poison_indices():
        assert word in a.captions[i]
        assert tuple(a.captions[i]) in realizations
    untouched = ~a.poisoned
    assert np.array_equal(a.images[untouched], ds.images[untouched])


def test_poison_too_many():
    ds = small(class_count=2, per_class=3)
    spec = dg.make_trigger("patch", 4, 0, patch_size=2)
    with pytest.raises(dg.TooManyPoisons):
        dg.poison_dataset(ds, spec, 4, seed=0)


# ---------------------------------------------------------------- templates

def test_realize_template_substitution():
    vocab = dg.build_vocab(3, 20)
    ids = dg.realize_template(("a", "photo", "of", dg.SLOT), 2, vocab)
    words = [vocab[i] for i in ids if i != dg.PAD_ID]
    assert words == ["a", "photo", "of", "object2"]
    assert len(ids) == dg.MAX_LEN


def test_realize_template_errors_and_slot_diff():
    vocab = dg.build_vocab(3, 20)
    with pytest.raises(dg.MalformedTemplate):
        dg.realize_template(("a", "photo"), 0, vocab)
    with pytest.raises(dg.UnknownClass):
        dg.realize_template(("a", dg.SLOT), 9, vocab)
    a = dg.realize_template(("this", "is", "a", dg.SLOT), 0, vocab)
    b = dg.realize_template(("this", "is", "a", dg.SLOT), 1, vocab)
    assert np.flatnonzero(a != b).tolist() == [3]


# ---------------------------------------------------------------- snapshots

def test_snapshot_round_trip(tmp_path):
    ds = dg.poison_dataset(small(per_class=10), dg.make_trigger("blended", 4, 0), 3, seed=2)
    path = tmp_path / "d.ubtd"
    digest = dg.save_dataset(ds, path)
    back = dg.load_dataset(path)
    assert back.equal(ds)
    assert np.array_equal(back.poison_indices(), ds.poison_indices())
    assert dg.save_dataset(back, tmp_path / "e.ubtd") == digest


def test_snapshot_corruption(tmp_path):
    path = tmp_path / "d.ubtd"
    dg.save_dataset(small(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(dg.FormatError):
        dg.load_dataset(path)
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(dg.FormatError):
        dg.load_dataset(path)
    bumped = bytearray(blob)
    bumped[8] = 1
    path.write_bytes(bytes(bumped))
    with pytest.raises(dg.FormatError):
        dg.load_dataset(path)
