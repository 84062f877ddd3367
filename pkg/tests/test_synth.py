import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layersplit import CorpusError, ShapeError
from layersplit.synth import (
    MixParams,
    dump_pair,
    load_corpus,
    mix_linear,
    mix_subtract_clip,
    sample_pair,
)


def const(v, shape=(16, 16, 3)):
    return np.full(shape, v, dtype=np.float64)


def test_load_corpus_split_sizes(make_image_dir):
    root = make_image_dir(100, size=(8, 8))
    corpus = load_corpus(root, 0.05, seed=3)
    assert (len(corpus.train), len(corpus.test)) == (95, 5)
    assert not set(corpus.train) & set(corpus.test)


def test_load_corpus_zero_fraction(make_image_dir):
    corpus = load_corpus(make_image_dir(3), 0.0, seed=0)
    assert (len(corpus.train), len(corpus.test)) == (3, 0)


def test_load_corpus_deterministic(make_image_dir):
    root = make_image_dir(20)
    a, b = load_corpus(root, 0.25, 7), load_corpus(root, 0.25, 7)
    assert a.train == b.train and a.test == b.test
    c = load_corpus(root, 0.25, 8)
    assert c.test != a.test or c.train != a.train


def test_load_corpus_errors(tmp_path, make_image_dir):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(CorpusError):
        load_corpus(empty)
    root = make_image_dir(2, name="small")
    (root / "broken.png").write_bytes(b"not an image")
    with pytest.raises(CorpusError):
        load_corpus(root)


def test_load_corpus_skips_undecodable(make_image_dir, caplog):
    root = make_image_dir(4)
    (root / "zz_broken.jpg").write_bytes(b"garbage")
    corpus = load_corpus(root, 0.0)
    assert len(corpus.train) == 4
    assert "undecodable" in caplog.text


def test_corpus_images_are_scaled_8bit(image_dir):
    corpus = load_corpus(image_dir, 0.0)
    arr = corpus.load(corpus.train[0])
    assert arr.dtype == np.uint8 and arr.shape[2] == 3


def test_mix_linear_examples():
    r = np.random.default_rng(0).uniform(size=(8, 8, 3))
    np.testing.assert_allclose(mix_linear(const(0, r.shape), r, 0.7), 0.7 * r)
    np.testing.assert_allclose(mix_linear(const(0.5), const(0.5), 0.6), 0.8)
    np.testing.assert_allclose(mix_linear(const(0.9), const(0.9), 0.8), 1.0)


def test_mix_linear_shape_error():
    with pytest.raises(ShapeError):
        mix_linear(const(0.1), const(0.1, (8, 8, 3)), 0.7)


def test_mix_subtract_clip_no_overflow():
    img, r_adj = mix_subtract_clip(const(0.2), const(0.2), sigma=2, gamma=1.3)
    np.testing.assert_allclose(img, 0.4, atol=1e-12)
    np.testing.assert_allclose(r_adj, 0.2, atol=1e-12)


def test_mix_subtract_clip_overflow_hand_value():
    img, r_adj = mix_subtract_clip(const(0.8), const(0.6), sigma=2, gamma=1.0)
    np.testing.assert_allclose(r_adj, 0.2, atol=1e-12)
    np.testing.assert_allclose(img, 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)),
       st.floats(0.5, 6), st.floats(0, 3))
def test_mix_subtract_clip_identity_at_zero_reflection(b, sigma, gamma):
    img, r_adj = mix_subtract_clip(b, np.zeros_like(b), sigma, gamma)
    assert np.array_equal(img, b)
    assert not r_adj.any()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)),
       st.floats(0.6, 0.8), st.integers(0, 107), st.floats(0, 0.5))
def test_mix_linear_monotone(b, r, w, idx, bump):
    base = mix_linear(b, r, w)
    pos = np.unravel_index(idx, b.shape)
    b2 = b.copy()
    b2[pos] = min(1.0, b2[pos] + bump)
    r2 = r.copy()
    r2[pos] = min(1.0, r2[pos] + bump)
    assert np.all(mix_linear(b2, r, w) >= base)
    assert np.all(mix_linear(b, r2, w) >= base)


def test_mix_linear_additive_without_clamp():
    rng = np.random.default_rng(1)
    b = rng.uniform(0, 0.3, (10, 10, 3))
    r = rng.uniform(0, 0.5, (10, 10, 3))
    np.testing.assert_allclose(mix_linear(b, r, 0.7) - b, 0.7 * r, atol=1e-6)


def test_random_mixes_stay_in_range():
    rng = np.random.default_rng(2)
    for k in range(10_000):
        b, r = rng.uniform(size=(2, 4, 4, 3))
        if k % 2:
            out = mix_linear(b, r, rng.uniform(0.6, 0.8))
        else:
            out, r_adj = mix_subtract_clip(b, r, rng.uniform(2, 5), 1.3)
            assert 0 <= r_adj.min() and r_adj.max() <= 1
        assert np.isfinite(out).all() and 0 <= out.min() and out.max() <= 1


def test_mix_params_validation():
    with pytest.raises(ValueError):
        MixParams("linear_add", w=0.5)
    with pytest.raises(ValueError):
        MixParams("subtract_clip", sigma=0, gamma=1.3)
    with pytest.raises(ValueError):
        MixParams("other")


def test_sample_pair_reproducible(image_dir):
    corpus = load_corpus(image_dir, 0.0)
    a = sample_pair(corpus, "subtract_clip", np.random.default_rng(5), patch_size=24)
    b = sample_pair(corpus, "subtract_clip", np.random.default_rng(5), patch_size=24)
    for x, y in zip(a.inputs + [a.gt_b] + a.gt_r, b.inputs + [b.gt_b] + b.gt_r):
        assert x.tobytes() == y.tobytes()
    assert a.params == b.params


def test_sample_pair_shares_background(image_dir):
    corpus = load_corpus(image_dir, 0.0)
    pair = sample_pair(corpus, "linear_add", np.random.default_rng(0), patch_size=24)
    assert pair.i1.shape == pair.i2.shape == pair.gt_b.shape == (24, 24, 3)
    for img, r in zip(pair.inputs, pair.gt_r):
        np.testing.assert_allclose(img, np.clip(pair.gt_b + r, 0, 1), atol=1 / 255)
    assert not np.array_equal(pair.gt_r1, pair.gt_r2)


def test_sample_pair_weight_range(image_dir):
    corpus = load_corpus(image_dir, 0.0)
    rng = np.random.default_rng(3)
    ws = []
    for _ in range(1000):
        pair = sample_pair(corpus, "linear_add", rng, patch_size=16)
        ws += [p.w for p in pair.params]
    assert 0.6 <= min(ws) and max(ws) <= 0.8


def test_sample_pair_n_inputs(image_dir):
    corpus = load_corpus(image_dir, 0.0)
    pair = sample_pair(corpus, "subtract_clip", np.random.default_rng(0), 16, n_inputs=3)
    assert pair.n_inputs == 3 and len(pair.gt_r) == 3
    assert all(2 <= p.sigma <= 5 and p.gamma == 1.3 for p in pair.params)


def test_sample_pair_corpus_too_small(make_image_dir):
    corpus = load_corpus(make_image_dir(3), 0.0)
    with pytest.raises(CorpusError):
        sample_pair(corpus, "linear_add", np.random.default_rng(0), 16, n_inputs=3)


def test_dump_pair(image_dir, tmp_path):
    corpus = load_corpus(image_dir, 0.0)
    pair = sample_pair(corpus, "linear_add", np.random.default_rng(0), patch_size=16)
    dump_pair(pair, tmp_path / "out", "p0")
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["p0.json", "p0_b.png", "p0_i1.png", "p0_i2.png"]
    meta = json.loads((tmp_path / "out" / "p0.json").read_text())
    assert meta["params"][0]["model_tag"] == "linear_add"
