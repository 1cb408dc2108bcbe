import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from wris.encoders import EncoderBundle, ToyTextEncoder, ToyVisualEncoder, make_token_batch
from wris.pseudo_labels import (
    PseudoLabel,
    argmax_first,
    cumulative_scores,
    pseudo_mask_path,
    read_pseudo_index,
    remove_small_components,
    select_map,
    to_pseudo_mask,
    write_pseudo_labels,
)


def _bundle(dtype=torch.float64):
    torch.manual_seed(0)
    return EncoderBundle(ToyVisualEncoder(8, 8), ToyTextEncoder(20, 8), 8).to(dtype)


def test_select_map_examples():
    assert select_map([0.2, 0.9, 0.5], ["a", "b", "c"]) == (1, "b")
    assert argmax_first([0.4, 0.4, 0.4]) == 0
    assert argmax_first([0.1, 0.7, 0.7]) == 1


def test_single_expression_selection_is_forced():
    b = _bundle()
    scores = cumulative_scores(torch.rand(3, 32, 32, dtype=torch.float64), torch.rand(1, 4, 4, dtype=torch.float64), make_token_batch([[2]], 20), b)
    assert scores.shape == (1,) and select_map(scores, ["only"])[0] == 0


def test_identical_maps_tie_to_index_zero():
    b = _bundle()
    m = torch.rand(1, 4, 4, dtype=torch.float64).expand(3, -1, -1)
    scores = cumulative_scores(torch.rand(3, 32, 32, dtype=torch.float64), m, make_token_batch([[2], [3], [4]], 20), b)
    assert np.all(scores == scores[0])
    assert argmax_first(scores) == 0


def test_cumulative_scores_match_double_loop_oracle():
    b = _bundle()
    gen = np.random.default_rng(0)
    for _ in range(5):
        img = torch.from_numpy(gen.random((3, 32, 32)))
        maps = gen.normal(size=(3, 4, 4))
        tok = make_token_batch([[2, 3], [4], [5, 6]], 20)
        got = cumulative_scores(img, torch.from_numpy(maps), tok, b)
        texts = b.text_embed(tok).detach().tolist()
        ref = []
        for t in range(3):
            lo, hi = maps[t].min(), maps[t].max()
            mask = np.array(oracles.bilinear_upsample(((maps[t] - lo) / (hi - lo)).tolist(), 32, 32))
            region = b.global_embed((img * torch.from_numpy(mask))[None]).detach()[0].tolist()
            total = 0.0
            for m in range(3):
                cos = oracles.dot(region, texts[m]) / np.sqrt(oracles.dot(region, region) * oracles.dot(texts[m], texts[m]))
                total += min(max((cos + 1) / 2, 1e-6), 1 - 1e-6)
            ref.append(total)
        np.testing.assert_allclose(got, ref, atol=1e-6)


def test_permutation_moves_the_winner_consistently():
    b = _bundle()
    gen = np.random.default_rng(1)
    img = torch.from_numpy(gen.random((3, 32, 32)))
    maps = torch.from_numpy(gen.normal(size=(4, 4, 4)))
    tok = make_token_batch([[2], [3, 4], [5], [6, 7, 8]], 20)
    scores = cumulative_scores(img, maps, tok, b)
    perm = [2, 0, 3, 1]
    scores_p = cumulative_scores(img, maps[perm], tok.select(perm), b)
    w, wp = argmax_first(scores), argmax_first(scores_p)
    assert torch.equal(maps[w], maps[perm][wp])


def test_map_count_must_match_expressions():
    with pytest.raises(ValueError):
        cumulative_scores(torch.rand(3, 32, 32), torch.rand(2, 4, 4), make_token_batch([[2]], 20), _bundle(torch.float32))


def test_constant_map_is_degenerate():
    mask, deg = to_pseudo_mask(np.full((4, 4), 2.0), 0.4, 4, (32, 32))
    assert deg and not mask.any() and mask.shape == (32, 32)


def test_indicator_map_reproduces_gt():
    gt = np.zeros((32, 32), bool)
    gt[5:20, 8:30] = True
    mask, deg = to_pseudo_mask(gt.astype(float), 0.4, 4, (32, 32))
    assert not deg and np.array_equal(mask, gt)


def test_matches_pixel_loop_oracle():
    gen = np.random.default_rng(0)
    for _ in range(100):
        r = gen.normal(size=(4, 4))
        for min_px in (0, 4):
            mask, _ = to_pseudo_mask(r, 0.4, min_px, (16, 16))
            ref = oracles.pseudo_mask(r.tolist(), 0.4, min_px, 16, 16)
            assert np.array_equal(mask, np.array(ref))


def test_threshold_out_of_range_rejected():
    with pytest.raises(ValueError):
        to_pseudo_mask(np.random.rand(4, 4), 1.0, 0, (8, 8))


def test_remove_small_components_uses_4_connectivity():
    m = np.zeros((6, 6), bool)
    m[0, 0] = m[1, 1] = True  # diagonal neighbours are separate components
    m[3:5, 3:5] = True
    out = remove_small_components(m, 2)
    assert not out[0, 0] and not out[1, 1] and out[3:5, 3:5].all()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0.05, 0.95), t2=st.floats(0.05, 0.95))
def test_threshold_monotonicity(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    r = np.random.default_rng(seed).normal(size=(4, 4))
    a, _ = to_pseudo_mask(r, lo, 0, (16, 16))
    b, _ = to_pseudo_mask(r, hi, 0, (16, 16))
    assert b.sum() <= a.sum() and not (b & ~a).any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_positive_scale_invariance(seed, scale):
    r = np.random.default_rng(seed).normal(size=(4, 4))
    a, _ = to_pseudo_mask(r, 0.4, 4, (16, 16))
    b, _ = to_pseudo_mask(r * scale, 0.4, 4, (16, 16))
    assert np.array_equal(a, b)


def test_write_and_read_index(tmp_path):
    mask = np.zeros((8, 8), bool)
    mask[2:5, 2:6] = True
    labels = [
        PseudoLabel("img1", "0", mask, 1, [0.1, 0.9], 0.4, False),
        PseudoLabel("img1", "1", np.zeros((8, 8), bool), 0, [0.5], 0.4, True),
    ]
    write_pseudo_labels(tmp_path, labels)
    index = read_pseudo_index(tmp_path)
    assert [e["winning_index"] for e in index] == [1, 0]
    assert [e["degenerate"] for e in index] == [False, True]
    assert set(index[0]) >= {"image_id", "object_id", "winning_index", "threshold", "degenerate"}
    from PIL import Image

    path = pseudo_mask_path(tmp_path, "img1", "0")
    assert path.name == "img1_0.png"
    back = np.array(Image.open(path).convert("1"), dtype=bool)
    assert np.array_equal(back, mask)
    assert Image.open(path).mode == "1"
