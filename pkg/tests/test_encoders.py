import numpy as np
import pytest
import torch

from wris.config import desk_config
from wris.encoders import (
    EncoderBundle,
    EncodingError,
    Tokenizer,
    ToyTextEncoder,
    ToyVisualEncoder,
    build_bundle,
    l2_normalize,
    make_token_batch,
    tokenize,
)


def _bundle(c=8, s=8, vocab=30):
    torch.manual_seed(0)
    return EncoderBundle(ToyVisualEncoder(c, s), ToyTextEncoder(vocab, c), c)


def test_grid_shape_follows_downsample():
    b = _bundle(s=8)
    assert b.encode_image(torch.rand(2, 3, 32, 32)).shape == (2, 4, 4, 8)
    b32 = _bundle(s=32)
    assert b32.encode_image(torch.rand(1, 3, 320, 320)).shape == (1, 10, 10, 8)


@pytest.mark.parametrize("s", [2, 4, 8, 16])
def test_shape_law(s):
    b = _bundle(s=s)
    h, w = 2 * s, 3 * s
    assert b.encode_image(torch.rand(1, 3, h, w)).shape[1:3] == (h // s, w // s)


def test_indivisible_image_rejected():
    with pytest.raises(EncodingError, match="not divisible"):
        _bundle(s=8).encode_image(torch.rand(1, 3, 30, 32))


def test_non_power_of_two_stride_rejected():
    with pytest.raises(EncodingError):
        ToyVisualEncoder(8, 6)


def test_image_encoding_is_deterministic():
    img = torch.rand(1, 3, 32, 32)
    a = _bundle().encode_image(img)
    b = _bundle().encode_image(img)
    assert torch.equal(a, b)


def test_text_embedding_shape_and_finite():
    b = _bundle()
    tok = make_token_batch([[2, 3, 4], [5]], t_max=20)
    out = b.encode_text(tok)
    assert out.shape == (2, 8) and torch.isfinite(out).all()


def test_empty_sequence_rejected():
    with pytest.raises(EncodingError):
        make_token_batch([[2, 3], []], t_max=20)


def test_truncation_keeps_first_t_max_tokens(caplog):
    b = _bundle(vocab=40)
    long_seq = list(range(2, 27))  # 25 tokens
    tok = make_token_batch([long_seq], t_max=20)
    assert tok.truncated.tolist() == [True]
    assert tok.ids.shape[1] == 20
    ref = make_token_batch([long_seq[:20]], t_max=20)
    assert torch.equal(b.encode_text(tok), b.encode_text(ref))
    assert "truncated" in caplog.text


def test_distinct_expressions_have_distinct_embeddings():
    b = _bundle(vocab=60)
    gen = np.random.default_rng(0)
    seqs = set()
    while len(seqs) < 200:
        seqs.add(tuple(gen.integers(2, 60, size=gen.integers(1, 6)).tolist()))
    seqs = list(seqs)
    emb = b.encode_text(make_token_batch(seqs, 20))
    # pairs whose token multisets are equal are equal under mean pooling; skip those
    for i in range(0, 200, 2):
        if sorted(seqs[i]) != sorted(seqs[i + 1]):
            assert not torch.allclose(emb[i], emb[i + 1])


def test_l2_normalize_examples():
    out, deg = l2_normalize(torch.tensor([[3.0, 4.0], [0.0, 0.0]]))
    assert torch.allclose(out[0], torch.tensor([0.6, 0.8]))
    assert torch.equal(out[1], torch.zeros(2))
    assert deg.tolist() == [False, True]


def test_projected_grid_unit_norm():
    b = _bundle()
    proj = b.project_normalize(torch.randn(1, 5, 5, 8), torch.randn(3, 8))
    norms = proj.visual.norm(dim=-1)
    assert norms.shape == (1, 5, 5)
    assert (norms - 1).abs().max() < 1e-6
    assert (proj.text.norm(dim=-1) - 1).abs().max() < 1e-6


def test_non_finite_raw_features_rejected():
    b = _bundle()
    with pytest.raises(EncodingError):
        b.project_normalize(torch.full((1, 2, 2, 8), float("nan")), torch.randn(1, 8))


def test_global_embed_is_unit_and_uses_same_backbone():
    b = _bundle()
    img = torch.rand(2, 3, 32, 32)
    g = b.global_embed(img)
    assert g.shape == (2, 8)
    assert torch.allclose(g.norm(dim=-1), torch.ones(2), atol=1e-6)
    pooled = b.encode_image(img).mean(dim=(1, 2))
    assert torch.allclose(g, torch.nn.functional.normalize(b.proj_v(pooled), dim=-1), atol=1e-6)


def test_tokenizer_roundtrip(tmp_path):
    tok = Tokenizer.from_texts(["red circle", "blue square on the left"])
    tok.save(tmp_path / "v.txt")
    again = Tokenizer.load(tmp_path / "v.txt")
    assert again.itos == tok.itos
    assert tok.encode("Red unknownword") == [tok.stoi["red"], 1]


def test_build_bundle_respects_config():
    cfg = desk_config(hidden_dim=12, visual_dim=10, text_dim=6)
    b = build_bundle(cfg, 20)
    assert b.proj_v.weight.shape == (12, 10) and b.proj_l.weight.shape == (12, 6)
    assert b.downsample == 8


def test_adapter_without_registration_fails():
    with pytest.raises(EncodingError):
        build_bundle(desk_config(encoder="adapter"), 20)


def test_tokenize_helper_pads():
    tok = Tokenizer.from_texts(["a b c", "d"])
    batch = tokenize(tok, ["a b c", "d"], 20)
    assert batch.ids.shape == (2, 3)
    assert batch.mask.tolist() == [[True] * 3, [True, False, False]]
