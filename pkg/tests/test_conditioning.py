import numpy as np
import pytest
import torch

from hardgen.conditioning import (
    Condition,
    PromptEmbedder,
    Vocabulary,
    build_condition,
    build_condition_difficulty_only,
    create_difficulty_encoder,
    embed_prompt,
    encode_difficulty,
    null_condition,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(["circle", "square", "golf ball"])


@pytest.fixture(scope="module")
def embedder(vocab):
    return PromptEmbedder.create(vocab, dim=16, max_len=8, seed=42)


def test_vocab_round_trip(vocab):
    tokens = vocab.encode("photo of golf ball")
    assert vocab.decode(tokens) == "photo of golf ball"
    assert len(tokens) == 4


def test_vocab_unknown_maps_to_reserved_id(vocab):
    assert vocab.encode("photo of zebra") == [vocab.token_to_id["photo"], vocab.token_to_id["of"], 0]
    assert vocab.decode([0]) == "<unk>"


def test_vocab_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "vocab.json")
    loaded = Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.token_to_id == vocab.token_to_id


def test_vocab_empty_text_rejected(vocab):
    with pytest.raises(ValueError, match="empty"):
        vocab.encode("   ")


def test_embed_prompt_shape_and_rows(embedder, vocab):
    tokens = vocab.encode("photo of circle")
    emb = embed_prompt(embedder, tokens)
    assert emb.shape == (3, 16)
    expected = embedder.table[tokens[0]] + embedder.positional[0]
    assert np.array_equal(emb[0], expected)


def test_embed_prompt_positional_offset(embedder, vocab):
    token = vocab.token_to_id["circle"]
    emb = embed_prompt(embedder, [token, token])
    delta = embedder.positional[1] - embedder.positional[0]
    assert np.allclose(emb[1] - emb[0], delta, atol=1e-6)


def test_embedder_seeded_and_frozen(vocab):
    a = PromptEmbedder.create(vocab, dim=16, max_len=8, seed=42)
    b = PromptEmbedder.create(vocab, dim=16, max_len=8, seed=42)
    assert np.array_equal(a.table, b.table)
    assert np.array_equal(a.positional, b.positional)
    assert a.frozen
    c = PromptEmbedder.create(vocab, dim=16, max_len=8, seed=43)
    assert not np.array_equal(a.table, c.table)


def test_embedder_save_load(tmp_path, embedder):
    embedder.save(tmp_path / "embedder.ckpt")
    loaded = PromptEmbedder.load(tmp_path / "embedder.ckpt")
    assert np.array_equal(loaded.table, embedder.table)
    assert loaded.vocab.token_to_id == embedder.vocab.token_to_id


def test_embed_prompt_errors(embedder):
    with pytest.raises(ValueError, match="non-empty"):
        embed_prompt(embedder, [])
    with pytest.raises(ValueError, match="exceeds"):
        embed_prompt(embedder, [0] * 9)
    with pytest.raises(ValueError, match="vocabulary"):
        embed_prompt(embedder, [10_000])


def test_encoder_output_shape_and_determinism():
    encoder = create_difficulty_encoder(num_classes=3, heads=5, dim=16, seed=7)
    out_a = encode_difficulty(encoder, 0.37, 1)
    out_b = encode_difficulty(encoder, 0.37, 1)
    assert out_a.shape == (5, 16)
    assert np.array_equal(out_a, out_b)


def test_encoder_zero_parameters_give_zero_embedding():
    encoder = create_difficulty_encoder(num_classes=2, heads=3, dim=4, seed=1)
    with torch.no_grad():
        for p in encoder.parameters():
            p.zero_()
    assert np.array_equal(encode_difficulty(encoder, 0.5, 0), np.zeros((3, 4), dtype=np.float32))


def test_encoder_argument_validation():
    encoder = create_difficulty_encoder(num_classes=3, heads=2, dim=4, seed=0)
    with pytest.raises(ValueError, match="difficulty"):
        encode_difficulty(encoder, 1.5, 0)
    with pytest.raises(ValueError, match="difficulty"):
        encode_difficulty(encoder, -0.1, 0)
    with pytest.raises(ValueError, match="class"):
        encode_difficulty(encoder, 0.5, 3)


def test_encoder_save_load(tmp_path):
    encoder = create_difficulty_encoder(num_classes=3, heads=4, dim=8, seed=3)
    encoder.save(tmp_path / "enc.ckpt")
    from hardgen.conditioning import DifficultyEncoder

    loaded = DifficultyEncoder.load(tmp_path / "enc.ckpt")
    assert np.array_equal(encode_difficulty(loaded, 0.4, 2), encode_difficulty(encoder, 0.4, 2))


def test_encoder_gradient_matches_finite_differences():
    # d/dd of output coordinates, double precision, central differences
    encoder = create_difficulty_encoder(num_classes=3, heads=3, dim=5, seed=11).double()
    y = torch.tensor([1])
    d0, h = 0.4375, 1e-6
    d_var = torch.tensor([d0], dtype=torch.float64, requires_grad=True)
    out = encoder(d_var, y)
    coords = [(0, 0), (1, 2), (2, 4)]
    for i, j in coords:
        grad = torch.autograd.grad(out[0, i, j], d_var, retain_graph=True)[0].item()
        with torch.no_grad():
            hi = encoder(torch.tensor([d0 + h], dtype=torch.float64), y)[0, i, j].item()
            lo = encoder(torch.tensor([d0 - h], dtype=torch.float64), y)[0, i, j].item()
        fd = (hi - lo) / (2 * h)
        assert abs(grad - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_encoder_is_continuous_in_d():
    encoder = create_difficulty_encoder(num_classes=3, heads=4, dim=6, seed=5).double()
    y = torch.tensor([0])
    d0, eps = 0.5, 1e-6
    d_var = torch.tensor([d0], dtype=torch.float64, requires_grad=True)
    out = encoder(d_var, y)
    grad_norm = torch.autograd.grad(out.sum(), d_var)[0].abs().item()
    with torch.no_grad():
        delta = (
            encoder(torch.tensor([d0 + eps], dtype=torch.float64), y)
            - encoder(torch.tensor([d0], dtype=torch.float64), y)
        ).norm().item()
    # locally Lipschitz: the step changes the output no faster than its gradient allows
    assert delta <= (grad_norm + 1.0) * eps * 10


def test_build_condition_row_layout():
    prompt = np.arange(8 * 4, dtype=np.float32).reshape(8, 4)
    diff = -np.arange(50 * 4, dtype=np.float32).reshape(50, 4)
    cond = build_condition(prompt, diff)
    assert cond.vectors.shape == (58, 4)
    assert cond.prompt_len == 8
    assert cond.provenance == "text_and_difficulty"
    assert np.array_equal(cond.prompt_block(), prompt)
    assert np.array_equal(cond.difficulty_block(), diff)


def test_build_condition_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        build_condition(np.zeros((2, 4), dtype=np.float32), np.zeros((3, 5), dtype=np.float32))


def test_build_condition_empty_difficulty_block_is_text_only():
    prompt = np.ones((3, 4), dtype=np.float32)
    cond = build_condition(prompt, np.zeros((0, 4), dtype=np.float32))
    assert cond.provenance == "text_only"
    assert np.array_equal(cond.vectors, prompt)


def test_difficulty_only_condition():
    diff = np.ones((50, 4), dtype=np.float32)
    cond = build_condition_difficulty_only(diff)
    assert cond.vectors.shape == (50, 4)
    assert cond.provenance == "difficulty_only"
    assert cond.prompt_len == 0
    via_empty_prompt = build_condition(np.zeros((0, 4), dtype=np.float32), diff)
    assert via_empty_prompt.provenance == "difficulty_only"
    assert np.array_equal(via_empty_prompt.vectors, cond.vectors)


def test_null_condition_stable_and_zero():
    a = null_condition(8, length=2)
    b = null_condition(8, length=2)
    assert a.provenance == "null"
    assert np.array_equal(a.vectors, b.vectors)
    assert np.array_equal(a.vectors, np.zeros((2, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="length"):
        null_condition(8, length=0)


def test_condition_provenance_consistency():
    with pytest.raises(ValueError, match="text_only"):
        Condition(vectors=np.zeros((3, 4), dtype=np.float32), prompt_len=2, provenance="text_only")
    with pytest.raises(ValueError, match="both blocks"):
        Condition(vectors=np.zeros((3, 4), dtype=np.float32), prompt_len=0, provenance="text_and_difficulty")
    with pytest.raises(ValueError, match="no prompt rows"):
        Condition(vectors=np.zeros((3, 4), dtype=np.float32), prompt_len=1, provenance="null")
