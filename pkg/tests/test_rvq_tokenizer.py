import numpy as np
import pytest
import torch

from rvq_tokenizer import (QuantizerError, ResidualQuantizer, RvqConfig, RvqVae, degenerate_levels, dequantize,
                           ema_update, load_tokens, nearest_entries, pad_to_multiple, quantize, rvq_loss,
                           save_tokens)


def tiny_config(**overrides):
    values = dict(levels=3, codebook_size=16, latent_dim=8, hidden_dim=16, num_res_blocks=1)
    values.update(overrides)
    return RvqConfig(**values)


def test_two_level_hand_example():
    books = torch.tensor([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]])
    result = quantize(torch.tensor([[1.0, 1.0]]), books)
    assert result.tokens.tolist() == [[1], [1]]
    np.testing.assert_allclose(result.quantized.numpy(), [[1.0, 1.0]])
    np.testing.assert_allclose(result.residuals[-1].numpy(), [[0.0, 0.0]])


def test_codebook_entry_has_zero_residual(torch_gen):
    books = torch.randn(1, 8, 4, generator=torch_gen)
    result = quantize(books[0, 5:6], books)
    assert result.tokens.item() == 5
    assert torch.equal(result.quantized, books[0, 5:6])
    assert float(result.residuals[-1].abs().max()) == 0.0


def test_selection_matches_brute_force(torch_gen):
    books = torch.randn(3, 8, 5, generator=torch_gen, dtype=torch.float64)
    z = torch.randn(100, 5, generator=torch_gen, dtype=torch.float64)
    result = quantize(z, books)
    residual = z.clone()
    for level in range(3):
        for i in range(100):
            dists = [float(((residual[i] - books[level, k]) ** 2).sum()) for k in range(8)]
            assert result.tokens[level, i].item() == int(np.argmin(dists))
        residual = residual - books[level, result.tokens[level]]


def test_residual_algebra(torch_gen):
    books = torch.randn(6, 32, 8, generator=torch_gen, dtype=torch.float64)
    z = torch.randn(2, 75, 8, generator=torch_gen, dtype=torch.float64)
    result = quantize(z, books)
    assert len(result.residuals) == 7
    torch.testing.assert_close(z - result.quantized, result.residuals[-1], atol=1e-12, rtol=0)
    for level in range(6):
        assert torch.equal(result.residuals[level + 1],
                           result.residuals[level] - result.quantized_residuals[level])
    assert result.tokens.min() >= 0 and result.tokens.max() < 32
    assert result.residual_norms.shape == (7,)


def test_dequantize_matches_quantized(torch_gen):
    books = torch.randn(4, 16, 6, generator=torch_gen)
    z = torch.randn(3, 10, 6, generator=torch_gen)
    result = quantize(z, books)
    assert torch.equal(dequantize(result.tokens, books), result.quantized)


def test_dequantize_zero_entries_and_single_level(torch_gen):
    books = torch.randn(2, 4, 3, generator=torch_gen)
    books[:, 0] = 0.0
    assert float(dequantize(torch.zeros(2, 5, dtype=torch.long), books).abs().max()) == 0.0
    tokens = torch.tensor([[3, 1, 2]])
    assert torch.equal(dequantize(tokens, books[:1]), books[0, tokens[0]])


def test_dequantize_rejects_out_of_range():
    books = torch.zeros(2, 4, 3)
    with pytest.raises(QuantizerError):
        dequantize(torch.tensor([[0, 4], [0, 0]]), books)
    with pytest.raises(QuantizerError):
        quantize(torch.zeros(5, 2), books)


def test_nearest_ties_resolve_low():
    book = torch.tensor([[1.0], [-1.0]])
    assert nearest_entries(torch.tensor([[0.0]]), book).item() == 0


def test_degenerate_levels_detected():
    books = torch.zeros(2, 4, 3)
    books[1, 2] = 1.0
    assert degenerate_levels(books) == [0]


def test_loss_zero_on_perfect_reconstruction(torch_gen):
    x = torch.randn(2, 10, 5, generator=torch_gen)
    r = [torch.randn(2, 5, 4, generator=torch_gen) for _ in range(3)]
    losses = rvq_loss(x, x.clone(), r, [t.clone() for t in r], beta=0.02)
    assert float(losses["loss"]) == 0.0


def test_beta_zero_is_l1(torch_gen):
    x = torch.randn(2, 10, 5, generator=torch_gen)
    x_hat = torch.randn(2, 10, 5, generator=torch_gen)
    r = [torch.randn(2, 5, 4, generator=torch_gen)]
    losses = rvq_loss(x, x_hat, r, [torch.zeros_like(r[0])], beta=0.0)
    torch.testing.assert_close(losses["loss"], (x - x_hat).abs().mean())


def test_commitment_gradient_matches_finite_differences(torch_gen):
    x = torch.randn(1, 4, 3, generator=torch_gen, dtype=torch.float64)
    r_hat = torch.randn(1, 2, 3, generator=torch_gen, dtype=torch.float64)
    r = torch.randn(1, 2, 3, generator=torch_gen, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: rvq_loss(x, x, [t], [r_hat], beta=0.02)["loss"], (r,),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)


def test_ema_closed_form():
    entries = torch.tensor([[0.0, 0.0], [5.0, 5.0]])
    count = torch.ones(2)
    total = entries.clone()
    vectors = torch.tensor([[1.0, 2.0]])
    new_entries, new_count, _, usage = ema_update(entries, count, total, vectors, torch.tensor([0]), 0.99)
    torch.testing.assert_close(new_entries[0], 0.99 * entries[0] + 0.01 * vectors[0])
    assert torch.equal(new_entries[1], entries[1])
    assert usage.tolist() == [1.0, 0.0]
    torch.testing.assert_close(new_count, torch.tensor([1.0, 1.0]))


def test_ema_fixed_point():
    entries = torch.zeros(1, 3, dtype=torch.float64)
    count, total = torch.ones(1, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64)
    v = torch.tensor([[0.5, -1.0, 2.0]], dtype=torch.float64)
    for _ in range(2000):
        entries, count, total, _ = ema_update(entries, count, total, v, torch.tensor([0]), 0.99)
    # the entry converges as v * (1 - 0.99 ** n)
    torch.testing.assert_close(entries[0], v[0], atol=1e-8, rtol=0)


def test_dead_entries_are_reseeded(torch_gen):
    quantizer = ResidualQuantizer(tiny_config(levels=1, codebook_size=4, latent_dim=2))
    quantizer.generator = torch_gen
    quantizer.codebooks[0] = torch.arange(8, dtype=torch.float32).reshape(4, 2)
    vectors = torch.zeros(5, 2)
    assignments = torch.zeros(5, dtype=torch.long)
    for _ in range(255):
        assert quantizer.update_codebooks(0, vectors, assignments) == 0
    assert quantizer.update_codebooks(0, vectors, assignments) == 3
    assert quantizer.reseeded[0].tolist() == [False, True, True, True]


def test_pad_to_multiple():
    x = torch.arange(5.0).reshape(1, 5, 1)
    padded, length = pad_to_multiple(x, 2)
    assert length == 5 and padded.shape[1] == 6 and padded[0, -1, 0] == 4.0


@pytest.mark.parametrize("downsample, frames, steps", [(2, 150, 75), (1, 150, 150), (2, 9, 5)])
def test_encode_decode_lengths(downsample, frames, steps):
    model = RvqVae(29, tiny_config(temporal_downsample=downsample)).eval()
    z = model.encode(torch.zeros(2, frames, 29))
    assert z.shape == (2, steps, 8)
    assert model.decode(z).shape == (2, steps * downsample, 29)


def test_forward_tokens_and_straight_through(torch_gen):
    torch.manual_seed(0)
    model = RvqVae(29, tiny_config()).train()
    model.quantizer.generator = torch_gen
    x = torch.randn(4, 20, 29, generator=torch_gen)
    out = model(x)
    assert out["tokens"].shape == (4, 3, 10)
    assert out["x_hat"].shape == x.shape
    assert bool(model.quantizer.initialized.all())
    out["loss"].backward()
    grad = sum(float(p.grad.norm()) for p in model.encoder.parameters() if p.grad is not None)
    assert grad > 0


def test_tokenize_is_deterministic(torch_gen):
    model = RvqVae(29, tiny_config()).train()
    model.quantizer.generator = torch_gen
    x = torch.randn(3, 12, 29, generator=torch_gen)
    model(x)
    model.eval()
    tokens = model.tokenize(x)
    assert torch.equal(tokens, model.tokenize(x))
    assert torch.equal(model.detokenize(tokens), model.detokenize(tokens))
    assert tokens.min() >= 0 and tokens.max() < 16


def test_config_validation():
    with pytest.raises(QuantizerError):
        RvqConfig(levels=0)
    with pytest.raises(QuantizerError):
        RvqConfig(ema_decay=1.0)


def test_token_file(tmp_path, torch_gen):
    tokens = torch.randint(0, 512, (6, 75), generator=torch_gen).numpy()
    path = str(tmp_path / "t.egot")
    save_tokens(path, tokens, 512)
    loaded, size = load_tokens(path)
    assert size == 512
    np.testing.assert_array_equal(loaded, tokens)
    with open(path, "rb") as f:
        assert len(f.read()) == 17 + 2 * 6 * 75
    with pytest.raises(QuantizerError):
        save_tokens(path, tokens, 100)
    with open(path, "wb") as f:
        f.write(b"XXXXX" + bytes(12))
    with pytest.raises(QuantizerError):
        load_tokens(path)


@pytest.mark.slow
def test_reconstruction_improves_with_training(torch_gen):
    torch.manual_seed(0)
    t = torch.linspace(0, 1, 32)
    phases = torch.rand(64, 1, 1, generator=torch_gen) * 6.0
    x = torch.sin(6.0 * t[None, :, None] + phases + torch.arange(29.0) * 0.1)
    model = RvqVae(29, tiny_config(levels=2, codebook_size=32)).train()
    model.quantizer.generator = torch_gen
    optimizer = torch.optim.Adam(model.parameters(), lr=2e-3)
    first = None
    for _ in range(150):
        out = model(x)
        optimizer.zero_grad()
        out["loss"].backward()
        optimizer.step()
        first = float(out["recon"]) if first is None else first
    model.eval()
    final = float((model.detokenize(model.tokenize(x))[:, :32] - x).abs().mean())
    assert final < 0.8 * first


def test_encode_records_unpadded_length():
    model = RvqVae(29, tiny_config(temporal_downsample=2)).eval()
    z, length = model.encode(torch.zeros(1, 151, 29), return_length=True)
    assert z.shape[1] == 76 and length == 151
    assert model.decode(z, length).shape == (1, 151, 29)
