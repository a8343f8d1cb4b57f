import math

import numpy as np
import pytest
import torch

from delay_schedule import delay
from reasoner import (UNKNOWN_WORD_ID, ConditionBundle, ConditionError, Reasoner, ReasonerConfig, ablate_condition,
                      collate_bundles, delayed_nll, freeze, sample_logits)

FEATURE_DIM = 29
K, LEVELS, STEPS = 16, 3, 6


def small_reasoner(**overrides):
    values = dict(codebook_size=K, levels=LEVELS, feature_dim=FEATURE_DIM, max_motion_steps=STEPS + LEVELS - 1,
                  layers=2, model_dim=32, heads=4)
    values.update(overrides)
    torch.manual_seed(0)
    return Reasoner(ReasonerConfig(**values)).eval()


def bundle(rng, words=(6, 7, 11)):
    return ConditionBundle(rng.normal(size=16), np.array(words), rng.normal(size=FEATURE_DIM))


def test_collate_pads_and_masks(rng):
    batch = collate_bundles([bundle(rng, (6, 7)), bundle(rng, (6, 7, 11, 12))])
    assert batch.instruction.shape == (2, 4)
    assert batch.instruction[0].tolist() == [6, 7, 0, 0]
    assert batch.instruction_mask[0].tolist() == [True, True, False, False]
    assert len(batch) == 2 and len(batch.select(torch.tensor([1]))) == 1


def test_bundle_validation():
    with pytest.raises(ConditionError):
        ConditionBundle(np.zeros(16), np.array([], dtype=np.int64), np.zeros(FEATURE_DIM))
    with pytest.raises(ConditionError):
        ConditionBundle(np.full(16, np.nan), np.array([6]), np.zeros(FEATURE_DIM))


def test_prefix_length_is_text_plus_two(rng):
    model = small_reasoner()
    for words in ((6,), (6, 7, 11, 12, 13)):
        prefix, padding = model.embed_condition(collate_bundles([bundle(rng, words)]))
        assert prefix.shape == (1, len(words) + 2, 32)
        assert padding.shape == (1, len(words) + 2)


def test_zero_inputs_give_finite_embeddings():
    model = small_reasoner()
    batch = collate_bundles([ConditionBundle(np.zeros(16), np.array([6]), np.zeros(FEATURE_DIM))])
    prefix, _ = model.embed_condition(batch)
    assert torch.isfinite(prefix).all()
    assert torch.isfinite(model.extract_hidden(batch)[0]).all()


def test_word_order_changes_prefix(rng):
    model = small_reasoner()
    a = bundle(rng, (6, 7, 11))
    b = ConditionBundle(a.image_feature, np.array([11, 7, 6]), a.init_pose)
    pa, _ = model.embed_condition(collate_bundles([a]))
    pb, _ = model.embed_condition(collate_bundles([b]))
    assert not torch.allclose(pa, pb)


def test_over_length_instruction_raises(rng):
    model = small_reasoner(max_text_len=4)
    with pytest.raises(ConditionError):
        model.embed_condition(collate_bundles([bundle(rng, (6, 7, 8, 9, 10))]))


def test_logits_shape(rng, torch_gen):
    model = small_reasoner()
    batch = collate_bundles([bundle(rng), bundle(rng)])
    tokens = torch.randint(0, K, (2, LEVELS, STEPS), generator=torch_gen)
    logits = model(batch, delay(tokens, K))
    assert logits.shape == (2, LEVELS, STEPS + LEVELS - 1, K + 3)


def test_causal_mask(rng, torch_gen):
    model = small_reasoner()
    batch = collate_bundles([bundle(rng)])
    delayed = delay(torch.randint(0, K, (1, LEVELS, STEPS), generator=torch_gen), K)
    base = model(batch, delayed)
    for step in range(delayed.shape[-1]):
        changed = delayed.clone()
        changed[:, :, step] = (changed[:, :, step] + 1) % K
        logits = model(batch, changed)
        assert torch.equal(logits[:, :, :step + 1], base[:, :, :step + 1])


def test_padding_does_not_leak_into_prefix_states(rng):
    model = small_reasoner()
    short = bundle(rng, (6, 7))
    long = bundle(rng, (6, 7, 11, 12, 13))
    alone, _ = model.extract_hidden(collate_bundles([short]))
    batched, padding = model.extract_hidden(collate_bundles([short, long]))
    keep = ~padding[0]
    torch.testing.assert_close(batched[0][keep], alone[0], atol=1e-5, rtol=1e-5)


def test_loss_closed_forms(torch_gen):
    targets = delay(torch.randint(0, K, (2, LEVELS, STEPS), generator=torch_gen), K)
    V = K + 3
    onehot = torch.nn.functional.one_hot(targets, V).float() * 1e4
    assert float(delayed_nll(onehot, targets)) == pytest.approx(0.0, abs=1e-6)
    uniform = torch.zeros(2, LEVELS, targets.shape[-1], V)
    assert float(delayed_nll(uniform, targets)) == pytest.approx(math.log(V), rel=1e-6)


def test_loss_ignores_padded_positions(torch_gen):
    targets = delay(torch.randint(0, K, (2, LEVELS, STEPS), generator=torch_gen), K)
    V = K + 3
    logits = torch.randn(2, LEVELS, targets.shape[-1], V, generator=torch_gen)
    base = delayed_nll(logits, targets)
    padded = targets == K
    assert int(padded.sum()) == 2 * LEVELS * (LEVELS - 1)
    noisy = logits.clone()
    noisy[padded] += 100.0 * torch.randn(int(padded.sum()), V, generator=torch_gen)
    assert torch.equal(delayed_nll(noisy, targets), base)
    noisy[..., 0] += 5.0
    assert not torch.equal(delayed_nll(noisy, targets), base)


def test_hidden_states_shape_and_determinism(rng):
    model = small_reasoner()
    a = bundle(rng, (6, 7, 11, 12))
    h, padding = model.extract_hidden(a)
    assert h.shape == (6, 32) and padding.shape == (6,)
    assert torch.equal(h, model.extract_hidden(a)[0])
    b = ConditionBundle(a.image_feature, np.array([6, 7, 11, 13]), a.init_pose)
    assert float((model.extract_hidden(b)[0] - h).norm()) > 0


def test_generate_tokens_range_and_greedy_determinism(rng):
    model = small_reasoner()
    batch = collate_bundles([bundle(rng), bundle(rng)])
    tokens = model.generate_tokens(batch, STEPS)
    assert tokens.shape == (2, LEVELS, STEPS)
    assert int(tokens.min()) >= 0 and int(tokens.max()) < K
    assert torch.equal(tokens, model.generate_tokens(batch, STEPS))


def test_sampling_respects_top_k(torch_gen):
    logits = torch.tensor([[0.0, 5.0, 4.0, -3.0]]).repeat(200, 1)
    picks = sample_logits(logits, temperature=1.0, top_k=2, generator=torch_gen)
    assert set(picks.tolist()) <= {1, 2}
    assert sample_logits(logits[:1]).item() == 1


def test_ablation_modes(rng):
    batch = collate_bundles([bundle(rng), bundle(rng)])
    visual = ablate_condition(batch, "visual_only")
    assert visual.instruction.tolist() == [[UNKNOWN_WORD_ID], [UNKNOWN_WORD_ID]]
    assert torch.equal(visual.image, batch.image)
    language = ablate_condition(batch, "language_only")
    assert float(language.image.abs().max()) == 0.0
    assert torch.equal(language.instruction, batch.instruction)
    assert ablate_condition(batch, "full") is batch
    with pytest.raises(ConditionError):
        ablate_condition(batch, "audio_only")


def test_freeze_disables_gradients():
    model = freeze(small_reasoner().train())
    assert not model.training
    assert all(not p.requires_grad for p in model.parameters())


@pytest.mark.slow
def test_greedy_decoding_memorizes_small_set(rng, torch_gen):
    model = small_reasoner(model_dim=64).train()
    batch = collate_bundles([bundle(rng, (6 + i % 3, 11 + i % 4)) for i in range(8)])
    tokens = torch.randint(0, K, (8, LEVELS, STEPS), generator=torch_gen)
    optimizer = torch.optim.AdamW(model.parameters(), lr=2e-3)
    losses = []
    for _ in range(400):
        loss = model.loss(batch, tokens)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    assert losses[-1] < losses[0]
    model.eval()
    accuracy = float((model.generate_tokens(batch, STEPS) == tokens).float().mean())
    assert accuracy >= 0.9


@pytest.mark.slow
def test_loss_decreases_on_toy_set(rng, torch_gen):
    model = small_reasoner().train()
    batch = collate_bundles([bundle(rng, (6 + i % 5,)) for i in range(32)])
    tokens = torch.randint(0, K, (32, LEVELS, STEPS), generator=torch_gen)
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
    first = None
    for _ in range(200):
        loss = model.loss(batch, tokens)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        first = float(loss) if first is None else first
    assert float(model.loss(batch, tokens)) < first
