import math

import numpy as np
import pytest
import torch

from evaluator import EvaluatorConfig, RetrievalEvaluator, embed_all, train_evaluator
from metrics import r_precision
from reasoner import ConditionBundle, collate_bundles

FEATURE_DIM = 29


def small_evaluator():
    torch.manual_seed(0)
    cfg = EvaluatorConfig(feature_dim=FEATURE_DIM, max_frames=40, model_dim=32, embed_dim=16, heads=4,
                          motion_layers=1, fusion_layers=1)
    return RetrievalEvaluator(cfg).eval()


def conditions(rng, count, words=(6, 7)):
    return collate_bundles([ConditionBundle(rng.normal(size=16), np.array(words[:1 + i % len(words)]),
                                            np.zeros(FEATURE_DIM)) for i in range(count)])


def test_embeddings_are_unit_vectors(rng, torch_gen):
    model = small_evaluator()
    motion = model.embed_motion(torch.randn(3, 20, FEATURE_DIM, generator=torch_gen))
    cond = model.embed_condition(conditions(rng, 3))
    assert motion.shape == (3, 16) and cond.shape == (3, 16)
    torch.testing.assert_close(motion.norm(dim=-1), torch.ones(3))
    torch.testing.assert_close(cond.norm(dim=-1), torch.ones(3))


def test_embedding_is_deterministic(rng, torch_gen):
    model = small_evaluator()
    x = torch.randn(2, 20, FEATURE_DIM, generator=torch_gen)
    assert torch.equal(model.embed_motion(x), model.embed_motion(x))


def test_condition_embedding_ignores_batch_padding(rng):
    model = small_evaluator()
    short = ConditionBundle(rng.normal(size=16), np.array([6]), np.zeros(FEATURE_DIM))
    long = ConditionBundle(rng.normal(size=16), np.array([6, 7, 11, 12]), np.zeros(FEATURE_DIM))
    alone = model.embed_condition(collate_bundles([short]))
    batched = model.embed_condition(collate_bundles([short, long]))
    torch.testing.assert_close(batched[:1], alone, atol=1e-5, rtol=1e-5)


def test_contrastive_loss_closed_forms():
    model = small_evaluator()
    same = torch.nn.functional.normalize(torch.ones(4, 16), dim=-1)
    assert float(model.contrastive_loss(same, same)) == pytest.approx(math.log(4), rel=1e-6)
    aligned = torch.eye(16)[:4]
    assert float(model.contrastive_loss(aligned, aligned)) < 1e-4


def test_temperature_is_clamped():
    model = small_evaluator()
    with torch.no_grad():
        model.temp.fill_(5.0)
    model.contrastive_loss(torch.eye(4), torch.eye(4))
    assert float(model.temp) == pytest.approx(0.5)


def test_embed_all_matches_direct_calls(rng, torch_gen):
    model = small_evaluator()
    x = torch.randn(5, 20, FEATURE_DIM, generator=torch_gen)
    batch = conditions(rng, 5)
    out = embed_all(model, x, batch, chunk=2)
    np.testing.assert_allclose(out["motion"], model.embed_motion(x).detach().numpy(), atol=1e-6)
    np.testing.assert_allclose(out["condition"], model.embed_condition(batch).detach().numpy(), atol=1e-6)
    assert set(embed_all(model, features=x)) == {"motion"}


@pytest.mark.slow
def test_training_separates_paired_samples(rng, torch_gen):
    model = small_evaluator()
    count = 32
    batch = conditions(rng, count, words=(6, 7, 11, 12))
    # motion features carry the image feature so pairs are learnable
    t = torch.linspace(0, 1, 20)[None, :, None]
    features = torch.zeros(count, 20, FEATURE_DIM)
    features[..., :16] = batch.image[:, None, :] * torch.cos(3.0 * t)
    history = train_evaluator(model, features, batch, steps=300, lr=1e-3, batch_size=16, generator=torch_gen,
                              log_every=0)
    assert not model.training
    assert np.mean(history[-20:]) < np.mean(history[:20])
    embs = embed_all(model, features, batch)
    assert r_precision(embs["motion"], embs["condition"], batch=count) > 1.0 / count
