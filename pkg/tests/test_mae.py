import json

import numpy as np
import pytest

from seqprog import tensor as T
from seqprog.data.preprocess import preprocess_image
from seqprog.data.synth import SynthConfig, generate_synthetic_cohort
from seqprog.errors import DataError, DimensionError
from seqprog.mae import (MAEConfig, MAEModel, extract_embedding, extract_embeddings, load_mae, mae_forward, patchify,
                         pretrain, sample_mask, unpatchify)

TINY = MAEConfig(image_size=8, patch_size=4, encoder_dim=8, encoder_layers=1, encoder_heads=2,
                 decoder_dim=8, decoder_heads=2, batch_size=8)


@pytest.fixture(scope="module")
def synthetic_images():
    cohort = generate_synthetic_cohort(SynthConfig(n_patients=80, image_size=32, seed=3))
    return list(cohort.images.values())[:200]


def test_config_presets():
    desk = MAEConfig()
    assert (desk.image_size, desk.patch_size, desk.encoder_dim, desk.num_patches) == (32, 8, 64, 16)
    big = MAEConfig.full_scale()
    assert (big.image_size, big.patch_size, big.encoder_dim, big.mask_ratio) == (224, 16, 768, 0.75)
    assert big.num_patches == 196 and big.num_masked == 147
    with pytest.raises(ValueError):
        MAEConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        MAEConfig(mask_ratio=1.0)


def test_patchify_examples(rng):
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
    x = rng.random((32, 32, 3))
    p = patchify(x, 8)
    assert p.shape == (16, 192)
    np.testing.assert_array_equal(p[1].reshape(8, 8, 3), x[:8, 8:16])
    np.testing.assert_array_equal(unpatchify(p, 8, 32, 32), x)
    with pytest.raises(DimensionError):
        patchify(np.zeros((30, 32, 3)), 8)


def test_sample_mask_examples():
    assert sample_mask(196, 0.75, seed=0).mask.sum() == 147
    plan = sample_mask(16, 0.75, seed=1)
    assert plan.mask.sum() == 12
    np.testing.assert_array_equal(np.sort(plan.order[:12]), plan.masked)
    with pytest.raises(ValueError):
        sample_mask(4, 0.1, seed=0)
    with pytest.raises(ValueError):
        sample_mask(4, 0.9, seed=0)


def test_mask_marginals_are_uniform():
    hits = np.zeros(16)
    for seed in range(1000):
        hits += sample_mask(16, 0.75, seed).mask
    assert np.all(np.abs(hits - 750) <= 50)


def test_untrained_loss_is_finite_positive(rng):
    model = MAEModel(TINY, seed=0)
    img = rng.standard_normal((8, 8, 3)).astype(np.float32)
    loss = mae_forward(img, sample_mask(4, 0.75, 0), model).item()
    assert np.isfinite(loss) and loss > 0


def test_visible_targets_do_not_enter_the_loss(f64, rng):
    model = MAEModel(TINY, seed=1)
    img = rng.standard_normal((8, 8, 3))
    plan = sample_mask(4, 0.5, seed=2)
    base = mae_forward(img, plan, model, target=img).item()
    target = img.copy()
    vis = plan.visible[0]
    r, c = divmod(int(vis), 2)
    target[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4] += 100.0
    assert mae_forward(img, plan, model, target=target).item() == base
    hidden = plan.masked[0]
    r, c = divmod(int(hidden), 2)
    target[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4] += 1.0
    assert mae_forward(img, plan, model, target=target).item() != base


def test_loss_is_equivariant_to_patch_relabelling(f64, rng):
    model = MAEModel(TINY, seed=2)
    patches = rng.standard_normal((2, 4, 48))
    mask = np.array([[1, 0, 1, 1], [1, 1, 0, 1]], bool)
    base = model.forward_loss(patches, mask).item()
    perm = np.array([2, 0, 3, 1])
    model.pos_embed.data = model.pos_embed.data[perm]
    model.decoder_pos_embed.data = model.decoder_pos_embed.data[perm]
    assert model.forward_loss(patches[:, perm], mask[:, perm]).item() == pytest.approx(base, rel=1e-12)


def test_gradients_reach_encoder_and_decoder(f64, rng):
    model = MAEModel(TINY, seed=3)
    loss = model.forward_loss(rng.standard_normal((2, 4, 48)), np.array([[1, 1, 1, 0], [0, 1, 1, 1]], bool))
    loss.backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert missing == []


def test_embedding_contract(rng):
    model = MAEModel(TINY, seed=4)
    img = preprocess_image(rng.integers(0, 255, (8, 8, 3), dtype=np.uint8), size=8)
    e = extract_embedding(img, model)
    assert e.shape == (8,)
    np.testing.assert_array_equal(e, extract_embedding(img.copy(), model))
    with pytest.raises(DimensionError):
        extract_embeddings([np.zeros((16, 16, 3), np.float32)], model)


def test_pretrain_zero_epochs_is_initialisation(tmp_path, rng):
    corpus = [rng.integers(0, 255, (8, 8, 3), dtype=np.uint8) for _ in range(4)]
    res = pretrain(corpus, TINY, 0, seed=9, out_dir=tmp_path)
    init_seed = int(np.random.SeedSequence(9).generate_state(2)[0])
    fresh = MAEModel(TINY, seed=init_seed).state_dict()
    for k, v in res.model.state_dict().items():
        assert v.tobytes() == fresh[k].tobytes()
    assert res.log == [] and (tmp_path / "mae.ckpt").exists()
    assert (tmp_path / "pretrain_log.jsonl").read_text() == ""


def test_pretrain_is_deterministic_and_logs_each_epoch(tmp_path, rng):
    corpus = [rng.integers(0, 255, (8, 8, 3), dtype=np.uint8) for _ in range(10)]
    with T.deterministic_mode():
        pretrain(corpus, TINY, 3, seed=5, out_dir=tmp_path / "a")
        pretrain(corpus, TINY, 3, seed=5, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "mae.ckpt").read_bytes() == (tmp_path / "b" / "mae.ckpt").read_bytes()
    log = [json.loads(x) for x in (tmp_path / "a" / "pretrain_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert all(np.isfinite(r["loss"]) for r in log)
    model = load_mae(tmp_path / "a" / "mae.ckpt")
    assert model.cfg == TINY


def test_pretrain_accepts_joint_unlabelled_corpora(rng):
    first = [rng.integers(0, 255, (8, 8, 3), dtype=np.uint8) for _ in range(3)]
    second = [rng.random((12, 12, 3)).astype(np.float32) for _ in range(2)]
    assert len(pretrain(first + second, TINY, 1, seed=0).log) == 1
    with pytest.raises(DataError):
        pretrain([], TINY, 1, seed=0)


def test_pretraining_halves_reconstruction_loss(synthetic_images):
    cfg = MAEConfig()
    trained = pretrain(synthetic_images, cfg, 20, seed=0).model
    initial = pretrain(synthetic_images, cfg, 0, seed=0).model
    x = patchify(np.stack([preprocess_image(i) for i in synthetic_images]), cfg.patch_size)
    rng = np.random.default_rng(5)
    mask = np.stack([sample_mask(16, 0.75, rng).mask for _ in synthetic_images])
    with T.no_grad():
        before = initial.forward_loss(x, mask).item()
        after = trained.forward_loss(x, mask).item()
    assert after <= 0.5 * before

    # a trained encoder notices a single blanked patch
    img = preprocess_image(synthetic_images[0])
    blanked = img.copy()
    blanked[8:16, 8:16] = 0.0
    assert not np.allclose(extract_embedding(img, trained), extract_embedding(blanked, trained))
