"""Dual encoder: determinism, sensitivity, similarity, adapters."""

import numpy as np
import pytest

from blockgen import autodiff as ad
from blockgen import diffusion as df
from blockgen import grammar as gr
from blockgen import losses as ls
from blockgen import render as rd
from blockgen.encoders import AdapterConfig, DualEncoder, Embedding, EncoderConfig
from blockgen.errors import ConfigError, DegenerateInputError, ShapeError, VocabularyError

CFG = gr.DEFAULT_CONFIG
VOCAB = df.Vocabulary.from_grammar(CFG)
ENC_CFG = EncoderConfig()


@pytest.fixture(scope="module")
def encoder():
    return DualEncoder(ENC_CFG, VOCAB, init_seed=3)


@pytest.fixture(scope="module")
def scene():
    return gr.generate_scene(8, CFG)


def test_encode_image_deterministic_and_finite(encoder, scene):
    img = rd.render_scene(scene)
    a = encoder.encode_image(img)
    b = encoder.encode_image(img)
    np.testing.assert_array_equal(a.vector, b.vector)
    assert a.vector.shape == (ENC_CFG.embed_dim,)
    zero = encoder.encode_image(np.zeros((32, 32, 3)))
    assert np.all(np.isfinite(zero.vector))


def test_encode_image_shape_error(encoder):
    with pytest.raises(ShapeError):
        encoder.encode_image(np.zeros((16, 16, 3)))


def test_one_pixel_image_perturbations_change_embedding(encoder):
    rng = np.random.default_rng(0)
    changed = 0
    for _ in range(100):
        img = rng.uniform(size=(32, 32, 3))
        img2 = img.copy()
        r, c, ch = rng.integers(32), rng.integers(32), rng.integers(3)
        img2[r, c, ch] = 1.0 - img2[r, c, ch]
        a = encoder.encode_image(img).vector
        b = encoder.encode_image(img2).vector
        changed += not np.array_equal(a, b)
    assert changed == 100


def test_encode_text_deterministic_and_order_sensitive(encoder, scene):
    caption = gr.render_caption(scene, CFG)
    a = encoder.encode_text(caption)
    b = encoder.encode_text(caption)
    np.testing.assert_array_equal(a.vector, b.vector)
    permuted = gr.permute_word_order(caption, 1, CFG)
    c = encoder.encode_text(permuted)
    assert not np.allclose(a.vector, c.vector)


def test_encode_text_errors(encoder):
    with pytest.raises(VocabularyError):
        encoder.encode_text([])
    with pytest.raises(VocabularyError):
        encoder.encode_text(["zorble"])


def test_similarity_in_range_and_matches_oracle(encoder, scene):
    rng = np.random.default_rng(1)
    for seed in range(20):
        s = gr.generate_scene(seed, CFG)
        img = rd.render_scene(s)
        cap = gr.render_caption(s, CFG)
        sim = encoder.similarity(img, cap)
        assert -1.0 - 1e-9 <= sim <= 1.0 + 1e-9
        zi = encoder.encode_image(img).vector
        zt = encoder.encode_text(cap).vector
        oracle = float(zi @ zt) / (np.linalg.norm(zi) * np.linalg.norm(zt))
        assert sim == pytest.approx(oracle, abs=1e-6)


def test_similarity_identity_and_orthogonal_and_scale_invariance(encoder):
    v = np.array([1.0, 2.0, -3.0, 0.5])
    a = Embedding(v, "image")
    assert DualEncoder.cosine(a, Embedding(v.copy(), "text")) == pytest.approx(1.0, abs=1e-12)
    w = np.array([2.0, -1.0, 0.0, 0.0])
    u = np.array([1.0, 2.0, 0.0, 0.0])
    assert DualEncoder.cosine(Embedding(w, "image"), Embedding(u, "text")) == pytest.approx(0.0, abs=1e-12)
    for c in (0.1, 3.0, 1234.5):
        scaled = Embedding(c * v, "text")
        assert DualEncoder.cosine(a, scaled) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(DegenerateInputError):
        DualEncoder.cosine(a, Embedding(np.zeros(4), "text"))


def test_batched_text_matches_single(encoder, scene):
    captions = [gr.render_caption(gr.generate_scene(s, CFG), CFG) for s in (1, 2, 3)]
    ids = [VOCAB.encode(c) for c in captions]
    batch = encoder.encode_texts_batch(ids).data
    for i, cap in enumerate(captions):
        single = encoder.encode_text(cap).vector
        np.testing.assert_allclose(batch[i], single, atol=1e-9)


# -- adapters ----------------------------------------------------------------


def test_zero_adapters_keep_forward_bit_identical(scene):
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    img = rd.render_scene(scene)
    cap = gr.render_caption(scene, CFG)
    before_i = enc.encode_image(img).vector
    before_t = enc.encode_text(cap).vector
    enc.apply_adapters(AdapterConfig(rank=4, alpha=4.0))
    after_i = enc.encode_image(img).vector
    after_t = enc.encode_text(cap).vector
    np.testing.assert_array_equal(before_i, after_i)
    np.testing.assert_array_equal(before_t, after_t)


def test_adapter_unknown_target_errors():
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    with pytest.raises(ConfigError):
        enc.apply_adapters(AdapterConfig(rank=2, alpha=2.0, target_layers=("nope.w",)))


def test_full_rank_adapter_reconstructs_dense_delta():
    # with rank == layer dim, A @ B can represent any dense update; fit a
    # random delta by least squares and compare forwards
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    dim = ENC_CFG.text_dim
    trainable = enc.apply_adapters(AdapterConfig(rank=dim, alpha=float(dim),
                                                 target_layers=("txt.head",)))
    a, b = enc.adapters["txt.head"]
    rng = np.random.default_rng(5)
    delta = rng.normal(size=(dim, ENC_CFG.embed_dim)) * 0.1
    # scale is alpha/rank = 1; solve A @ B = delta
    b.data = np.linalg.lstsq(a.data, delta, rcond=None)[0]
    x = rng.normal(size=(4, dim))
    base_w = enc.params["txt.head.w"].data
    base_b = enc.params["txt.head.b"].data
    expected = x @ (base_w + delta) + base_b
    got = enc._linear(ad.constant(x), "txt.head").data
    np.testing.assert_allclose(got, expected, atol=1e-8)


def test_gradients_flow_only_through_adapters():
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    trainable = enc.apply_adapters(AdapterConfig(rank=2, alpha=2.0))
    scenes = [gr.generate_scene(s, CFG) for s in (1, 2)]
    imgs = np.stack([rd.render_scene(s) for s in scenes])
    caps = [VOCAB.encode(gr.render_caption(s, CFG)) for s in scenes]
    sims = enc.similarity_matrix(enc.encode_images_batch(imgs), enc.encode_texts_batch(caps))
    loss, _ = ls.contrastive_loss(sims, 1.0)
    loss.backward()
    base_grads = [p.grad for p in enc.params.values()]
    assert all(g is None for g in base_grads)  # base is frozen
    adapter_grads = [t.grad for t in trainable.values()]
    assert any(g is not None and np.any(g) for g in adapter_grads)


def test_base_params_unchanged_by_adapter_training_step():
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    trainable = enc.apply_adapters(AdapterConfig(rank=2, alpha=2.0))
    snapshot = {k: v.data.copy() for k, v in enc.params.items()}
    opt = ad.Adam(trainable, lr=1e-2)
    scenes = [gr.generate_scene(s, CFG) for s in (1, 2)]
    imgs = np.stack([rd.render_scene(s) for s in scenes])
    caps = [VOCAB.encode(gr.render_caption(s, CFG)) for s in scenes]
    for _ in range(3):
        opt.zero_grad()
        sims = enc.similarity_matrix(enc.encode_images_batch(imgs), enc.encode_texts_batch(caps))
        loss, _ = ls.contrastive_loss(sims, 1.0)
        loss.backward()
        opt.step()
    for k, v in enc.params.items():
        np.testing.assert_array_equal(v.data, snapshot[k])
    a, b = enc.adapters["txt.head"]
    assert np.any(b.data)  # adapters actually moved


def test_encoder_checkpoint_and_overlay_round_trip(tmp_path, scene):
    enc = DualEncoder(ENC_CFG, VOCAB, init_seed=3)
    base_path = tmp_path / "encoder.ckpt"
    base_sha = enc.save(base_path)
    trainable = enc.apply_adapters(AdapterConfig(rank=2, alpha=2.0))
    for t in trainable.values():
        t.data = t.data + 0.01
    overlay = tmp_path / "adapters.ckpt"
    enc.save_adapter_overlay(overlay, base_sha, AdapterConfig(rank=2, alpha=2.0))

    img = rd.render_scene(scene)
    cap = gr.render_caption(scene, CFG)
    want = enc.similarity(img, cap)

    reloaded = DualEncoder.load(base_path)
    reloaded.load_adapter_overlay(overlay, expected_base_sha256=base_sha)
    assert reloaded.similarity(img, cap) == pytest.approx(want, abs=1e-12)

    from blockgen.errors import StateError
    with pytest.raises(StateError):
        reloaded.load_adapter_overlay(overlay, expected_base_sha256="deadbeef")
