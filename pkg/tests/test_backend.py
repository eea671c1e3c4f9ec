import numpy as np
import pytest
import torch

import oracles
from conftest import random_image
from vlattack.backend import (CapabilityError, EncoderOutput, LinearBackend, ToyBackend, ToyConfig, build_backend,
                              layer_diagnostics, resize_bilinear, value_and_grad)
from vlattack.core import ImageSample, TextSample, cosine


def test_toy_is_deterministic_and_finite(toy, rng):
    v = random_image(rng)
    a = toy.encode_image(v)
    b = ToyBackend(toy.config).encode_image(v)
    np.testing.assert_array_equal(a.layer_tokens, b.layer_tokens)
    assert a.layer_tokens.shape == (3, 17, 32)
    assert a.final_feature.shape == (32,)
    assert np.isfinite(a.layer_tokens).all() and np.isfinite(a.final_feature).all()


def test_image_forward_matches_numpy_oracle(rng):
    cfg = ToyConfig(image_size=4, patch_size=4, num_layers=2, seed=5)
    backend = ToyBackend(cfg)
    px = rng.uniform(0, 1, (4, 4, 3))
    out = backend.encode_image(px)
    tokens, final = oracles.encode_image(backend.weights_np, cfg, px)
    np.testing.assert_allclose(out.layer_tokens, tokens, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.final_feature, final, rtol=1e-10, atol=1e-12)


def test_image_forward_with_resize_matches_oracle(toy, rng):
    px = rng.uniform(0, 1, (6, 6, 3))
    out = toy.encode_image(px)
    tokens, final = oracles.encode_image(toy.weights_np, toy.config, px)
    np.testing.assert_allclose(out.final_feature, final, rtol=1e-9, atol=1e-12)


def test_text_forward_matches_numpy_oracle(toy):
    out = toy.encode_text(["red", "dog"])
    ids = [toy.config.vocab.index("red"), toy.config.vocab.index("dog")]
    tokens, final = oracles.encode_text(toy.weights_np, toy.config, ["red", "dog"], ids)
    np.testing.assert_allclose(out.layer_tokens, tokens, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.final_feature, final, rtol=1e-10, atol=1e-12)


def test_text_batched_matches_single(toy):
    texts = [TextSample("a", "a red dog"), TextSample("b", "cat"), TextSample("c", "blue cat runs")]
    batched = toy.text_features(texts)
    for t, f in zip(texts, batched):
        np.testing.assert_allclose(f, toy.encode_text(t).final_feature, rtol=1e-12)


def test_oov_words_hash_to_buckets(toy):
    ids = toy.token_ids(["Dog", "zebra", "zebra"])
    assert ids[0] == toy.config.vocab.index("dog")
    assert ids[1] == ids[2] >= len(toy.config.vocab)


def test_layer_skip_matches_oracle(toy, rng):
    v = random_image(rng, dtype=np.float64)
    out = toy.encode_image_skipping_layer(v, 2)
    tokens, final = oracles.encode_image(toy.weights_np, toy.config, v.pixels, skip=2)
    np.testing.assert_allclose(out.final_feature, final, rtol=1e-10, atol=1e-12)
    # skipped layer repeats the previous layer's tokens
    np.testing.assert_array_equal(out.layer_tokens[1], out.layer_tokens[0])
    with pytest.raises(ValueError):
        toy.encode_image_skipping_layer(v, 4)


def test_identity_layers_diagnostics_are_all_one(rng):
    backend = ToyBackend(ToyConfig(identity_layers=True))
    v = random_image(rng)
    out = backend.encode_image(v)
    skipped = backend.encode_image_skipping_layer(v, 2)
    np.testing.assert_allclose(skipped.final_feature, out.final_feature, rtol=1e-12)
    for row in layer_diagnostics(v, backend):
        assert row["cls_similarity"] == pytest.approx(1.0, abs=1e-12)
        assert row["skip_similarity"] == pytest.approx(1.0, abs=1e-12)


def test_layer_diagnostics_last_layer_is_exactly_one(toy, rng):
    rows = layer_diagnostics(random_image(rng), toy)
    assert [r["layer"] for r in rows] == [1, 2, 3]
    assert rows[-1]["cls_similarity"] == 1.0
    assert all(-1 <= r["skip_similarity"] <= 1 for r in rows)


def test_linear_backend_closed_form_gradient(rng):
    backend = LinearBackend((2, 2, 1), embed_dim=3, seed=0)
    px = rng.uniform(0, 1, (2, 2, 1))
    g = backend.image_gradient(px, lambda out: out.final_feature.sum())
    expected = backend.matrix @ np.ones(3)
    np.testing.assert_allclose(g.ravel(), expected, rtol=1e-12)


def test_linear_backend_cannot_skip_layers(rng):
    backend = LinearBackend((2, 2, 1))
    with pytest.raises(CapabilityError):
        backend.encode_image_skipping_layer(rng.uniform(0, 1, (2, 2, 1)), 1)
    with pytest.raises(CapabilityError):
        layer_diagnostics(rng.uniform(0, 1, (2, 2, 1)), backend)


def test_gradient_matches_finite_differences(toy, rng):
    v = rng.uniform(0.1, 0.9, (8, 8, 3))
    target = torch.from_numpy(rng.standard_normal(32))

    def objective(out):
        return torch.nn.functional.cosine_similarity(out.final_feature, target, dim=0) \
            + out.layer_tokens[1].mean()

    def f(x):
        return value_and_grad(lambda t: objective(_single(toy, t)), x)[0]

    g = toy.image_gradient(v, objective)
    flat = [tuple(int(i) for i in np.unravel_index(k, v.shape)) for k in rng.choice(v.size, 20, replace=False)]
    for idx in flat:
        fd = oracles.central_difference(f, v, idx)
        assert oracles.rel_error(g[idx], fd) < 1e-4 or abs(g[idx] - fd) < 1e-12, idx


def _single(backend, x):
    out = backend.forward_images(x[None])
    return EncoderOutput(out.layer_tokens[0], out.final_feature[0])


def test_gradient_dtype_follows_input(toy, rng):
    v32 = random_image(rng)
    g = toy.image_gradient(v32, lambda out: out.final_feature.sum())
    assert g.dtype == np.float32 and g.shape == v32.shape
    g64 = toy.image_gradient(v32.pixels.astype(np.float64), lambda out: out.final_feature.sum())
    assert g64.dtype == np.float64


def test_resize_matches_loop_bilinear(rng):
    img = rng.uniform(0, 1, (5, 7, 2))
    for h, w in [(3, 4), (8, 11), (5, 7)]:
        got = resize_bilinear(torch.from_numpy(img), (h, w)).numpy()
        np.testing.assert_allclose(got, oracles.bilinear(img, h, w), atol=1e-12)


def test_save_load_round_trip(toy, tmp_path, rng):
    toy.save(tmp_path / "t.bin")
    back = ToyBackend.load(tmp_path / "t.bin")
    v = random_image(rng)
    np.testing.assert_array_equal(back.encode_image(v).final_feature, toy.encode_image(v).final_feature)
    assert back.config == toy.config
    noisy = ToyBackend.load(tmp_path / "t.bin", weight_noise=0.1)
    a, b = noisy.encode_image(v).final_feature, toy.encode_image(v).final_feature
    assert 0.5 < cosine(a, b) < 1.0


def test_build_backend(tmp_path, toy):
    toy.save(tmp_path / "t.bin")
    assert isinstance(build_backend({"kind": "toy", "weights": str(tmp_path / "t.bin")}), ToyBackend)
    assert build_backend({"kind": "toy", "num_layers": 2}).descriptor.num_layers == 2
    assert isinstance(build_backend({"kind": "linear", "image_shape": [2, 2, 1]}), LinearBackend)
    with pytest.raises(ValueError, match="unknown backend"):
        build_backend({"kind": "clip"})
    with pytest.raises(ValueError):
        build_backend({"kind": "toy", "weights": str(tmp_path / "t.bin"), "num_layers": 2})


def test_channel_mismatch_is_rejected(toy):
    with pytest.raises(ValueError, match="channels"):
        toy.encode_image(ImageSample("g", np.zeros((8, 8, 1))))


def test_degenerate_inputs(toy):
    out = toy.encode_image(np.zeros((8, 8, 3)))
    assert np.isfinite(out.layer_tokens).all() and np.isfinite(out.final_feature).all()
    single = toy.encode_text(["dog"])
    assert single.num_tokens == 2
    np.testing.assert_array_equal(toy.encode_text(["a", "dog"]).final_feature,
                                  toy.encode_text(["a", "dog"]).final_feature)


def test_constant_objective_has_zero_gradient(toy, rng):
    g = toy.image_gradient(random_image(rng), lambda out: torch.tensor(3.0, dtype=torch.float64))
    assert not g.any()


def test_single_layer_skip_is_embedding_only(rng):
    cfg = ToyConfig(num_layers=1)
    backend = ToyBackend(cfg)
    px = rng.uniform(0, 1, (8, 8, 3))
    out = backend.encode_image_skipping_layer(px, 1)
    x = torch.from_numpy(px)[None]
    tok = backend.patchify(2 * x - 1) @ backend.w["img.patch"] + backend.w["img.patch_b"]
    tok = torch.cat([backend.w["img.cls"].expand(1, 1, -1), tok], 1) + backend.w["img.pos"]
    np.testing.assert_allclose(out.layer_tokens[0], tok[0].numpy(), rtol=1e-12)
