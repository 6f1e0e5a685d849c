import numpy as np
import pytest
import torch

from pcstudio.backends import (
    COMPONENT_NAMES,
    BackendBundle,
    load_bundle,
    make_toy_bundle,
    resolve_bundle,
)
from pcstudio.backends.toy import ToyBackendConfig
from pcstudio.errors import (
    ConfigError,
    DimensionError,
    FaceDetectionError,
    ValidationError,
)
from pcstudio.lora import LoRADelta


def toy_spec():
    return {
        "seed": 0,
        "components": {name: {"kind": "toy", "params": {}} for name in COMPONENT_NAMES},
        "schedule": {"kind": "cosine", "T": 10},
    }


class TestLoadBundle:
    def test_config_echo(self):
        b = load_bundle(toy_spec())
        assert b.wplus_shape == (3, 8)
        assert b.token_dim == 16
        assert b.latent_shape == (4, 4, 2)
        assert b.image_shape == (8, 8, 3)
        assert b.T == 10

    def test_missing_segmenter(self):
        spec = toy_spec()
        del spec["components"]["segmenter"]
        with pytest.raises(ConfigError, match="segmenter"):
            load_bundle(spec)

    def test_missing_schedule(self):
        spec = toy_spec()
        del spec["schedule"]
        with pytest.raises(ConfigError, match="schedule"):
            load_bundle(spec)

    def test_token_dim_mismatch_names_both(self):
        spec = toy_spec()
        spec["components"]["text_encoder"]["params"] = {"token_dim": 32}
        with pytest.raises(ValidationError) as exc:
            load_bundle(spec)
        msg = str(exc.value)
        assert "text_encoder" in msg and "denoiser" in msg

    def test_unknown_kind(self):
        spec = toy_spec()
        spec["components"]["denoiser"]["kind"] = "production-v9"
        with pytest.raises(ConfigError):
            load_bundle(spec)

    def test_spec_from_file(self, tmp_path):
        import json

        p = tmp_path / "backend.json"
        p.write_text(json.dumps(toy_spec()))
        b = load_bundle(str(p))
        assert b.T == 10

    def test_resolve_env_var(self, tmp_path, monkeypatch):
        import json

        p = tmp_path / "backend.json"
        p.write_text(json.dumps(toy_spec()))
        monkeypatch.setenv("PC_BACKEND", str(p))
        assert resolve_bundle().T == 10
        monkeypatch.delenv("PC_BACKEND")
        assert resolve_bundle().T == 10  # falls back to toy

    def test_fingerprint_stable_and_seed_sensitive(self):
        f0a = make_toy_bundle(0).fingerprint()
        f0b = make_toy_bundle(0).fingerprint()
        f1 = make_toy_bundle(1).fingerprint()
        assert f0a == f0b
        assert f0a != f1


class TestToyDenoiser:
    def test_zero_in_zero_out(self, bundle):
        eps, _ = bundle.denoiser.predict(np.zeros((4, 4, 2)), 1, np.zeros((1, 16)))
        assert np.allclose(eps, np.zeros((4, 4, 2)), atol=1e-15)

    def test_unit_basis_matches_scalar_oracle(self):
        b = make_toy_bundle(7)
        den = b.denoiser
        t = 3
        # Latent basis vector at pixel p, channel c exercises one column of
        # the per-pixel block A_t[p]; brute-force the expected output.
        for p, ch in ((0, 0), (5, 1), (15, 0)):
            lat = np.zeros((16, 2))
            lat[p, ch] = 1.0
            eps, _ = den.predict(lat.reshape(4, 4, 2), t, np.zeros((2, 16)))
            expected = np.zeros((16, 2))
            for i in range(2):
                expected[p, i] = den.A[t - 1][p][i][ch]
            assert np.allclose(eps.reshape(16, 2), expected, atol=1e-12)

    def test_conditioning_path_oracle(self, bundle, rng):
        den = bundle.denoiser
        cond = rng.standard_normal((3, 16))
        eps, _ = den.predict(np.zeros((4, 4, 2)), 2, cond)
        m = cond.mean(axis=0)
        attn = np.exp(den.H @ m)
        attn = attn / attn.sum()
        expected = (den.B @ m + den.C @ (attn - 1.0 / 16)).reshape(4, 4, 2)
        assert np.allclose(eps, expected, atol=1e-12)

    def test_linearity_in_latent(self, bundle, rng):
        den = bundle.denoiser
        cond = np.zeros((1, 16))
        a = rng.standard_normal((4, 4, 2))
        b = rng.standard_normal((4, 4, 2))
        ea, _ = den.predict(a, 4, cond)
        eb, _ = den.predict(b, 4, cond)
        eab, _ = den.predict(a + b, 4, cond)
        assert np.allclose(eab, ea + eb, atol=1e-10)

    def test_pixel_locality(self, bundle, rng):
        # The latent path is per-pixel: changing one pixel only moves that
        # pixel's output (conditioning fixed).
        den = bundle.denoiser
        cond = rng.standard_normal((2, 16))
        lat = rng.standard_normal((4, 4, 2))
        base, _ = den.predict(lat, 5, cond)
        lat2 = lat.copy()
        lat2[2, 3, :] += 1.0
        out, _ = den.predict(lat2, 5, cond)
        diff = np.abs(out - base)
        mask = np.zeros((4, 4), dtype=bool)
        mask[2, 3] = True
        assert np.all(diff[~mask] == 0.0)
        assert np.any(diff[mask] > 0)

    def test_lora_alpha_zero_identity(self, bundle, rng):
        den = bundle.denoiser
        lat = rng.standard_normal((4, 4, 2))
        cond = rng.standard_normal((2, 16))
        delta = LoRADelta("cross_attn.B", A=rng.standard_normal((4, 16)), B=rng.standard_normal((32, 4)), rank=4)
        plain, _ = den.predict(lat, 1, cond)
        with_zero, _ = den.predict(lat, 1, cond, lora=[delta], alpha=0.0)
        assert np.array_equal(plain, with_zero)

    def test_lora_changes_output(self, bundle, rng):
        den = bundle.denoiser
        lat = rng.standard_normal((4, 4, 2))
        cond = rng.standard_normal((2, 16))
        delta = LoRADelta("cross_attn.B", A=rng.standard_normal((4, 16)), B=rng.standard_normal((32, 4)), rank=4)
        plain, _ = den.predict(lat, 1, cond)
        tuned, _ = den.predict(lat, 1, cond, lora=[delta], alpha=0.5)
        assert not np.allclose(plain, tuned)

    def test_attention_capture_and_override(self, bundle, rng):
        den = bundle.denoiser
        lat = rng.standard_normal((4, 4, 2))
        cond = rng.standard_normal((2, 16))
        eps1, attn = den.predict(lat, 6, cond, capture=True)
        assert attn.shape == (4, 4)
        assert attn.sum() == pytest.approx(1.0, abs=1e-9)
        # Overriding with the captured map reproduces the same output even
        # under different conditioning of the attention branch.
        eps2, _ = den.predict(lat, 6, cond, attn_override=attn)
        assert np.allclose(eps1, eps2, atol=1e-12)

    def test_attention_depends_only_on_conditioning(self, bundle, rng):
        den = bundle.denoiser
        cond = rng.standard_normal((2, 16))
        _, a1 = den.predict(rng.standard_normal((4, 4, 2)), 2, cond, capture=True)
        _, a2 = den.predict(rng.standard_normal((4, 4, 2)), 2, cond, capture=True)
        assert np.array_equal(a1, a2)

    def test_shape_and_range_errors(self, bundle):
        with pytest.raises(DimensionError):
            bundle.denoiser.predict(np.zeros((4, 4, 3)), 1, np.zeros((1, 16)))
        with pytest.raises(DimensionError):
            bundle.denoiser.predict(np.zeros((4, 4, 2)), 1, np.zeros((1, 8)))
        with pytest.raises(ValidationError):
            bundle.denoiser.predict(np.zeros((4, 4, 2)), 0, np.zeros((1, 16)))

    def test_torch_path_differentiable(self, bundle):
        lat = torch.zeros((4, 4, 2), dtype=torch.float64, requires_grad=True)
        cond = torch.zeros((1, 16), dtype=torch.float64)
        eps, _ = bundle.denoiser.predict(lat, 3, cond)
        eps.sum().backward()
        assert lat.grad is not None and torch.all(torch.isfinite(lat.grad))


class TestToyCodec:
    def test_round_trip_latent(self, bundle, rng):
        lat = rng.standard_normal((4, 4, 2))
        back = bundle.image_codec.encode(bundle.image_codec.decode(lat))
        assert np.max(np.abs(back - lat)) < 1e-6

    def test_decode_linear(self, bundle, rng):
        a = rng.standard_normal((4, 4, 2))
        b = rng.standard_normal((4, 4, 2))
        codec = bundle.image_codec
        assert np.allclose(codec.decode(a + b), codec.decode(a) + codec.decode(b), atol=1e-10)

    def test_shape_errors(self, bundle):
        with pytest.raises(DimensionError):
            bundle.image_codec.decode(np.zeros((4, 4, 3)))
        with pytest.raises(DimensionError):
            bundle.image_codec.encode(np.zeros((8, 8, 4)))


class TestToyEncoderAndEmbedder:
    def test_gan_encoder_shape_and_oracle(self, bundle, toy_image):
        w = bundle.gan_encoder.encode(toy_image)
        assert w.shape == (3, 8)
        assert w.source_tag == "encoded"
        expected = (bundle.gan_encoder.M @ toy_image.reshape(-1)).reshape(3, 8)
        assert np.allclose(w.styles, expected, atol=1e-12)

    def test_face_embedder_unit_norm(self, bundle, rng):
        for _ in range(5):
            e = bundle.face_embedder.embed(rng.standard_normal((8, 8, 3)))
            assert abs(np.linalg.norm(e) - 1.0) < 1e-6

    def test_face_embedder_blank(self, bundle):
        with pytest.raises(FaceDetectionError):
            bundle.face_embedder.embed(np.full((8, 8, 3), 0.7))

    def test_text_encoder_mixes_words_and_vectors(self, bundle, rng):
        v = rng.standard_normal(16)
        cond = bundle.text_encoder.encode(["a", "photo", v])
        assert cond.shape == (3, 16)
        assert np.array_equal(cond[2], v)
        assert np.array_equal(cond[0], bundle.text_encoder.word_embedding("a"))

    def test_text_encoder_case_insensitive(self, bundle):
        assert np.array_equal(
            bundle.text_encoder.word_embedding("Person"),
            bundle.text_encoder.word_embedding("person"),
        )

    def test_text_encoder_empty(self, bundle):
        with pytest.raises(ValidationError):
            bundle.text_encoder.encode([])


class TestScorersAndSegmenter:
    def test_clip_score_range(self, bundle, rng):
        for _ in range(5):
            s = bundle.clip_scorer.score(rng.standard_normal((8, 8, 3)), "a photo of a person")
            assert -1.0 <= s <= 1.0

    def test_lpips_zero_on_identical(self, bundle, toy_image):
        assert bundle.lpips_scorer.distance(toy_image, toy_image.copy()) == 0.0
        assert bundle.lpips_scorer.distance(toy_image, toy_image + 1.0) > 0

    def test_segmenter_strips_partition(self, bundle, toy_image):
        masks = bundle.segmenter.segment(toy_image)
        assert len(masks) == 2
        total = sum(masks)
        assert np.array_equal(total, np.ones((8, 8)))


class TestReproducibility:
    def test_bit_exact_across_bundles(self, rng):
        b1 = make_toy_bundle(3)
        b2 = make_toy_bundle(3)
        img = rng.standard_normal((8, 8, 3))
        lat = rng.standard_normal((4, 4, 2))
        cond = rng.standard_normal((2, 16))
        assert np.array_equal(b1.gan_encoder.encode(img).styles, b2.gan_encoder.encode(img).styles)
        e1, _ = b1.denoiser.predict(lat, 4, cond)
        e2, _ = b2.denoiser.predict(lat, 4, cond)
        assert np.array_equal(e1, e2)
        assert np.array_equal(b1.image_codec.decode(lat), b2.image_codec.decode(lat))
        assert b1.fingerprint() == b2.fingerprint()

    def test_custom_config(self):
        cfg = ToyBackendConfig(seed=2, segmenter_instances=3)
        b = make_toy_bundle(2, cfg)
        masks = b.segmenter.segment(np.zeros((8, 8, 3)))
        assert len(masks) == 3
