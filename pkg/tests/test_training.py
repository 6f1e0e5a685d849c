import copy

import numpy as np
import pytest
import torch

from pcstudio.adaptor import LatentAdaptor
from pcstudio.backends import make_toy_bundle
from pcstudio.errors import (
    DimensionError,
    FaceDetectionError,
    ValidationError,
)
from pcstudio.latent import WPlusLatent
from pcstudio.lora import LoRADelta, lora_effective
from pcstudio.losses import LossWeights
from pcstudio.pipeline import GenerationConfig, PromptTemplate, generate
from pcstudio.training import (
    PairedSample,
    SubjectProfile,
    TuneConfig,
    compute_fingerprint,
    embed_subject,
    init_lora_deltas,
    pretrain,
    superclass_token,
    tune_subject,
)

from conftest import TOY_ADAPTOR_CFG


def make_dataset(bundle, n=16, seed=11):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = rng.standard_normal((8, 8, 3)) * 0.5
        samples.append(PairedSample(image=img, w=bundle.gan_encoder.encode(img), id=f"s{i}"))
    return samples


def fresh_adaptor(bundle, seed=1):
    return LatentAdaptor(TOY_ADAPTOR_CFG, seed=seed, v_cls=superclass_token(bundle))


class TestLoraEffective:
    def test_alpha_zero(self, rng):
        W = rng.standard_normal((6, 4))
        d = LoRADelta("x", A=rng.standard_normal((2, 4)), B=rng.standard_normal((6, 2)), rank=2)
        assert lora_effective(W, d, 0.0) is W

    def test_rank_one_ones(self):
        W = np.zeros((3, 5))
        d = LoRADelta("x", A=np.ones((1, 5)), B=np.ones((3, 1)), rank=1)
        assert np.array_equal(lora_effective(W, d, 1.0), np.ones((3, 5)))

    def test_triple_loop_oracle(self, rng):
        W = rng.standard_normal((6, 4))
        A = rng.standard_normal((2, 4))
        B = rng.standard_normal((6, 2))
        d = LoRADelta("x", A=A, B=B, rank=2)
        out = lora_effective(W, d, 0.3)
        expected = W.copy()
        for i in range(6):
            for j in range(4):
                for r in range(2):
                    expected[i, j] += 0.3 * B[i, r] * A[r, j]
        assert np.allclose(out, expected, atol=1e-10)

    def test_linearity_in_alpha(self, rng):
        W = rng.standard_normal((6, 4))
        A = rng.standard_normal((2, 4))
        B = rng.standard_normal((6, 2))
        d = LoRADelta("x", A=A, B=B, rank=2)
        a1, a2 = 0.25, 0.5
        lhs = lora_effective(W, d, a1 + a2) - lora_effective(W, d, a1)
        assert np.allclose(lhs, a2 * (B @ A), atol=1e-12)

    def test_shape_mismatch(self, rng):
        W = rng.standard_normal((5, 4))
        d = LoRADelta("x", A=rng.standard_normal((2, 4)), B=rng.standard_normal((6, 2)), rank=2)
        with pytest.raises(DimensionError):
            lora_effective(W, d, 1.0)

    def test_delta_validation(self, rng):
        with pytest.raises(DimensionError):
            LoRADelta("x", A=rng.standard_normal((3, 4)), B=rng.standard_normal((6, 2)), rank=2)
        with pytest.raises(ValidationError):
            LoRADelta("x", A=np.ones((5, 4)), B=np.ones((3, 5)), rank=5)


class TestPretrain:
    def test_loss_decreases_over_200_steps(self):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        samples = make_dataset(bundle)
        history = pretrain(adaptor, samples, iterations=200, seed=3, bundle=bundle)
        assert len(history) == 200
        first = np.mean([h["total"] for h in history[:10]])
        last = np.mean([h["total"] for h in history[-10:]])
        assert last < first

    def test_backends_frozen(self):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        before = {
            "denoiser": bundle.denoiser.checksum(),
            "text_encoder": bundle.text_encoder.checksum(),
            "gan_encoder": bundle.gan_encoder.checksum(),
            "image_codec": bundle.image_codec.checksum(),
        }
        pretrain(adaptor, make_dataset(bundle, n=4), iterations=10, seed=0, bundle=bundle)
        after = {
            "denoiser": bundle.denoiser.checksum(),
            "text_encoder": bundle.text_encoder.checksum(),
            "gan_encoder": bundle.gan_encoder.checksum(),
            "image_codec": bundle.image_codec.checksum(),
        }
        assert before == after

    def test_breakdown_sums(self):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        w = LossWeights()
        history = pretrain(
            adaptor, make_dataset(bundle, n=4), iterations=5, seed=0, bundle=bundle, weights=w
        )
        for h in history:
            expected = h["l_diff"] + w.lambda_reg * h["l_reg"] + w.lambda_id * h["l_id"]
            assert abs(h["total"] - expected) < 1e-9

    def test_empty_dataset(self):
        bundle = make_toy_bundle(0)
        with pytest.raises(ValidationError):
            pretrain(fresh_adaptor(bundle), [], iterations=5, seed=0, bundle=bundle)

    def test_adaptor_actually_changes(self):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        w0 = adaptor.head1.weight.detach().clone()
        pretrain(adaptor, make_dataset(bundle, n=4), iterations=5, seed=0, bundle=bundle)
        assert not torch.equal(adaptor.head1.weight.detach(), w0)


class TestTuneSubject:
    def setup_profile(self, iterations=50, seed=0, alpha=0.3, **kw):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        rng = np.random.default_rng(21)
        img = rng.standard_normal((8, 8, 3)) * 0.5
        w = bundle.gan_encoder.encode(img)
        cfg = TuneConfig(iterations=iterations, seed=seed, alpha=alpha, **kw)
        return bundle, adaptor, img, w, cfg

    def test_fifty_iterations_produces_lora_and_improves(self):
        bundle, adaptor, img, w, cfg = self.setup_profile()
        profile = tune_subject(img, w, adaptor, cfg, bundle, subject_id="alice")
        assert len(profile.lora) == 2
        assert {d.target_name for d in profile.lora} == {"cross_attn.B", "cross_attn.H"}
        assert profile.alpha == 0.3
        assert profile.token_schedule.T == 10
        # The tuned residuals are non-trivial.
        assert any(np.max(np.abs(np.asarray(d.delta()))) > 0 for d in profile.lora)

    def test_zero_lr_fixed_point(self):
        bundle, adaptor, img, w, cfg = self.setup_profile(lr_lora=0.0, lr_adaptor=0.0)
        pre_schedule = adaptor.embed_all_timesteps(w)
        profile = tune_subject(img, w, adaptor, cfg, bundle)
        # B starts at zero, so with lr 0 every delta stays the zero update.
        for d in profile.lora:
            assert np.array_equal(np.asarray(d.B), np.zeros_like(np.asarray(d.B)))
            assert np.allclose(np.asarray(d.delta()), 0.0)
        for t in range(1, 11):
            assert np.array_equal(profile.token_schedule.at(t).v1, pre_schedule.at(t).v1)
            assert np.array_equal(profile.token_schedule.at(t).v2, pre_schedule.at(t).v2)

    def test_deterministic(self):
        bundle, adaptor, img, w, cfg = self.setup_profile(iterations=10)
        p1 = tune_subject(img, w, adaptor, cfg, bundle)
        p2 = tune_subject(img, w, adaptor, cfg, bundle)
        for t in range(1, 11):
            assert np.array_equal(p1.token_schedule.at(t).v1, p2.token_schedule.at(t).v1)
        for d1, d2 in zip(p1.lora, p2.lora):
            assert np.array_equal(np.asarray(d1.A), np.asarray(d2.A))
            assert np.array_equal(np.asarray(d1.B), np.asarray(d2.B))

    def test_base_denoiser_unchanged(self):
        bundle, adaptor, img, w, cfg = self.setup_profile(iterations=10)
        before = bundle.denoiser.checksum()
        tune_subject(img, w, adaptor, cfg, bundle)
        assert bundle.denoiser.checksum() == before

    def test_input_adaptor_unchanged(self):
        bundle, adaptor, img, w, cfg = self.setup_profile(iterations=10)
        before = {k: v.detach().clone() for k, v in adaptor.state_dict().items()}
        tune_subject(img, w, adaptor, cfg, bundle)
        for k, v in adaptor.state_dict().items():
            assert torch.equal(v.detach(), before[k])

    def test_no_face_hard_error(self):
        bundle, adaptor, _, w, cfg = self.setup_profile()
        with pytest.raises(FaceDetectionError):
            tune_subject(np.zeros((8, 8, 3)), w, adaptor, cfg, bundle)

    def test_alpha_zero_generation_matches_untuned(self):
        bundle, adaptor, img, w, cfg = self.setup_profile(iterations=10)
        tuned = tune_subject(img, w, adaptor, cfg, bundle)
        # Same schedule but LoRA disabled: alpha = 0 must reproduce the
        # base-denoiser generation bit-exact.
        disabled = SubjectProfile(
            subject_id=tuned.subject_id,
            w=tuned.w,
            token_schedule=tuned.token_schedule,
            lora=tuned.lora,
            alpha=0.0,
            created_at=tuned.created_at,
            config_fingerprint=tuned.config_fingerprint,
        )
        no_lora = SubjectProfile(
            subject_id=tuned.subject_id,
            w=tuned.w,
            token_schedule=tuned.token_schedule,
            lora=(),
            alpha=0.0,
            created_at=tuned.created_at,
            config_fingerprint=tuned.config_fingerprint,
        )
        tpl = PromptTemplate("a photo of a {S1} person")
        gcfg = GenerationConfig(steps=6, tau=0.7, seed=5)
        img_a = generate(disabled, tpl, gcfg, bundle).image
        img_b = generate(no_lora, tpl, gcfg, bundle).image
        assert np.array_equal(img_a, img_b)

    def test_tune_config_validation(self):
        with pytest.raises(ValidationError):
            TuneConfig(iterations=0)
        with pytest.raises(ValidationError):
            TuneConfig(alpha=1.5)
        with pytest.raises(ValidationError):
            TuneConfig(lr_lora=-1.0)
        with pytest.raises(ValidationError):
            TuneConfig(rank=0)


class TestInitLoraDeltas:
    def test_zero_initial_update(self, bundle):
        deltas = init_lora_deltas(bundle, rank=4, seed=0)
        assert len(deltas) == 2
        for d in deltas:
            assert torch.all(torch.as_tensor(d.B) == 0)
            assert torch.allclose(torch.as_tensor(d.delta()), torch.zeros(d.target_shape, dtype=torch.float64))
            assert d.A.requires_grad and d.B.requires_grad

    def test_target_shapes(self, bundle):
        deltas = {d.target_name: d for d in init_lora_deltas(bundle, rank=3, seed=1)}
        targets = bundle.denoiser.lora_targets()
        for name, shape in targets.items():
            assert deltas[name].target_shape == shape
            assert deltas[name].rank == 3


class TestProfilePersistence:
    def test_round_trip_f32_bit_exact(self, tmp_path):
        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        rng = np.random.default_rng(9)
        img = rng.standard_normal((8, 8, 3)) * 0.5
        w = bundle.gan_encoder.encode(img)
        profile = tune_subject(img, w, adaptor, TuneConfig(iterations=5), bundle, subject_id="bob")
        path = str(tmp_path / "bob.pcs")
        profile.save(path)
        loaded = SubjectProfile.load(path)
        assert loaded.subject_id == "bob"
        assert loaded.alpha == profile.alpha
        assert loaded.config_fingerprint == profile.config_fingerprint
        assert np.array_equal(loaded.w.styles.astype(np.float32), profile.w.styles.astype(np.float32))
        for t in range(1, 11):
            assert np.array_equal(
                loaded.token_schedule.at(t).v1.astype(np.float32),
                profile.token_schedule.at(t).v1.astype(np.float32),
            )
        for da, db in zip(loaded.lora, profile.lora):
            assert da.target_name == db.target_name
            assert np.array_equal(np.asarray(da.A).astype(np.float32), np.asarray(db.A).astype(np.float32))
            assert np.array_equal(np.asarray(da.B).astype(np.float32), np.asarray(db.B).astype(np.float32))
        assert np.array_equal(
            loaded.source_image.astype(np.float32), profile.source_image.astype(np.float32)
        )
        # A second save/load cycle is lossless (already at f32).
        path2 = str(tmp_path / "bob2.pcs")
        loaded.save(path2)
        again = SubjectProfile.load(path2)
        assert np.array_equal(again.w.styles, loaded.w.styles)

    def test_fingerprint_mismatch(self, tmp_path):
        from pcstudio.errors import FingerprintMismatchError

        bundle = make_toy_bundle(0)
        adaptor = fresh_adaptor(bundle)
        profile = embed_subject(np.random.default_rng(1).standard_normal((8, 8, 3)), adaptor, bundle)
        path = str(tmp_path / "p.pcs")
        profile.save(path)
        SubjectProfile.load(path, expect_fingerprint=profile.config_fingerprint)
        with pytest.raises(FingerprintMismatchError):
            SubjectProfile.load(path, expect_fingerprint="0" * 64)

    def test_duplicate_lora_targets_rejected(self, bundle, adaptor):
        d = LoRADelta("x", A=np.ones((1, 2)), B=np.zeros((3, 1)), rank=1)
        with pytest.raises(ValidationError):
            SubjectProfile(
                subject_id="s",
                w=WPlusLatent(np.zeros((3, 8))),
                token_schedule=adaptor.embed_all_timesteps(np.zeros((3, 8))),
                lora=(d, d),
                alpha=0.3,
                created_at=0.0,
                config_fingerprint="f",
            )


class TestFingerprint:
    def test_sensitive_to_config_and_bundle(self, bundle, adaptor):
        from pcstudio.adaptor import AdaptorConfig

        f1 = compute_fingerprint(adaptor.cfg, bundle)
        f2 = compute_fingerprint(adaptor.cfg, bundle)
        assert f1 == f2
        other_cfg = AdaptorConfig(
            wplus_shape=(3, 8), token_dim=16, pe_bands=4, attn_heads=2, max_timestep=10
        )
        assert compute_fingerprint(other_cfg, bundle) != f1
        assert compute_fingerprint(adaptor.cfg, make_toy_bundle(5)) != f1


class TestEmbedSubject:
    def test_stage1_only_profile(self, bundle, adaptor, toy_image):
        profile = embed_subject(toy_image, adaptor, bundle, subject_id="carol")
        assert profile.lora == ()
        assert profile.token_schedule.T == 10
        expected_w = bundle.gan_encoder.encode(toy_image)
        assert np.array_equal(profile.w.styles, expected_w.styles)
        direct = adaptor.embed_all_timesteps(expected_w)
        for t in range(1, 11):
            assert np.array_equal(profile.token_schedule.at(t).v1, direct.at(t).v1)
