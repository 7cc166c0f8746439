import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tempdistill import autodiff as ad
from tempdistill import losses as L
from tempdistill.autodiff import ShapeError, Tensor
from tempdistill.oracle import oracle_forward

T = Tensor
feature_values = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def feats(shape):
    return arrays(np.float64, shape, elements=feature_values)


def ones_mask(*shape):
    return L.MaskPlan(0, 0.0, T(np.ones(shape)))


def zeros_mask(*shape):
    return L.MaskPlan(0, 1.0, T(np.zeros(shape)))


def random_generator(kind, c, seed):
    return L.Generator.init(kind, c, seed)


class TestFeatureSets:
    def test_shapes(self):
        f = L.FeatureSet(T(np.zeros((3, 5, 2))))
        assert (f.frames, f.queries, f.channels) == (3, 5, 2)
        with pytest.raises(ShapeError):
            L.FeatureSet(T(np.zeros((3, 5))))

    def test_pv_needs_3x3(self):
        with pytest.raises(ShapeError):
            L.PvFeatureSet(T(np.zeros((1, 2, 2, 2))))


class TestMask:
    def test_ratio_zero_keeps_all(self):
        assert np.array_equal(L.generate_mask((3, 7), 0.0, 1).mask.data, np.ones((3, 7)))

    def test_ratio_one_masks_all(self):
        assert np.array_equal(L.generate_mask((3, 7), 1.0, 1).mask.data, np.zeros((3, 7)))

    def test_pinned_count(self):
        mp = L.generate_mask((4, 900), 0.5, 42)
        assert int((mp.mask.data == 0).sum()) == 1815

    def test_replay(self):
        a, b = L.generate_mask((5, 6, 6), 0.3, 77), L.generate_mask((5, 6, 6), 0.3, 77)
        assert np.array_equal(a.mask.data, b.mask.data)
        assert a.mask.data.tobytes() == b.mask.data.tobytes()

    @pytest.mark.parametrize("ratio", [-0.1, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ValueError):
            L.generate_mask((2, 2), ratio, 0)

    @given(st.floats(0.05, 0.95), st.integers(0, 2**40))
    @settings(max_examples=25)
    def test_masked_fraction_tracks_ratio(self, ratio, seed):
        assert abs(L.generate_mask((100, 100), ratio, seed).masked_fraction - ratio) < 0.03


class TestTsaAggregate:
    def test_single_frame(self):
        f = np.random.default_rng(0).normal(size=(1, 3, 2))
        x = f[0]
        logits = x @ x.T / np.sqrt(2)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        got = L.tsa_aggregate(L.FeatureSet(T(f)), 1).values.data[0]
        assert np.allclose(got, w @ x, atol=1e-14)

    def test_identical_frames_sum_identical_terms(self):
        x = np.random.default_rng(1).normal(size=(3, 2))
        t_tea, t_stu = 5, 3
        f = np.repeat(x[None], t_tea, axis=0)
        single = L.tsa_aggregate(L.FeatureSet(T(x[None])), 1).values.data[0]
        agg = L.tsa_aggregate(L.FeatureSet(T(f)), t_stu).values.data
        k = t_tea - t_stu
        for t in range(t_stu):
            # frame t (0-based) sums frames 0..t+k
            assert np.allclose(agg[t], (t + k + 1) * single, atol=1e-13)

    def test_matches_oracle(self):
        f = np.random.default_rng(2).normal(size=(2, 2, 2))
        got = L.tsa_aggregate(L.FeatureSet(T(f)), 1).values.data
        assert np.max(np.abs(got - oracle_forward("tsa_aggregate", f, 1))) < 1e-12

    def test_swapped_reading_differs(self):
        f = np.random.default_rng(3).normal(size=(3, 4, 2))
        a = L.tsa_aggregate(L.FeatureSet(T(f)), 2).values.data
        b = L.tsa_aggregate(L.FeatureSet(T(f)), 2, swapped=True).values.data
        assert not np.allclose(a, b)

    @pytest.mark.parametrize("t_tea,t_stu", [(9, 1), (3, 4)])
    def test_frame_gap_bounds(self, t_tea, t_stu):
        with pytest.raises(ValueError):
            L.tsa_aggregate(L.FeatureSet(T(np.zeros((t_tea, 2, 2)))), t_stu)

    @given(feats((4, 5, 3)), st.permutations(range(5)), st.integers(1, 4))
    @settings(max_examples=40)
    def test_permutation_equivariance(self, f, perm, t_stu):
        perm = list(perm)
        a = L.tsa_aggregate(L.FeatureSet(T(f)), t_stu).values.data
        b = L.tsa_aggregate(L.FeatureSet(T(f[:, perm])), t_stu).values.data
        assert np.allclose(a[:, perm], b, atol=1e-11)

    @given(feats((3, 4, 2)), st.integers(0, 1), st.integers(0, 2))
    @settings(max_examples=40)
    def test_attention_rows_normalised(self, f, t, t1):
        w = L.attention_weights(L.FeatureSet(T(f * 3)), t, t1)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12) and w.min() >= 0


class TestGenerator:
    def test_identity_on_nonnegative_input(self):
        x = np.abs(np.random.default_rng(4).normal(size=(2, 4, 3)))
        out = L.generate_features(L.FeatureSet(T(x)), L.Generator.identity("1d", 3)).values.data
        assert np.array_equal(out, x)

    def test_fully_masked_input_gives_zero(self):
        g = random_generator("2d", 2, 5)
        x = np.random.default_rng(5).normal(size=(1, 2, 3, 3))
        masked = ad.mask_channels(T(x), T(np.zeros((1, 3, 3))), channel_axis=1)
        out = L.generate_features(L.PvFeatureSet(masked), g).values.data
        assert np.array_equal(out, np.zeros_like(x))

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 4, 2))
        g = L.Generator("1d", T(rng.normal(size=(2, 2, 3))), T(rng.normal(size=2)),
                        T(rng.normal(size=(2, 2, 3))), T(rng.normal(size=2)))
        got = L.generate_features(L.FeatureSet(T(x)), g).values.data
        want = oracle_forward("generate_features_bev", x, *(getattr(g, n).data for n in g.param_names))
        assert np.max(np.abs(got - want)) < 1e-12

    def test_kind_mismatch(self):
        with pytest.raises(ValueError):
            L.generate_features(L.FeatureSet(T(np.zeros((1, 4, 2)))), L.Generator.identity("2d", 2))


class TestReconstruction:
    def test_rc_bev_zero_when_generated_equals_target(self):
        f = L.FeatureSet(T(np.abs(np.random.default_rng(7).normal(size=(3, 4, 2)))))
        s = L.FeatureSet(L.bev_target(f, 2))
        assert L.rc_bev_loss(s, f, L.Generator.identity("1d", 2), ones_mask(2, 4)).item() == 0.0

    def test_mse_constant_offset(self):
        c = 1.7
        assert L.reconstruction_mse(T(np.full((2, 3), c)), T(np.zeros((2, 3)))).item() == pytest.approx(c * c, rel=1e-15)

    def test_rc_bev_matches_oracle(self):
        rng = np.random.default_rng(8)
        s, f = rng.normal(size=(1, 2, 2)), rng.normal(size=(2, 2, 2))
        g = random_generator("1d", 2, 8)
        mp = L.generate_mask((1, 2), 0.5, 3)
        got = L.rc_bev_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f)), g, mp).item()
        want = oracle_forward("rc_bev_loss", s, f, mp.mask.data, *(getattr(g, n).data for n in g.param_names))
        assert abs(got - want) < 1e-10

    def test_rc_pv_all_masked_gives_target_energy(self):
        rng = np.random.default_rng(9)
        c = 2
        teacher = L.PvFeatureSet(T(rng.normal(size=(1, c, 3, 3))))
        target = L.pv_target(teacher, 1).data
        target = target / np.linalg.norm(target)
        # with one teacher frame the aggregate is a fixed map; compare against its energy directly
        g = L.Generator("2d", *(T(getattr(random_generator("2d", c, 1), n).data * (0 if "b" in n else 1))
                                for n in L.Generator.param_names))
        student = L.PvFeatureSet(T(rng.normal(size=(1, c, 3, 3))))
        loss = L.rc_pv_loss(student, teacher, g, zeros_mask(1, 3, 3), target=T(target)).item()
        assert loss == pytest.approx(1.0 / (c * 9), rel=1e-12)

    def test_rc_pv_matches_oracle(self):
        rng = np.random.default_rng(10)
        s, f = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
        g = random_generator("2d", 2, 10)
        mp = L.generate_mask((1, 3, 3), 0.5, 4)
        got = L.rc_pv_loss(L.PvFeatureSet(T(s)), L.PvFeatureSet(T(f)), g, mp).item()
        want = oracle_forward("rc_pv_loss", s, f, mp.mask.data, *(getattr(g, n).data for n in g.param_names))
        assert abs(got - want) < 1e-10

    def test_rc_pv_level_guard(self):
        pv = L.PvFeatureSet(T(np.zeros((1, 2, 3, 3))), level=2)
        with pytest.raises(ValueError):
            L.rc_pv_loss(pv, pv, L.Generator.identity("2d", 2), ones_mask(1, 3, 3))

    def test_spatial_zero_on_identity(self):
        x = np.abs(np.random.default_rng(11).normal(size=(2, 2, 4, 4)))
        pv = L.PvFeatureSet(T(x), level=2)
        assert L.spatial_reconstruction_loss(pv, pv, L.Generator.identity("2d", 2), ones_mask(2, 4, 4)).item() == 0.0

    def test_spatial_uses_same_frame_teacher(self):
        rng = np.random.default_rng(12)
        s, f = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(4, 2, 3, 3))
        g = random_generator("2d", 2, 12)
        mp = L.generate_mask((2, 3, 3), 0.5, 5)
        got = L.spatial_reconstruction_loss(L.PvFeatureSet(T(s), 1), L.PvFeatureSet(T(f), 1), g, mp).item()
        want = oracle_forward("spatial_reconstruction_loss", s, f, mp.mask.data,
                              *(getattr(g, n).data for n in g.param_names))
        assert abs(got - want) < 1e-10

    def test_mask_shape_checked(self):
        f = L.FeatureSet(T(np.zeros((3, 4, 2))))
        with pytest.raises(ShapeError):
            L.rc_bev_loss(L.FeatureSet(T(np.zeros((2, 4, 2)))), f, L.Generator.identity("1d", 2), ones_mask(2, 5))


class TestRelational:
    def test_similarity_identity_and_zero(self):
        f = L.FeatureSet(T(np.stack([np.eye(3), np.eye(3), np.zeros((3, 3))])))
        assert np.array_equal(L.similarity(f, 0, 1).data, np.eye(3))
        assert np.array_equal(L.similarity(f, 0, 2).data, np.zeros((3, 3)))

    def test_similarity_rejects_diagonal(self):
        with pytest.raises(ValueError):
            L.similarity(L.FeatureSet(T(np.zeros((2, 2, 2)))), 1, 1)

    def test_trd_zero_on_identical(self):
        f = L.FeatureSet(T(np.random.default_rng(13).normal(size=(4, 5, 3))))
        assert abs(L.trd_loss(f, f).item()) < 1e-12

    def test_trd_matches_oracle(self):
        rng = np.random.default_rng(14)
        s, f = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
        got = L.trd_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f))).item()
        assert abs(got - oracle_forward("trd_loss", s, f, 0.5)) < 1e-10

    @given(feats((3, 4, 2)), feats((3, 4, 2)), st.floats(0.1, 3.0))
    @settings(max_examples=60)
    def test_trd_nonnegative(self, s, f, tau):
        assert L.trd_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f)), tau).item() >= -1e-15

    def test_trd_needs_two_frames(self):
        f = L.FeatureSet(T(np.zeros((1, 2, 2))))
        with pytest.raises(ValueError):
            L.trd_loss(f, f)

    def test_teacher_gets_no_gradient(self):
        rng = np.random.default_rng(15)
        s = T(rng.normal(size=(3, 4, 2)), requires_grad=True)
        t = T(rng.normal(size=(3, 4, 2)), requires_grad=True)
        grads = ad.backward(L.trd_loss(L.FeatureSet(s), L.FeatureSet(t)), [s, t])
        assert np.array_equal(grads[t], np.zeros((3, 4, 2)))
        assert np.abs(grads[s]).max() > 0


class TestDecodedFeatures:
    def test_equal_inputs(self):
        d = T(np.random.default_rng(16).normal(size=(3, 2)))
        assert L.dc_loss(d, d).item() == 0.0

    def test_constant_difference(self):
        d = np.random.default_rng(17).normal(size=(3, 2))
        assert L.dc_loss(T(d + 0.5), T(d)).item() == pytest.approx(0.25, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(18)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        assert abs(L.dc_loss(T(a), T(b)).item() - oracle_forward("dc_loss", a, b)) < 1e-14


class TestDistillConfig:
    def test_partial_defaults(self):
        cfg = L.DistillConfig(t_stu=4, t_tea=8)
        assert cfg.mode == L.PARTIAL_FRAMES
        assert cfg.alphas == {"rc_bev": 5e-4, "rc_pv": 1e-3, "dc": 1.0, "trd": 0.0}
        assert cfg.mask_ratio == 0.5 and cfg.temperature == 0.5

    def test_full_defaults(self):
        cfg = L.DistillConfig(t_stu=8, t_tea=8)
        assert cfg.mode == L.FULL_FRAMES
        assert cfg.alphas == {"rc_bev": 0.0, "rc_pv": 0.0, "dc": 1.0, "trd": 1.0}

    @pytest.mark.parametrize("kw", [
        dict(t_stu=4, t_tea=8, alpha_trd=1.0),
        dict(t_stu=8, t_tea=8, alpha_rc_bev=5e-4),
        dict(t_stu=8, t_tea=8, alpha_rc_pv=1e-3),
        dict(t_stu=1, t_tea=9),
        dict(t_stu=5, t_tea=4),
        dict(mask_ratio=1.2),
        dict(temperature=0.0),
        dict(alpha_dc=-1.0),
        dict(seed=-3),
    ])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            L.DistillConfig(**kw)

    def test_pv_ratio_falls_back(self):
        assert L.DistillConfig(mask_ratio=0.6).effective_pv_mask_ratio == 0.6
        assert L.DistillConfig(mask_ratio=0.6, pv_mask_ratio=0.3).effective_pv_mask_ratio == 0.3


class TestTotalLoss:
    def test_partial_default_weights(self):
        cfg = L.DistillConfig(t_stu=4, t_tea=8)
        total, weighted = L.total_distill_loss(cfg, {"rc_bev": T(1.0), "rc_pv": T(1.0), "dc": T(1.0)})
        assert total.item() == pytest.approx(1.0015, abs=1e-15)
        assert set(weighted) == {"rc_bev", "rc_pv", "dc"}

    def test_all_zero(self):
        cfg = L.DistillConfig(alpha_rc_bev=0, alpha_rc_pv=0, alpha_dc=0)
        total, weighted = L.total_distill_loss(cfg, {})
        assert total.item() == 0.0 and weighted == {}

    def test_full_mode(self):
        cfg = L.DistillConfig(t_stu=8, t_tea=8)
        total, _ = L.total_distill_loss(cfg, {"dc": T(0.5), "trd": T(0.25)})
        assert total.item() == 0.75

    def test_zero_weight_components_never_evaluated(self):
        cfg = L.DistillConfig(t_stu=8, t_tea=8)

        def boom():
            raise AssertionError("evaluated a gated component")

        total, weighted = L.total_distill_loss(cfg, {"dc": T(1.0), "trd": T(1.0), "rc_bev": boom})
        assert total.item() == 2.0 and "rc_bev" not in weighted

    def test_missing_component(self):
        with pytest.raises(ValueError):
            L.total_distill_loss(L.DistillConfig(), {"dc": T(1.0)})

    def test_unknown_component(self):
        with pytest.raises(KeyError):
            L.total_distill_loss(L.DistillConfig(), {"rc_bev": T(1.0), "rc_pv": T(1.0), "dc": T(1.0), "xx": T(1.0)})

    @given(st.lists(st.floats(0, 5), min_size=3, max_size=3), st.lists(st.floats(0, 2), min_size=3, max_size=3))
    @settings(max_examples=50)
    def test_bookkeeping(self, values, alphas):
        cfg = L.DistillConfig(alpha_rc_bev=alphas[0], alpha_rc_pv=alphas[1], alpha_dc=alphas[2])
        comps = dict(zip(("rc_bev", "rc_pv", "dc"), (T(v) for v in values)))
        total, weighted = L.total_distill_loss(cfg, comps)
        assert abs(total.item() - sum(weighted.values())) < 1e-12
        want = oracle_forward("total_distill_loss", alphas, values)
        assert abs(total.item() - want) < 1e-12
