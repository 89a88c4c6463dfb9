import numpy as np
import pytest

from msx import tensor as T
from msx.fusion import AttentionPool, FusionClassifier, FusionConfig, bce_loss, parameter_count
from msx.gradcheck import max_rel_error
from msx.tensor import ShapeError, Tensor

DESK = FusionConfig(c_b2=32, c_b3=64, c_b4=128, r4=16, r23=8)


def make_model(cfg=DESK, seed=0, **kw):
    return FusionClassifier(cfg, np.random.default_rng(seed), **kw)


def rand_maps(cfg, side=4, seed=1, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return tuple(
        Tensor(rng.standard_normal((c, side, side)).astype(dtype))
        for c in (cfg.c_b2, cfg.c_b3, cfg.c_b4)
    )


class TestConfig:
    def test_mismatched_reduction_widths_rejected(self):
        with pytest.raises(ValueError, match="r23"):
            FusionConfig(8, 8, 8, r4=16, r23=4)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            FusionConfig(0, 8, 8, r4=16, r23=8)


class TestReductions:
    def test_desk_shapes(self):
        m = make_model()
        b2, b3, b4 = rand_maps(DESK, side=8)
        assert m.reduce_b4(b4).shape == (16, 8, 8)
        assert m.reduce_and_merge(b2, b3).shape == (16, 8, 8)

    def test_identity_kernel_square_reduction(self):
        cfg = FusionConfig(c_b2=4, c_b3=4, c_b4=6, r4=6, r23=3)
        m = make_model(cfg)
        m.reduce4.w.data[:] = np.eye(6).reshape(6, 6, 1, 1)
        m.reduce4.b.data[:] = 0
        x = Tensor(np.random.default_rng(2).standard_normal((6, 5, 5)).astype(np.float32))
        assert np.allclose(m.reduce_b4(x).data, x.data)

    def test_channel_mismatch(self):
        m = make_model()
        with pytest.raises(ShapeError, match="128"):
            m.reduce_b4(Tensor(np.zeros((64, 4, 4))))

    def test_spatial_mismatch(self):
        m = make_model()
        with pytest.raises(ShapeError, match="extents"):
            m.reduce_and_merge(Tensor(np.zeros((32, 4, 4))), Tensor(np.zeros((64, 8, 8))))

    def test_zero_reductions_zero_output(self):
        m = make_model()
        for conv in (m.reduce2, m.reduce3):
            conv.w.data[:] = 0
            conv.b.data[:] = 0
        b2, b3, _ = rand_maps(DESK)
        assert np.array_equal(m.reduce_and_merge(b2, b3).data, np.zeros((16, 4, 4)))

    def test_merge_order_is_b2_then_b3(self):
        m = make_model()
        b2, b3, _ = rand_maps(DESK)
        merged = m.reduce_and_merge(b2, b3)
        alone = m.reduce2(b2)
        assert np.array_equal(merged.data[:8], alone.data)
        assert np.array_equal(merged.data[8:], m.reduce3(b3).data)


class TestAttentionPool:
    def test_single_token_returned_exactly(self):
        pool = AttentionPool(5, np.random.default_rng(0), projections=False)
        x = Tensor(np.random.default_rng(1).standard_normal((5, 1, 1)))
        out = pool(x)
        assert np.array_equal(out.data, x.data[:, 0, 0])

    def test_constant_map_returns_the_constant_vector(self):
        pool = AttentionPool(3, np.random.default_rng(0), projections=False)
        v = np.array([0.3, -1.2, 2.0])
        x = Tensor(np.broadcast_to(v[:, None, None], (3, 4, 4)).copy())
        assert np.allclose(pool(x).data, v, atol=1e-12)

    def test_two_token_hand_oracle(self):
        pool = AttentionPool(1, np.random.default_rng(0), projections=False)
        x = Tensor(np.array([[[0.0, 2.0]]]))  # tokens 0 and 2, q = 1, d_k = 1
        out, w = pool(x, return_weights=True)
        e2 = np.exp(2.0)
        assert np.allclose(w.data, [1 / (1 + e2), e2 / (1 + e2)])
        assert out.data[0] == pytest.approx(2 * e2 / (1 + e2), abs=1e-9)
        assert out.data[0] == pytest.approx(1.7616, abs=5e-5)

    def test_output_length_equals_channels(self):
        rng = np.random.default_rng(3)
        for c, h, w in [(2, 3, 5), (7, 1, 4), (16, 8, 8)]:
            pool = AttentionPool(c, rng, projections=True)
            out = pool(Tensor(rng.standard_normal((c, h, w)).astype(np.float32)))
            assert out.shape == (c,)

    def test_weights_form_distribution(self):
        rng = np.random.default_rng(4)
        pool = AttentionPool(6, rng, projections=True, dtype=np.float64)
        pool.wq.w.data[:] = rng.standard_normal((6, 6))  # move off the uniform start
        _, w = pool(Tensor(rng.standard_normal((6, 5, 5)) * 3), return_weights=True)
        assert np.all(w.data >= 0)
        assert abs(w.data.sum() - 1.0) < 1e-6

    def test_projection_init_reproduces_gap(self):
        rng = np.random.default_rng(40)
        pool = AttentionPool(5, rng, projections=True, dtype=np.float64)
        x = rng.standard_normal((5, 4, 4))
        out = pool(Tensor(x))
        assert np.allclose(out.data, x.mean(axis=(1, 2)), atol=1e-12)

    @pytest.mark.parametrize("projections", [False, True])
    def test_spatial_permutation_invariance(self, projections):
        rng = np.random.default_rng(5)
        pool = AttentionPool(4, rng, projections=projections, dtype=np.float64)
        if projections:
            pool.wq.w.data[:] = rng.standard_normal((4, 4))
        x = rng.standard_normal((4, 3, 4))
        out, w = pool(Tensor(x), return_weights=True)
        flat = x.reshape(4, 12)
        perm = rng.permutation(12)
        xp = flat[:, perm].reshape(4, 3, 4)
        out_p, w_p = pool(Tensor(xp), return_weights=True)
        assert np.allclose(out.data, out_p.data, atol=1e-9)
        assert np.allclose(w.data[perm], w_p.data, atol=1e-9)

    def test_convex_hull_without_projections(self):
        rng = np.random.default_rng(6)
        pool = AttentionPool(5, rng, projections=False)
        x = rng.standard_normal((5, 4, 4))
        out = pool(Tensor(x)).data
        tokens = x.reshape(5, 16)
        assert np.all(out <= tokens.max(axis=1) + 1e-12)
        assert np.all(out >= tokens.min(axis=1) - 1e-12)

    def test_external_query_changes_focus(self):
        rng = np.random.default_rng(7)
        pool = AttentionPool(3, rng, projections=False, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 2, 2)))
        q = Tensor(np.array([10.0, 0.0, 0.0]))
        out_q = pool(x, query=q)
        out_default = pool(x)
        assert not np.allclose(out_q.data, out_default.data)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(8)
        pool = AttentionPool(4, rng, projections=True, dtype=np.float64)
        xs = rng.standard_normal((3, 4, 2, 5))
        batched = pool(Tensor(xs)).data
        for i in range(3):
            single = pool(Tensor(xs[i])).data
            assert np.allclose(batched[i], single, atol=1e-12)

    def test_channel_mismatch(self):
        pool = AttentionPool(4, np.random.default_rng(9))
        with pytest.raises(ShapeError):
            pool(Tensor(np.zeros((5, 2, 2))))


class TestClassify:
    def test_zero_head_gives_half(self):
        m = make_model()
        m.head.w.data[:] = 0
        m.head.b.data[:] = 0
        b2, b3, b4 = rand_maps(DESK, seed=10)
        out = m.classify(b2, b3, b4)
        assert out.shape == (1,)
        assert out.data[0] == pytest.approx(0.5)

    def test_paper_profile_feature_width(self):
        cfg = FusionConfig(512, 1024, 2048, r4=64, r23=32)
        m = make_model(cfg, seed=11)
        assert sum(m.branch_widths) == 128
        assert m.head.w.shape == (1, 128)

    def test_output_strictly_in_unit_interval(self):
        m = make_model(seed=12)
        rng = np.random.default_rng(13)
        for trial in range(5):
            maps = tuple(
                Tensor(5 * rng.standard_normal((c, 4, 4)).astype(np.float32))
                for c in (32, 64, 128)
            )
            p = m.classify(*maps).data[0]
            assert 0.0 < p < 1.0

    def test_batched_classify(self):
        m = make_model(seed=14)
        rng = np.random.default_rng(15)
        maps = tuple(Tensor(rng.standard_normal((3, c, 4, 4)).astype(np.float32)) for c in (32, 64, 128))
        assert m.classify(*maps).shape == (3,)

    def test_baseline_variant_uses_only_deep_map(self):
        m = make_model(blocks=(4,), merge23=False, use_transformer=False, seed=16)
        assert m.reduce2 is None and m.reduce3 is None and not m.pools
        _, _, b4 = rand_maps(DESK, seed=17)
        assert m.classify(None, None, b4).shape == (1,)

    def test_gradients_match_central_differences(self):
        cfg = FusionConfig(c_b2=4, c_b3=6, c_b4=8, r4=4, r23=2)
        m = FusionClassifier(cfg, np.random.default_rng(18), dtype=np.float64)
        rng = np.random.default_rng(19)
        maps = rand_maps(cfg, side=3, seed=20)
        y = np.array([1.0])
        params = [p for _, p in m.named_params("")]

        def fn(*ps):
            return bce_loss(m.classify(*maps), y)

        err = max_rel_error(fn, params)
        assert err < 1e-4, f"classifier gradient error {err:.2e}"


class TestBceLoss:
    def test_perfect_prediction_loss_small(self):
        loss = bce_loss(Tensor(np.array([1.0 - 1e-9])), np.array([1.0]))
        assert loss.item() < 1e-6

    def test_half_probability(self):
        loss = bce_loss(Tensor(np.array([0.5])), np.array([1.0]))
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-9)

    def test_two_sample_hand_value(self):
        loss = bce_loss(Tensor(np.array([0.9, 0.2])), np.array([1.0, 0.0]))
        expect = (-np.log(0.9) - np.log(0.8)) / 2
        assert loss.item() == pytest.approx(expect, rel=1e-9)
        assert loss.item() == pytest.approx(0.1643, abs=5e-5)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            bce_loss(Tensor(np.zeros(0)), np.zeros(0))

    def test_clamp_keeps_loss_finite(self):
        loss = bce_loss(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
        assert np.isfinite(loss.item())


class TestParameterCount:
    def test_dense_head(self):
        cfg = FusionConfig(512, 1024, 2048, r4=64, r23=32)
        m = make_model(cfg, seed=21)
        counts = parameter_count(m.param_groups())
        assert counts["head"] == 129

    def test_paper_profile_hand_counts(self):
        cfg = FusionConfig(512, 1024, 2048, r4=64, r23=32)
        m = make_model(cfg, seed=22)
        counts = parameter_count(m.param_groups())
        assert counts["reductions"] == 2048 * 64 + 64 + 512 * 32 + 32 + 1024 * 32 + 32
        assert counts["reductions"] == 180_352
        assert counts["attention"] == 2 * 4 * (64 * 64 + 64)
        assert counts["attention"] == 33_280
        assert counts["total"] == 180_352 + 33_280 + 129

    def test_frozen_params_not_counted(self):
        m = make_model(seed=23)
        for _, p in m.named_params(""):
            p.requires_grad = False
        counts = parameter_count(m.param_groups())
        assert counts["total"] == 0
