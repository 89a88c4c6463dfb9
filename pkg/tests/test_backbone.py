import numpy as np
import pytest

from msx import tensor as T
from msx.backbone import Backbone, BackboneConfig, load_freeze
from msx.fusion import parameter_count
from msx.nn import LoadError, ResidualBlock, collect_state, load_state
from msx.tensor import ShapeError, Tensor


def desk_backbone(seed=0, frozen=False):
    return Backbone(BackboneConfig.desk(frozen), np.random.default_rng(seed))


class TestConfig:
    def test_non_increasing_channels_rejected(self):
        with pytest.raises(ValueError, match="increase"):
            BackboneConfig("bad", 64, 1, 8, (64, 64, 128))

    def test_side_must_divide_by_8(self):
        with pytest.raises(ValueError, match="divisible"):
            BackboneConfig("bad", 60, 1, 8, (32, 64, 128))


class TestForward:
    def test_desk_shapes(self):
        bb = desk_backbone()
        img = Tensor(np.random.default_rng(1).random((1, 64, 64)).astype(np.float32))
        feats = bb.forward(img, training=False)
        assert feats.shapes() == ((32, 8, 8), (64, 8, 8), (128, 8, 8))

    def test_all_outputs_share_extent(self):
        for side in (16, 32):
            cfg = BackboneConfig("custom", side, 1, 4, (8, 16, 32))
            bb = Backbone(cfg, np.random.default_rng(2))
            img = Tensor(np.zeros((1, side, side), dtype=np.float32))
            feats = bb.forward(img)
            for shape in feats.shapes():
                assert shape[1:] == (side // 8, side // 8)

    def test_grayscale_replicated_to_stem_channels(self):
        cfg = BackboneConfig("custom", 16, 3, 4, (8, 16, 32))
        bb = Backbone(cfg, np.random.default_rng(3))
        img = Tensor(np.random.default_rng(4).random((1, 16, 16)).astype(np.float32))
        feats = bb.forward(img)
        assert feats.block4.shape == (32, 2, 2)

    def test_wrong_side_rejected(self):
        bb = desk_backbone()
        with pytest.raises(ShapeError, match="64"):
            bb.forward(Tensor(np.zeros((1, 32, 32), dtype=np.float32)))

    def test_batched(self):
        bb = desk_backbone()
        imgs = Tensor(np.random.default_rng(5).random((2, 1, 64, 64)).astype(np.float32))
        feats = bb.forward(imgs, training=True)
        assert feats.shapes() == ((2, 32, 8, 8), (2, 64, 8, 8), (2, 128, 8, 8))


class TestResidualIdentity:
    def test_zero_second_conv_is_identity_on_nonneg_input(self):
        block = ResidualBlock(4, 4, np.random.default_rng(6), dtype=np.float64)
        block.conv2.w.data[:] = 0.0
        x = Tensor(np.random.default_rng(7).random((1, 4, 6, 6)))  # nonnegative
        out = block(x, training=True)
        assert np.array_equal(out.data, x.data)


class TestFreezeAndLoad:
    def test_frozen_params_take_no_gradient(self):
        bb = desk_backbone(frozen=True)
        img = Tensor(np.random.default_rng(8).random((2, 1, 64, 64)).astype(np.float32))
        feats = bb.forward(img, training=True)
        before = collect_state(bb)
        T.tmean(feats.block4).backward()
        for _, p in bb.named_params(""):
            assert not p.requires_grad
            assert p.grad is None
        after = collect_state(bb)
        for k in before:
            assert np.array_equal(before[k], after[k]), k

    def test_frozen_keeps_running_stats(self):
        bb = desk_backbone(frozen=True)
        stats_before = bb.stem_bn.stats.mean.copy()
        img = Tensor(np.random.default_rng(9).random((2, 1, 64, 64)).astype(np.float32))
        bb.forward(img, training=True)
        assert np.array_equal(bb.stem_bn.stats.mean, stats_before)

    def test_save_load_round_trip_bitwise(self):
        bb = desk_backbone(seed=10)
        img = Tensor(np.random.default_rng(11).random((1, 1, 64, 64)).astype(np.float32))
        out1 = bb.forward(img).block4.data.copy()
        state = collect_state(bb)
        bb2 = desk_backbone(seed=99)
        load_state(bb2, state)
        out2 = bb2.forward(img).block4.data
        assert np.array_equal(out1, out2)

    def test_mismatched_shape_names_tensor(self):
        bb = desk_backbone(seed=12)
        state = collect_state(bb)
        state["stem_conv.w"] = np.zeros((3, 3, 3, 3), dtype=np.float32)
        with pytest.raises(LoadError, match="stem_conv.w"):
            load_state(desk_backbone(seed=13), state)

    def test_missing_tensor_named(self):
        bb = desk_backbone(seed=14)
        state = collect_state(bb)
        del state["block4.conv1.w"]
        with pytest.raises(LoadError, match="block4.conv1.w"):
            load_state(desk_backbone(seed=15), state)

    def test_frozen_excluded_from_trainable_count(self):
        bb = desk_backbone(seed=16)
        full = parameter_count(bb.param_groups())["backbone"]
        assert full > 0
        load_freeze(bb, collect_state(bb), frozen=True)
        assert parameter_count(bb.param_groups())["backbone"] == 0
        bb.set_frozen(False)
        assert parameter_count(bb.param_groups())["backbone"] == full
