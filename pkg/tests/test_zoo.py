import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hssl import autograd as ag
from hssl.autograd import Tensor, gradient_check
from hssl.errors import ConfigError, ContractError, GeometryError
from hssl.zoo import (AuxiliaryHeadSpec, BaseModelSpec, Block, BlockSpec, MixerKind,
                      build_auxiliary_head, build_base_model, grid_to_tokens,
                      pooled_representation, token_grid_reshape, zero_residual_branches)

from conftest import weighted_sum

MIXERS = [m.value for m in MixerKind]


def small_block(mixer, seed, width=8, tokens=16, keep_shortcut=True):
    spec = BlockSpec(mixer, width, mlp_ratio=2.0, num_heads=2, keep_shortcut=keep_shortcut,
                     kernel_size=3 if mixer != "pooling" else None)
    return Block(spec, tokens, np.random.default_rng(seed)).astype(np.float64)


def _perturb_branch_scales(block, seed):
    # unit branch scales hide bugs in their own gradients; use generic values
    r = np.random.default_rng([seed, 5])
    block.ls1.data = r.uniform(0.5, 1.5, block.ls1.shape)
    block.ls2.data = r.uniform(0.5, 1.5, block.ls2.shape)


@pytest.mark.parametrize("mixer", MIXERS)
def test_block_input_gradient(mixer):
    for seed in range(10):
        blk = small_block(mixer, seed)
        _perturb_branch_scales(blk, seed)
        x = np.random.default_rng(seed).standard_normal((2, 16, 8))
        assert gradient_check(lambda t: weighted_sum(blk(t), seed), x, max_coords=40, seed=seed,
                              floor=1e-5) < 1e-4


@pytest.mark.parametrize("mixer", MIXERS)
def test_block_parameter_gradients(mixer):
    for seed in range(10):
        blk = small_block(mixer, seed, keep_shortcut=seed % 2 == 0)
        _perturb_branch_scales(blk, seed)
        x = Tensor(np.random.default_rng(seed).standard_normal((2, 16, 8)))
        for name, p in blk.named_parameters():
            err = gradient_check(lambda _: weighted_sum(blk(x), seed), p, max_coords=12, seed=seed,
                                 floor=1e-5)
            assert err < 1e-4, f"{mixer} {name} seed {seed}"


def test_token_mlp_on_foreign_grid_has_gradients():
    blk = small_block("token_mlp", 0)
    x = np.random.default_rng(0).standard_normal((1, 4, 8))
    assert blk(Tensor(x)).shape == (1, 4, 8)
    assert gradient_check(lambda t: weighted_sum(blk(t), 3), x) < 1e-4


def test_grid_reshape_is_raster_order(rng):
    tokens = rng.standard_normal((9, 5))
    grid = token_grid_reshape(tokens).data
    assert grid.shape == (5, 3, 3)
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(grid[:, i, j], tokens[3 * i + j])
    np.testing.assert_array_equal(grid_to_tokens(grid).data, tokens)
    batched = rng.standard_normal((2, 16, 3))
    np.testing.assert_array_equal(grid_to_tokens(token_grid_reshape(batched)).data, batched)


def test_grid_reshape_rejects_non_square():
    with pytest.raises(GeometryError):
        token_grid_reshape(np.zeros((10, 4)))


def test_pooling_policies(rng):
    toks = rng.standard_normal((2, 5, 3))
    np.testing.assert_allclose(pooled_representation(toks).data, toks.mean(axis=1))
    np.testing.assert_allclose(pooled_representation(toks, "mean", has_class_token=True).data,
                               toks[:, 1:].mean(axis=1))
    np.testing.assert_array_equal(pooled_representation(toks, "class", True).data, toks[:, 0])
    with pytest.raises(ConfigError):
        pooled_representation(toks, "class", has_class_token=False)
    with pytest.raises(ConfigError):
        pooled_representation(toks, "max")
    with pytest.raises(ContractError):
        pooled_representation(np.zeros((2, 0, 3)))


def test_first_shortcut_removal_only_touches_first_block():
    head = AuxiliaryHeadSpec.uniform("h", "depthwise_conv", 3, 16, remove_first_shortcut=True)
    assert [b.keep_shortcut for b in head.blocks] == [False, True, True]
    kept = AuxiliaryHeadSpec.uniform("h", "depthwise_conv", 3, 16)
    assert all(b.keep_shortcut for b in kept.blocks)


def test_zeroed_branches_give_identity_or_zero(rng):
    x = Tensor(rng.standard_normal((2, 16, 8)))
    keep = zero_residual_branches(small_block("residual_conv", 0))
    np.testing.assert_array_equal(keep(x).data, x.data)
    cut = zero_residual_branches(small_block("residual_conv", 0, keep_shortcut=False))
    np.testing.assert_array_equal(cut(x).data, np.zeros_like(x.data))


def test_identity_head_copies_base_tokens(rng):
    spec = AuxiliaryHeadSpec.uniform("id", "attention", 2, 64)
    head = zero_residual_branches(build_auxiliary_head(spec, 64, seed=0))
    toks = Tensor(rng.standard_normal((2, 64, 64)).astype(np.float32))
    np.testing.assert_array_equal(head(toks).data, toks.data)


def test_head_adapter_only_when_widths_differ():
    same = build_auxiliary_head(AuxiliaryHeadSpec.uniform("a", "pooling", 1, 64), 64, 0)
    other = build_auxiliary_head(AuxiliaryHeadSpec.uniform("b", "pooling", 1, 32), 64, 0)
    assert same.adapter is None and other.adapter is not None
    assert other(Tensor(np.zeros((1, 4, 64), np.float32))).shape == (1, 4, 32)


def test_base_model_shapes_and_parameter_count():
    spec = BaseModelSpec(patch_size=4, image_size=16, embed_width=16, depth=2, num_heads=2)
    base = build_base_model(spec, 0)
    imgs = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
    tokens = base(imgs)
    assert tokens.shape == (3, 16, 16) and tokens.dtype == np.float32
    assert base.pool(tokens).shape == (3, 16)
    # smaller crops reuse the positional table through resampling
    assert base(imgs[:, :, :8, :8]).shape == (3, 4, 16)
    c, p, t, h = 16, 4, 16, 64
    block = (2 * c) + (c * 3 * c + 3 * c) + (c * c + c) + c + (2 * c) + (c * h + h + h * c + c) + c
    expected = (3 * p * p * c + c) + t * c + 2 * block + 2 * c
    assert base.num_parameters() == expected


def test_class_token_model():
    spec = BaseModelSpec(patch_size=4, image_size=8, embed_width=8, depth=1, num_heads=2,
                         class_token=True, pooling="class")
    base = build_base_model(spec, 1)
    tokens = base(np.zeros((2, 3, 8, 8), np.float32))
    assert tokens.shape == (2, 5, 8)
    np.testing.assert_array_equal(base.pool(tokens).data, tokens.data[:, 0])


def test_spatial_mixer_leaves_class_token_alone(rng):
    blk = small_block("depthwise_conv", 0)
    x = rng.standard_normal((1, 17, 8))
    x2 = x.copy()
    x2[:, 1:] += rng.standard_normal((1, 16, 8))
    y, y2 = blk(Tensor(x), has_cls=True).data, blk(Tensor(x2), has_cls=True).data
    np.testing.assert_array_equal(y[:, 0], y2[:, 0])
    assert not np.allclose(y[:, 1:], y2[:, 1:])


def test_geometry_and_spec_errors():
    base = build_base_model(BaseModelSpec(image_size=16, embed_width=8, depth=0, num_heads=2), 0)
    with pytest.raises(GeometryError):
        base(np.zeros((1, 3, 15, 15), np.float32))
    with pytest.raises(ConfigError):
        BaseModelSpec(image_size=30, patch_size=4).validate()
    with pytest.raises(ConfigError):
        BlockSpec("attention", 10, num_heads=4)
    with pytest.raises(ConfigError):
        MixerKind.parse("transformer-xl")
    with pytest.raises(ConfigError):
        AuxiliaryHeadSpec("empty").validate()


@pytest.mark.parametrize("alias,kind", [("ViT", "attention"), ("convnext", "depthwise_conv"),
                                        ("ResMLP", "token_mlp"), ("poolformer", "pooling"),
                                        ("resnet", "residual_conv"), ("depthwise-conv", "depthwise_conv")])
def test_mixer_aliases(alias, kind):
    assert MixerKind.parse(alias).value == kind


@given(st.sampled_from(MIXERS), st.integers(0, 2 ** 16))
def test_blocks_preserve_token_shape(mixer, seed):
    blk = small_block(mixer, seed)
    side = np.random.default_rng(seed).integers(2, 5)
    x = Tensor(np.random.default_rng(seed).standard_normal((1, side * side, 8)))
    y = blk(x)
    assert y.shape == x.shape and np.isfinite(y.data).all()


def test_float32_forward_matches_float64(rng):
    blk32 = Block(BlockSpec("attention", 8, num_heads=2), 16, np.random.default_rng(0))
    blk64 = Block(BlockSpec("attention", 8, num_heads=2), 16, np.random.default_rng(0)).astype(np.float64)
    x = rng.standard_normal((2, 16, 8))
    np.testing.assert_allclose(blk32(Tensor(x.astype(np.float32))).data, blk64(Tensor(x)).data,
                               rtol=1e-4, atol=1e-5)
    assert ag.is_grad_enabled()
