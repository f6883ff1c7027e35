import numpy as np
import pytest
from pydantic import ValidationError

from services.attention import AttentionConfig, BridgeAttention, SEModule, pool, tokens_as_maps
from services.blocks import (
    SOURCE_PRESETS,
    BasicBlock,
    BlockSpec,
    BridgeSourceConfig,
    Bottleneck,
    TransformerBlock,
    TransformerStage,
    bridge_tap,
    build_block,
    resolve_sources,
)
from services.errors import ConfigError, ShapeError, TapError
from services.tensor_core import BN_EPS, Tensor

VARIANTS = ["se", "bav1", "bav2"]
BRIDGE = AttentionConfig(reduction=4)


def maps(seed, *shape):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def test_bottleneck_without_attention_reduces_to_shortcut():
    block = Bottleneck(16, 4, rng=np.random.default_rng(0))
    block.bn3.gamma.data[:] = 0.0
    block.eval()
    x = maps(0, 2, 16, 5, 5)
    np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0.0))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("stride", [1, 2])
def test_bottleneck_bypass_equals_plain_block(variant, stride):
    cfg = AttentionConfig(variant=variant, reduction=4)
    with_attention = Bottleneck(16, 8, stride, cfg, np.random.default_rng(1)).eval()
    plain = Bottleneck(16, 8, stride, None, np.random.default_rng(1)).eval()
    x = maps(1, 2, 16, 6, 6)
    bypassed, trace = with_attention.run(x, bypass=True)
    assert trace.omega is None
    np.testing.assert_array_equal(bypassed.data, plain(x).data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_basic_bypass_equals_plain_block(variant):
    cfg = AttentionConfig(variant=variant, reduction=2)
    with_attention = BasicBlock(8, 8, 1, cfg, np.random.default_rng(2)).eval()
    plain = BasicBlock(8, 8, 1, None, np.random.default_rng(2)).eval()
    x = maps(2, 2, 8, 5, 5)
    np.testing.assert_array_equal(with_attention.run(x, bypass=True)[0].data, plain(x).data)


def test_adjacent_only_bridge_block_equals_se_block():
    se_block = Bottleneck(32, 8, 1, AttentionConfig(variant="se", reduction=4), np.random.default_rng(3)).eval()
    ba_block = Bottleneck(
        32, 8, 1, AttentionConfig(variant="bav2", reduction=4, sources=("curr_conv3",)), np.random.default_rng(3)
    ).eval()
    assert ba_block.sources == ("adjacent",)
    bridge = ba_block.attention
    assert isinstance(bridge, BridgeAttention) and len(bridge.branch_proj) == 1
    assert isinstance(se_block.attention, SEModule)
    bridge.branch_proj[0].data = se_block.attention.w1.data.copy()
    bridge.w2.data = se_block.attention.w2.data.copy()
    bridge.fusion.data = np.ones(1)
    bridge.gen_bn.freeze_identity()

    x = maps(3, 2, 32, 4, 4)
    np.testing.assert_array_equal(ba_block(x).data, se_block(x).data)


def test_default_sources_feed_all_three_convolutions():
    block = Bottleneck(32, 8, 1, AttentionConfig(variant="bav2", reduction=4), np.random.default_rng(4)).eval()
    assert block.sources == ("curr_conv1", "curr_conv2", "adjacent")
    assert block.attention.in_widths == (8, 8, 32)
    _, trace = block.run(maps(4, 2, 32, 4, 4))
    assert trace.omega.shape == (2, 32)
    assert len(trace.squeezed) == 3


def test_stride_two_block_halves_resolution_and_projects_shortcut():
    block = Bottleneck(16, 8, 2, AttentionConfig(variant="bav1", reduction=4), np.random.default_rng(5)).eval()
    assert block.downsample is not None
    assert block(maps(5, 2, 16, 6, 6)).shape == (2, 32, 3, 3)


@pytest.mark.parametrize("stride, side", [(1, 6), (2, 3)])
@pytest.mark.parametrize("name", list(SOURCE_PRESETS))
def test_previous_block_sources_chain(name, stride, side):
    rng = np.random.default_rng(6)
    first = Bottleneck(16, 4, 1, AttentionConfig(variant="bav1", reduction=4), rng).eval()
    second = Bottleneck(
        16, 4, stride, AttentionConfig(variant="bav1", reduction=4, sources=SOURCE_PRESETS[name]), rng
    ).eval()
    h, previous = first.run(maps(6, 2, 16, 6, 6))
    y, trace = second.run(h, previous=previous)
    assert y.shape == (2, 16, side, side)
    assert trace.omega.shape == (2, 16)
    assert len(trace.squeezed) == len(SOURCE_PRESETS[name])


def test_previous_tap_without_previous_block():
    block = Bottleneck(16, 4, 1, AttentionConfig(variant="bav1", reduction=4, sources=("prev_end", "adjacent")))
    with pytest.raises(TapError):
        block.run(maps(7, 2, 16, 4, 4))


def test_source_config_normalizes_aliases():
    cfg = BridgeSourceConfig(sources=("prev_block_end", "curr_conv_n"))
    assert cfg.sources == ("prev_end", "adjacent")
    assert cfg.resolve("bottleneck") == ("prev_end", "adjacent")


def test_source_config_rejects_unknown_tap():
    with pytest.raises(ValidationError):
        BridgeSourceConfig(sources=("curr_conv7",))


@pytest.mark.parametrize(
    "kind, sources",
    [
        ("bottleneck", ("curr_conv1",)),
        ("basic", ("curr_conv3", "adjacent")),
        ("bottleneck", ("curr_conv1", "curr_conv1", "adjacent")),
    ],
)
def test_source_resolution_errors(kind, sources):
    with pytest.raises(TapError):
        resolve_sources(kind, sources)


def test_basic_block_last_conv_is_adjacent():
    assert resolve_sources("basic", ("curr_conv1", "curr_conv2")) == ("curr_conv1", "adjacent")
    assert resolve_sources("basic", None) == ("curr_conv1", "adjacent")


@pytest.mark.parametrize("integration", ["ba_mlp", "ba_block", "se_mlp"])
def test_transformer_bypass_equals_plain_block(integration):
    block = TransformerBlock(16, 2, integration, AttentionConfig(reduction=4), rng=np.random.default_rng(8))
    plain = TransformerBlock(16, 2, "none", rng=np.random.default_rng(8))
    x = maps(8, 2, 5, 16)
    np.testing.assert_array_equal(block.run(x, bypass=True)[0].data, plain(x).data)
    y, trace = block.run(x)
    assert y.shape == (2, 5, 16)
    assert trace.omega.shape == (2, 16)


def test_transformer_block_taps():
    block = TransformerBlock(16, 2, "ba_mlp", BRIDGE, rng=np.random.default_rng(9))
    assert block.attention.in_widths == (64, 16)
    block = TransformerBlock(16, 2, "ba_block", BRIDGE, rng=np.random.default_rng(9))
    assert block.attention.in_widths == (16, 16)


@pytest.mark.parametrize("integration", ["ba_mlp", "ba_block", "se_mlp", "ba_stage"])
def test_transformer_without_attention_config_has_no_attention(integration):
    stage = TransformerStage(16, 2, 2, integration, None, rng=np.random.default_rng(14))
    assert stage.integration == "none"
    assert stage.bridges == []
    assert all(block.attention is None for block in stage.blocks)
    assert TransformerBlock(16, 2, integration).attention is None


def test_single_token_ba_mlp_is_two_vector_bridge():
    rng = np.random.default_rng(15)
    block = TransformerBlock(16, 2, "ba_mlp", BRIDGE, rng=rng).eval()
    bridge = block.attention
    bridge.fusion.data = rng.uniform(0.2, 1.0, 2)
    x = maps(15, 3, 1, 16)
    y, trace = block.run(x)
    h, m = trace.features["fc1"], trace.features["fc2"]
    # пулинг по одному токену ничего не меняет
    np.testing.assert_array_equal(pool(tokens_as_maps(m)).data, m.data[:, 0, :])

    s = sum(f * (z.data[:, 0, :] @ w.data.T) for f, z, w in zip(bridge.fusion.data, (h, m), bridge.branch_proj))
    hidden = np.maximum(s / np.sqrt(1.0 + BN_EPS), 0.0)
    omega = 1.0 / (1.0 + np.exp(-(hidden @ bridge.w2.data.T)))
    np.testing.assert_allclose(trace.omega.data, omega, rtol=0, atol=1e-12)
    expected = x.data + trace.features["attn"].data + m.data * omega[:, None, :]
    np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-12)


def test_transformer_block_rejects_se_variant_for_bridge():
    with pytest.raises(ConfigError):
        TransformerBlock(16, 2, "ba_mlp", AttentionConfig(variant="se", reduction=4))


def test_transformer_block_rejects_wrong_token_width():
    with pytest.raises(ShapeError):
        TransformerBlock(16, 2, "none")(maps(10, 2, 5, 8))


def test_stage_bridges_adjacent_blocks():
    stage = TransformerStage(16, 3, 2, "ba_stage", BRIDGE, rng=np.random.default_rng(11))
    assert len(stage.bridges) == 2
    y, traces = stage.run(maps(11, 2, 4, 16))
    assert y.shape == (2, 4, 16)
    assert traces[0].omega is None
    assert all(t.omega.shape == (2, 16) for t in traces[1:])


def test_stage_bypass_equals_plain_stage():
    stage = TransformerStage(16, 2, 2, "ba_stage", BRIDGE, rng=np.random.default_rng(12))
    plain = TransformerStage(16, 2, 2, "none", rng=np.random.default_rng(12))
    x = maps(12, 2, 4, 16)
    np.testing.assert_array_equal(stage.run(x, bypass=True)[0].data, plain(x).data)


def test_block_spec_and_builder():
    spec = BlockSpec(kind="bottleneck", in_channels=64, width=64, stride=1)
    assert spec.out_channels == 256
    assert spec.has_downsample
    block = build_block(spec)
    assert isinstance(block, Bottleneck)
    se_spec = BlockSpec(kind="transformer", in_channels=16, width=16, integration="se_mlp", attention=BRIDGE)
    assert build_block(se_spec).attention is not None
    with pytest.raises(ShapeError):
        build_block(BlockSpec(kind="transformer", in_channels=16, width=32))


def test_bridge_tap_shapes_follow_predecessor_and_current_widths():
    rng = np.random.default_rng(13)
    first = Bottleneck(8, 4, 1, AttentionConfig(variant="bav2", reduction=4), rng).eval()
    second = Bottleneck(16, 8, 1, AttentionConfig(variant="bav2", reduction=4, sources=("prev_end", "curr_conv3")), rng).eval()
    h, previous = first.run(maps(13, 2, 8, 5, 5))
    _, trace = second.run(h, previous=previous)
    taps = bridge_tap(trace.features, ("prev_end", "adjacent"), previous)
    assert [t.shape for t in taps] == [(2, 16, 5, 5), (2, 32, 5, 5)]
    (weights,) = bridge_tap(trace.features, ("prev_attn",), previous)
    assert weights.shape == (2, 16, 1, 1)


def test_basic_block_bridge_extras_follow_simplified_counting():
    block = BasicBlock(64, 64, 1, AttentionConfig(variant="bav2", reduction=16))
    bridge = block.attention
    assert len(bridge.branch_proj) == 2
    assert bridge.fusion.size + bridge.gen_bn.gamma.size == 2 + 4
