import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.attention import (
    AttentionConfig,
    BridgeAttention,
    SEModule,
    build_attention,
)
from services.errors import ConfigError, ShapeError, TapError
from services.layers import (
    BatchNorm,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
)
from services.tensor_core import Tensor, channel_scale

logger = logging.getLogger(__name__)

BlockKind = Literal["basic", "bottleneck", "transformer"]
Integration = Literal["none", "ba_mlp", "ba_block", "se_mlp", "ba_stage"]

EXPANSION = 4

TAP_ALIASES: dict[str, str] = {
    "prev_block_conv3": "prev_conv3",
    "prev_block_end": "prev_end",
    "prev_block_attn": "prev_attn",
    "curr_conv_n": "adjacent",
}
PREV_TAPS = ("prev_conv3", "prev_end", "prev_attn")
KNOWN_TAPS = PREV_TAPS + ("curr_conv1", "curr_conv2", "curr_conv3", "adjacent")

DEFAULT_SOURCES: dict[str, tuple[str, ...]] = {
    "bottleneck": ("curr_conv1", "curr_conv2", "adjacent"),
    "basic": ("curr_conv1", "adjacent"),
}

# Конфигурации мостов из абляции источников признаков
SOURCE_PRESETS: dict[str, tuple[str, ...]] = {
    "prev_attn": ("prev_attn", "adjacent"),
    "prev_conv3": ("prev_conv3", "adjacent"),
    "prev_end": ("prev_end", "adjacent"),
    "curr_conv1": ("curr_conv1", "adjacent"),
    "curr_conv2": ("curr_conv2", "adjacent"),
    "curr_conv1&2": ("curr_conv1", "curr_conv2", "adjacent"),
}


class BridgeSourceConfig(BaseModel):
    """
    Упорядоченный список точек съема признаков для интеграции
    """

    model_config = ConfigDict(frozen=True)

    sources: tuple[str, ...]

    @field_validator("sources")
    @classmethod
    def _known_taps(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        taps = tuple(TAP_ALIASES.get(tap, tap) for tap in value)
        unknown = [tap for tap in taps if tap not in KNOWN_TAPS]
        if unknown:
            raise ValueError(f"неизвестные точки съема: {', '.join(unknown)}")
        return taps

    def resolve(self, kind: str) -> tuple[str, ...]:
        """
        Привести имена к каноническим для данного типа блока:
        последняя свертка блока всегда называется adjacent
        """

        last_conv = "curr_conv3" if kind == "bottleneck" else "curr_conv2"
        resolved = []
        for tap in self.sources:
            if tap == last_conv:
                tap = "adjacent"
            elif tap == "curr_conv3" or (tap == "curr_conv2" and kind != "bottleneck"):
                raise TapError(f"в блоке {kind} нет точки {tap}")
            resolved.append(tap)
        if "adjacent" not in resolved:
            raise TapError("среди источников должен быть соседний слой (adjacent)")
        if len(set(resolved)) != len(resolved):
            raise TapError(f"повторяющиеся источники: {resolved}")
        return tuple(resolved)


def resolve_sources(kind: str, sources: Optional[Sequence[str]]) -> tuple[str, ...]:
    if sources is None:
        return DEFAULT_SOURCES[kind]
    return BridgeSourceConfig(sources=tuple(sources)).resolve(kind)


def tap_width(tap: str, in_channels: int, width: int, out_channels: int) -> int:
    if tap in PREV_TAPS:
        return in_channels
    if tap == "adjacent":
        return out_channels
    return width


class BlockSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: BlockKind
    in_channels: int = Field(ge=1)
    # bottleneck: C_mid; basic: ширина обеих сверток; transformer: D
    width: int = Field(ge=1)
    stride: int = Field(1, ge=1)
    attention: Optional[AttentionConfig] = None
    integration: Integration = "none"
    heads: int = Field(2, ge=1)

    @property
    def out_channels(self) -> int:
        return EXPANSION * self.width if self.kind == "bottleneck" else self.width

    @property
    def has_downsample(self) -> bool:
        return self.kind != "transformer" and (self.stride != 1 or self.in_channels != self.out_channels)


@dataclass
class BlockTrace:
    """
    Промежуточные значения одного прохода блока
    """

    features: dict[str, Tensor] = field(default_factory=dict)
    omega: Optional[Tensor] = None
    squeezed: list[Tensor] = field(default_factory=list)


def bridge_tap(
    features: dict[str, Tensor],
    sources: Sequence[str],
    previous: Optional[BlockTrace] = None
) -> list[Tensor]:
    """
    Собрать входы интеграции в объявленном порядке
    """

    taps = []
    for tap in sources:
        if tap in PREV_TAPS:
            if previous is None:
                raise TapError(f"точка {tap} требует предыдущего блока")
            if tap == "prev_attn":
                if previous.omega is None:
                    raise TapError("у предыдущего блока нет весов внимания")
                n, c = previous.omega.shape
                taps.append(previous.omega.reshape(n, c, 1, 1))
            else:
                key = "adjacent" if tap == "prev_conv3" else "end"
                taps.append(previous.features[key])
        else:
            key = {"curr_conv1": "conv1", "curr_conv2": "conv2"}.get(tap, tap)
            if key not in features:
                raise TapError(f"в трассе блока нет точки {tap}")
            taps.append(features[key])
    return taps


class ResidualBlock(Module):
    """
    Общая часть остаточных блоков: внимание над последней сверткой,
    затем сложение с (возможно прореженным) входом и ReLU
    """

    kind = "basic"

    def _setup_attention(
        self,
        in_channels: int,
        width: int,
        out_channels: int,
        attention: Optional[AttentionConfig],
        rng: np.random.Generator
    ) -> None:
        self.attention_cfg = attention
        self.sources: tuple[str, ...] = ()
        self.attention: Optional[Module] = None
        if attention is None:
            return
        if attention.variant == "se":
            self.sources = ("adjacent",)
        else:
            self.sources = resolve_sources(self.kind, attention.sources)
        widths = [tap_width(tap, in_channels, width, out_channels) for tap in self.sources]
        self.attention = build_attention(attention, widths, out_channels, rng)

    def _setup_shortcut(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator) -> None:
        self.downsample: Optional[Conv2d] = None
        self.downsample_bn: Optional[BatchNorm] = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng)
            self.downsample_bn = BatchNorm(out_channels)

    def _branch(self, x: Tensor) -> dict[str, Tensor]:
        raise NotImplementedError

    def run(
        self,
        x: Tensor,
        previous: Optional[BlockTrace] = None,
        bypass: bool = False
    ) -> tuple[Tensor, BlockTrace]:
        features = self._branch(x)
        out = features["adjacent"]
        trace = BlockTrace(features)
        if self.attention is not None and not bypass:
            if isinstance(self.attention, SEModule):
                inputs = [out]
            else:
                inputs = bridge_tap(features, self.sources, previous)
            trace.omega, trace.squeezed = self.attention.trace(inputs)
            out = channel_scale(out, trace.omega)
        shortcut = x if self.downsample is None else self.downsample_bn(self.downsample(x))
        if shortcut.shape != out.shape:
            raise ShapeError(f"остаточная связь: {shortcut.shape} и {out.shape}")
        y = (out + shortcut).relu()
        features["end"] = y
        return y, trace

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]


class Bottleneck(ResidualBlock):
    """
    1×1 (сжатие) → 3×3 (шаг) → 1×1 (расширение ×4); внимание по трем сверткам
    """

    kind = "bottleneck"

    def __init__(
        self,
        in_channels: int,
        width: int,
        stride: int = 1,
        attention: Optional[AttentionConfig] = None,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        out_channels = EXPANSION * width
        self.in_channels, self.width, self.out_channels = in_channels, width, out_channels
        self.conv1 = Conv2d(in_channels, width, 1, rng=rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1, rng=rng)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv2d(width, out_channels, 1, rng=rng)
        self.bn3 = BatchNorm(out_channels)
        self._setup_shortcut(in_channels, out_channels, stride, rng)
        self._setup_attention(in_channels, width, out_channels, attention, rng)

    def _branch(self, x: Tensor) -> dict[str, Tensor]:
        h1 = self.bn1(self.conv1(x)).relu()
        h2 = self.bn2(self.conv2(h1)).relu()
        # без ReLU: масштабирование вниманием идет до сложения
        h3 = self.bn3(self.conv3(h2))
        return {"conv1": h1, "conv2": h2, "adjacent": h3}


class BasicBlock(ResidualBlock):
    kind = "basic"

    def __init__(
        self,
        in_channels: int,
        width: int,
        stride: int = 1,
        attention: Optional[AttentionConfig] = None,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.width, self.out_channels = in_channels, width, width
        self.conv1 = Conv2d(in_channels, width, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm(width)
        self._setup_shortcut(in_channels, width, stride, rng)
        self._setup_attention(in_channels, width, width, attention, rng)

    def _branch(self, x: Tensor) -> dict[str, Tensor]:
        h1 = self.bn1(self.conv1(x)).relu()
        h2 = self.bn2(self.conv2(h1))
        return {"conv1": h1, "adjacent": h2}


class TransformerBlock(Module):
    """
    Pre-norm блок: X + MHSA(LN(X)), затем MLP с выбранной интеграцией внимания.

    ba_mlp: мост между выходами FC1 и FC2, веса масштабируют выход FC2;
    se_mlp: SE только по выходу FC2;
    ba_block: мост между выходом самовнимания и выходом MLP;
    ba_stage и none: блок без внимания (ba_stage живет в TransformerStage).
    Без конфига внимания любая интеграция сводится к none.
    """

    def __init__(
        self,
        dim: int,
        heads: int = 2,
        integration: Integration = "ba_mlp",
        attention: Optional[AttentionConfig] = None,
        mlp_ratio: int = 4,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if heads < 1 or dim % heads:
            raise ShapeError(f"размерность {dim} не делится на число голов {heads}")
        hidden = mlp_ratio * dim
        if attention is None and integration != "none":
            logger.debug(f"интеграция {integration} без конфига внимания, блок строится без внимания")
            integration = "none"
        self.dim = dim
        self.integration = integration
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

        self.attention: Optional[Module] = None
        if integration == "se_mlp":
            self.attention = SEModule(dim, attention.reduction, attention.pooling, rng)
        elif integration in ("ba_mlp", "ba_block"):
            if attention.variant == "se":
                raise ConfigError(f"интеграция {integration} требует варианта bav1 или bav2")
            widths = [hidden, dim] if integration == "ba_mlp" else [dim, dim]
            self.attention = BridgeAttention(widths, dim, attention.reduction, attention.variant, attention.pooling, rng)
        elif integration not in ("none", "ba_stage"):
            raise ConfigError(f"неизвестная интеграция: {integration}")

    def run(self, x: Tensor, bypass: bool = False) -> tuple[Tensor, BlockTrace]:
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeError(f"блок ожидает [N,T,{self.dim}], получено {x.shape}")
        a = self.attn(self.ln1(x))
        x1 = x + a
        h = self.fc1(self.ln2(x1)).relu()
        m = self.fc2(h)
        trace = BlockTrace({"attn": a, "fc1": h, "fc2": m})
        if self.attention is not None and not bypass:
            if self.integration == "se_mlp":
                inputs = [m]
            elif self.integration == "ba_mlp":
                inputs = [h, m]
            else:
                inputs = [a, m]
            trace.omega, trace.squeezed = self.attention.trace(inputs)
            m = channel_scale(m, trace.omega)
        y = x1 + m
        trace.features["end"] = y
        return y, trace

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]


class TransformerStage(Module):
    """
    Последовательность блоков; при ba_stage мост соединяет выходы соседних
    блоков t−1 и t и масштабирует выход блока t
    """

    def __init__(
        self,
        dim: int,
        depth: int = 2,
        heads: int = 2,
        integration: Integration = "ba_mlp",
        attention: Optional[AttentionConfig] = None,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if attention is None and integration != "none":
            logger.warning(f"Интеграция {integration} запрошена без модуля внимания, стадия строится без внимания")
            integration = "none"
        self.integration = integration
        self.blocks = [
            TransformerBlock(dim, heads, integration, attention, rng=rng)
            for _ in range(depth)
        ]
        self.bridges: list[BridgeAttention] = []
        if integration == "ba_stage":
            if attention.variant == "se":
                raise ConfigError("ba_stage требует варианта bav1 или bav2")
            self.bridges = [
                BridgeAttention([dim, dim], dim, attention.reduction, attention.variant, attention.pooling, rng)
                for _ in range(depth - 1)
            ]

    def run(self, x: Tensor, bypass: bool = False) -> tuple[Tensor, list[BlockTrace]]:
        traces: list[BlockTrace] = []
        previous: Optional[Tensor] = None
        for t, block in enumerate(self.blocks):
            y, trace = block.run(x, bypass=bypass)
            if self.bridges and previous is not None and not bypass:
                trace.omega, trace.squeezed = self.bridges[t - 1].trace([previous, y])
                y = channel_scale(y, trace.omega)
                trace.features["end"] = y
            traces.append(trace)
            previous = x = y
        return x, traces

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]


def build_block(spec: BlockSpec, rng: Optional[np.random.Generator] = None) -> Module:
    if spec.kind == "bottleneck":
        return Bottleneck(spec.in_channels, spec.width, spec.stride, spec.attention, rng)
    if spec.kind == "basic":
        return BasicBlock(spec.in_channels, spec.width, spec.stride, spec.attention, rng)
    if spec.in_channels != spec.width:
        raise ShapeError("блок трансформера сохраняет размерность токенов")
    return TransformerBlock(spec.width, spec.heads, spec.integration, spec.attention, rng=rng)
