import logging
from typing import Literal, Optional

import numpy as np

from services.attention import AttentionConfig
from services.blocks import (
    EXPANSION,
    PREV_TAPS,
    BasicBlock,
    BlockTrace,
    Bottleneck,
    Integration,
    TransformerStage,
)
from services.errors import ConfigError
from services.layers import BatchNorm, Conv2d, LayerNorm, Linear, Module
from services.tensor_core import Tensor, gap

logger = logging.getLogger(__name__)

ModelName = Literal["toy2", "toy3", "toy4", "toyvit"]
PATCH_SIZE = 8

MODEL_DEPTHS: dict[str, int] = {"toy2": 2, "toy3": 3, "toy4": 4}


class ToyConvNet(Module):
    """
    Стем 3×3 → 2–4 остаточных блока → gap → линейная голова.

    Ширина удваивается (с шагом 2) на блоке depth // 2. Источники моста
    из предыдущего блока применяются начиная со второго блока, первый
    использует источники по умолчанию.
    """

    def __init__(
        self,
        depth: int = 3,
        block: Literal["basic", "bottleneck"] = "bottleneck",
        width: int = 16,
        classes: int = 4,
        attention: Optional[AttentionConfig] = None,
        in_channels: int = 3,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        if not 2 <= depth <= 4:
            raise ConfigError(f"глубина игрушечной сети {depth} вне диапазона 2..4")
        if block == "bottleneck" and width % EXPANSION:
            raise ConfigError(f"ширина {width} должна делиться на {EXPANSION}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Conv2d(in_channels, width, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm(width)

        first_cfg = attention
        if attention is not None and attention.sources is not None:
            if any(tap in PREV_TAPS for tap in attention.sources):
                first_cfg = attention.model_copy(update={"sources": None})

        self.blocks: list[Module] = []
        channels = width
        for i in range(depth):
            stride = 2 if i == depth // 2 else 1
            out = channels * stride
            cfg = first_cfg if i == 0 else attention
            if block == "bottleneck":
                self.blocks.append(Bottleneck(channels, out // EXPANSION, stride, cfg, rng))
            else:
                self.blocks.append(BasicBlock(channels, out, stride, cfg, rng))
            channels = out
        self.head = Linear(channels, classes, rng=rng)

    def run(self, x: Tensor, bypass: bool = False) -> tuple[Tensor, list[BlockTrace]]:
        h = self.stem_bn(self.stem(x)).relu()
        traces: list[BlockTrace] = []
        previous: Optional[BlockTrace] = None
        for block in self.blocks:
            h, previous = block.run(h, previous=previous, bypass=bypass)
            traces.append(previous)
        return self.head(gap(h)), traces

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]


class ToyTransformer(Module):
    """
    Патчи 8×8 (свертка с шагом 8) → этап из блоков трансформера → LN →
    среднее по токенам → голова
    """

    def __init__(
        self,
        dim: int = 16,
        depth: int = 2,
        heads: int = 2,
        classes: int = 4,
        integration: Integration = "ba_mlp",
        attention: Optional[AttentionConfig] = None,
        in_channels: int = 3,
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embed = Conv2d(in_channels, dim, PATCH_SIZE, stride=PATCH_SIZE, bias=True, rng=rng)
        self.stage = TransformerStage(dim, depth, heads, integration, attention, rng=rng)
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, classes, rng=rng)

    def run(self, x: Tensor, bypass: bool = False) -> tuple[Tensor, list[BlockTrace]]:
        patches = self.embed(x)
        n, d = patches.shape[0], patches.shape[1]
        tokens = patches.reshape(n, d, -1).transpose(0, 2, 1)
        h, traces = self.stage.run(tokens, bypass=bypass)
        return self.head(self.norm(h).mean(axis=1)), traces

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x)[0]


def build_model(
    name: ModelName,
    attention: Optional[AttentionConfig] = None,
    block: Literal["basic", "bottleneck"] = "bottleneck",
    width: int = 16,
    classes: int = 4,
    integration: Integration = "ba_mlp",
    seed: int = 0
) -> Module:
    rng = np.random.default_rng(seed)
    if name == "toyvit":
        return ToyTransformer(dim=width, classes=classes, integration=integration, attention=attention, rng=rng)
    if name not in MODEL_DEPTHS:
        raise ConfigError(f"неизвестная модель: {name}")
    return ToyConvNet(MODEL_DEPTHS[name], block, width, classes, attention, rng=rng)
