import csv
import logging
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from services.attention import AttentionConfig
from services.blocks import SOURCE_PRESETS, Bottleneck
from services.errors import ConfigError, DivergenceError, ShapeError
from services.gradcheck_suites import CONV_THRESHOLD, leaf, randomize_batchnorm, weighted_loss
from services.tensor_core import GradCheckResult, grad_check
from services.training import TrainConfig, train

logger = logging.getLogger(__name__)

POOLING_KINDS = ("avg", "avg_max", "avg_std", "dct")
INTEGRATIONS = ("none", "ba_mlp", "ba_block", "se_mlp", "ba_stage")

# Двухблочная цепочка для проверки источников моста
CHAIN_CHANNELS = 16
CHAIN_SIDE = 6
VIT_MIN_IMAGE = 16


@dataclass
class AblationRow:
    variant: str
    final_loss: float
    train_acc: float
    eval_acc: float
    params: int


@dataclass
class SourceCheck:
    variant: str
    output_shape: tuple[int, ...]
    gradcheck: GradCheckResult

    @property
    def passed(self) -> bool:
        expected = (2, CHAIN_CHANNELS, CHAIN_SIDE, CHAIN_SIDE)
        return self.output_shape == expected and self.gradcheck.passed(CONV_THRESHOLD)


def _run(variant: str, cfg: TrainConfig) -> AblationRow:
    logger.info(f"Абляция: {variant}")
    result = train(cfg)
    final_loss = result.history[-1].loss if result.history else float("nan")
    row = AblationRow(
        variant=variant,
        final_loss=final_loss,
        train_acc=result.train_accuracy,
        eval_acc=result.eval_accuracy,
        params=result.model.num_parameters(),
    )
    if result.history and not np.isfinite(row.final_loss):
        raise DivergenceError(f"{variant}: функция потерь не конечна")
    if not (0.0 <= row.train_acc <= 1.0 and 0.0 <= row.eval_acc <= 1.0):
        raise DivergenceError(f"{variant}: точность вне [0, 1]")
    return row


def ablate_pooling(base: TrainConfig) -> list[AblationRow]:
    """
    Сравнить четыре стратегии сжатия при одном seed
    """

    if base.attention == "none":
        raise ConfigError("абляция пулинга требует модуля внимания")
    return [_run(kind, base.model_copy(update={"pooling": kind})) for kind in POOLING_KINDS]


def source_chain(
    sources: Sequence[str],
    rng: np.random.Generator
) -> tuple[Bottleneck, Bottleneck]:
    """
    Два bottleneck-блока BAv1; второй берет признаки по заданным источникам,
    первый служит ему предыдущим блоком
    """

    width = CHAIN_CHANNELS // 4
    first = Bottleneck(CHAIN_CHANNELS, width, 1, AttentionConfig(variant="bav1", reduction=4), rng)
    second = Bottleneck(
        CHAIN_CHANNELS, width, 1,
        AttentionConfig(variant="bav1", reduction=4, sources=tuple(sources)), rng
    )
    return first, second


def check_sources(variant: str, sources: Sequence[str], seed: int = 0) -> SourceCheck:
    rng = np.random.default_rng(seed)
    first, second = source_chain(sources, rng)
    for block in (first, second):
        randomize_batchnorm(block, rng)
        block.eval()
    x = leaf(rng, 2, CHAIN_CHANNELS, CHAIN_SIDE, CHAIN_SIDE)

    def chain():
        h, previous = first.run(x)
        return second.run(h, previous=previous)[0]

    shape = chain().shape
    if second.attention is None or len(second.sources) != len(sources):
        raise ShapeError(f"{variant}: источники моста не применены")
    params = [x, *first.parameters(), *second.parameters()]
    result = grad_check(weighted_loss(chain, rng), params, seed=seed)
    check = SourceCheck(variant, shape, result)
    logger.info(
        f"Источники {variant}: форма {shape}, ошибка градиента {result.max_relative_error:.2e} "
        f"{'OK' if check.passed else 'FAIL'}"
    )
    return check


def ablate_sources(base: TrainConfig) -> tuple[list[AblationRow], list[SourceCheck]]:
    """
    Шесть конфигураций источников моста: проверка формы и градиентов
    на двухблочной цепочке, затем короткое обучение toy2 с BAv1
    """

    checks = [check_sources(name, taps, base.seed) for name, taps in SOURCE_PRESETS.items()]
    rows = []
    for name, taps in SOURCE_PRESETS.items():
        cfg = base.model_copy(update={
            "model": "toy2",
            "block": "bottleneck",
            "attention": "bav1",
            "sources": list(taps),
        })
        rows.append(_run(name, cfg))
    return rows, checks


def ablate_integration(base: TrainConfig) -> list[AblationRow]:
    """
    Варианты встраивания моста в игрушечный трансформер
    """

    attention = base.attention if base.attention in ("bav1", "bav2") else "bav2"
    rows = []
    for integration in INTEGRATIONS:
        cfg = base.model_copy(update={
            "model": "toyvit",
            "attention": attention,
            "integration": integration,
            "image_size": max(base.image_size, VIT_MIN_IMAGE),
        })
        rows.append(_run(integration, cfg))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([field.name for field in fields(AblationRow)])
        for row in rows:
            writer.writerow([f"{value:.6f}" if isinstance(value, float) else value for value in astuple(row)])
    logger.info(f"Результаты абляции сохранены: {path}")


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'вариант':<14}{'loss':>10}{'train':>8}{'eval':>8}{'параметры':>12}"]
    for row in rows:
        lines.append(
            f"{row.variant:<14}{row.final_loss:>10.4f}{row.train_acc:>8.3f}{row.eval_acc:>8.3f}{row.params:>12,}"
        )
    return "\n".join(lines)
