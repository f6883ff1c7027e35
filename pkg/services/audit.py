import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import config
from services.attention import AttentionConfig, PoolingStrategy, attention_param_count
from services.blocks import EXPANSION, resolve_sources
from services.errors import ConfigError, FormatError, ShapeError
from services.tensor_core import conv_output_size

logger = logging.getLogger(__name__)

Backbone = Literal["resnet18", "resnet34", "resnet50", "resnet101"]
AuditDataset = Literal["imagenet", "cifar10", "cifar100"]

STAGE_PLANS: dict[str, tuple[str, tuple[int, int, int, int]]] = {
    "resnet18": ("basic", (2, 2, 2, 2)),
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
    "resnet101": ("bottleneck", (3, 4, 23, 3)),
}
STAGE_WIDTHS = (64, 128, 256, 512)
STAGE_STRIDES = (1, 2, 2, 2)
STEM_WIDTH = 64
DATASET_SHAPES: dict[str, tuple[int, int]] = {
    # размер входа, число классов
    "imagenet": (224, 1000),
    "cifar10": (32, 10),
    "cifar100": (32, 100),
}


class StageSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["basic", "bottleneck"]
    blocks: int = Field(ge=1)
    width: int = Field(ge=1)
    stride: int = Field(ge=1)


class ArchSpec(BaseModel):
    """
    Символьное описание сети: стем, этапы, внимание и голова
    """

    model_config = ConfigDict(frozen=True)

    name: str
    backbone: Backbone
    dataset: AuditDataset = "imagenet"
    image_size: int
    classes: int
    stem: Literal["imagenet", "cifar"]
    stages: tuple[StageSpec, ...]
    attention: Optional[AttentionConfig] = None

    @property
    def block_count(self) -> int:
        return sum(stage.blocks for stage in self.stages)


def build_arch(
    backbone: str,
    attn: str = "none",
    r: int = 16,
    dataset: str = "imagenet",
    sources: Optional[Sequence[str]] = None,
    pooling: PoolingStrategy = PoolingStrategy()
) -> ArchSpec:
    if backbone not in STAGE_PLANS:
        raise ConfigError(f"неизвестная архитектура: {backbone}")
    if dataset not in DATASET_SHAPES:
        raise ConfigError(f"неизвестный набор данных для аудита: {dataset}")
    kind, plan = STAGE_PLANS[backbone]
    stages = tuple(
        StageSpec(kind=kind, blocks=count, width=width, stride=stride)
        for count, width, stride in zip(plan, STAGE_WIDTHS, STAGE_STRIDES)
    )
    attention = None
    if attn != "none":
        if attn not in ("se", "bav1", "bav2"):
            raise ConfigError(f"неизвестный вариант внимания: {attn}")
        if sources is not None and attn == "se":
            raise ConfigError("источники моста не применимы к SE")
        attention = AttentionConfig(
            variant=attn, reduction=r, pooling=pooling,
            sources=tuple(sources) if sources is not None else None
        )
    image_size, classes = DATASET_SHAPES[dataset]
    return ArchSpec(
        name=f"{backbone}-{attn}" if dataset == "imagenet" else f"{backbone}-{attn}-{dataset}",
        backbone=backbone,
        dataset=dataset,
        image_size=image_size,
        classes=classes,
        stem="imagenet" if dataset == "imagenet" else "cifar",
        stages=stages,
        attention=attention,
    )


# --- Подсчет ---

@dataclass
class Cost:
    params: int = 0
    flops: int = 0
    attention_params: int = 0
    attention_params_simplified: int = 0
    attention_flops: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(
            self.params + other.params,
            self.flops + other.flops,
            self.attention_params + other.attention_params,
            self.attention_params_simplified + other.attention_params_simplified,
            self.attention_flops + other.attention_flops,
        )


@dataclass(frozen=True)
class FeatureShape:
    channels: int
    height: int
    width: int

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width


def conv_cost(cin: int, cout: int, k: int, out: FeatureShape) -> Cost:
    macs = cin * cout * k * k
    return Cost(params=macs, flops=macs * out.height * out.width)


def bn_relu_cost(shape: FeatureShape, relu: bool = True) -> Cost:
    # BN и ReLU: одна операция на элемент
    return Cost(params=2 * shape.channels, flops=shape.elements * (2 if relu else 1))


def pool_flops(shape: FeatureShape, pooling: PoolingStrategy) -> int:
    if pooling.kind == "dct":
        return pooling.dct_components * shape.elements
    return pooling.statistics * shape.elements


def attention_cost(cfg: AttentionConfig, taps: Sequence[FeatureShape], out: FeatureShape) -> Cost:
    """
    Параметры и MAC модуля внимания по формам его входов
    """

    if out.channels % cfg.reduction:
        raise ShapeError(f"r={cfg.reduction} не делит ширину {out.channels}")
    hidden = out.channels // cfg.reduction
    stats = cfg.pooling.statistics
    n = len(taps)
    widths = [tap.channels for tap in taps]
    params = attention_param_count(n, out.channels, cfg.reduction, cfg.variant, "actual", widths, stats)
    simplified_extra = attention_param_count(n, out.channels, cfg.reduction, cfg.variant, "simplified")
    projections = attention_param_count(n, out.channels, cfg.reduction, "se", "actual", widths, stats)

    flops = sum(pool_flops(tap, cfg.pooling) for tap in taps)
    flops += sum(hidden * stats * c for c in widths)
    if cfg.variant == "bav2":
        flops += n * hidden + hidden
    elif cfg.variant == "bav1":
        flops += n * hidden + (n - 1) * hidden
    flops += hidden + out.channels * hidden + out.channels
    flops += out.elements
    return Cost(
        params=params,
        flops=flops,
        attention_params=params,
        attention_params_simplified=projections + simplified_extra,
        attention_flops=flops,
    )


def _block_cost(
    kind: str,
    in_shape: FeatureShape,
    width: int,
    stride: int,
    attention: Optional[AttentionConfig],
    sources: tuple[str, ...]
) -> tuple[Cost, FeatureShape]:
    cin = in_shape.channels
    h2 = conv_output_size(in_shape.height, 3, stride, 1)
    w2 = conv_output_size(in_shape.width, 3, stride, 1)
    cost = Cost()
    if kind == "bottleneck":
        out_channels = EXPANSION * width
        conv1 = FeatureShape(width, in_shape.height, in_shape.width)
        conv2 = FeatureShape(width, h2, w2)
        out = FeatureShape(out_channels, h2, w2)
        cost += conv_cost(cin, width, 1, conv1) + bn_relu_cost(conv1)
        cost += conv_cost(width, width, 3, conv2) + bn_relu_cost(conv2)
        cost += conv_cost(width, out_channels, 1, out) + bn_relu_cost(out, relu=False)
        shapes = {"curr_conv1": conv1, "curr_conv2": conv2, "adjacent": out}
    else:
        out_channels = width
        conv1 = FeatureShape(width, h2, w2)
        out = FeatureShape(width, h2, w2)
        cost += conv_cost(cin, width, 3, conv1) + bn_relu_cost(conv1)
        cost += conv_cost(width, width, 3, out) + bn_relu_cost(out, relu=False)
        shapes = {"curr_conv1": conv1, "adjacent": out}
    if stride != 1 or cin != out_channels:
        cost += conv_cost(cin, out_channels, 1, out) + bn_relu_cost(out, relu=False)
    # сложение с остаточной связью и финальный ReLU
    cost += Cost(flops=2 * out.elements)

    if attention is not None:
        shapes["prev_conv3"] = shapes["prev_end"] = in_shape
        shapes["prev_attn"] = FeatureShape(cin, 1, 1)
        cost += attention_cost(attention, [shapes[tap] for tap in sources], out)
    return cost, out


def block_param_count(
    kind: str,
    in_channels: int,
    width: int,
    stride: int = 1,
    attention: Optional[AttentionConfig] = None,
    spatial: int = 8
) -> int:
    """
    Число параметров одного блока (для сверки с экземпляром из blocks)
    """

    sources = _block_sources(kind, attention)
    cost, _ = _block_cost(kind, FeatureShape(in_channels, spatial, spatial), width, stride, attention, sources)
    return cost.params


def _block_sources(kind: str, attention: Optional[AttentionConfig]) -> tuple[str, ...]:
    if attention is None:
        return ()
    if attention.variant == "se":
        return ("adjacent",)
    return resolve_sources(kind, attention.sources)


def stem_cost(spec: ArchSpec) -> tuple[Cost, FeatureShape]:
    size = spec.image_size
    if spec.stem == "cifar":
        out = FeatureShape(STEM_WIDTH, size, size)
        return conv_cost(3, STEM_WIDTH, 3, out) + bn_relu_cost(out), out
    side = conv_output_size(size, 7, 2, 3)
    conv = FeatureShape(STEM_WIDTH, side, side)
    pooled_side = conv_output_size(side, 3, 2, 1)
    cost = conv_cost(3, STEM_WIDTH, 7, conv) + bn_relu_cost(conv) + Cost(flops=conv.elements)
    return cost, FeatureShape(STEM_WIDTH, pooled_side, pooled_side)


def head_cost(spec: ArchSpec, shape: FeatureShape) -> Cost:
    linear = shape.channels * spec.classes
    return Cost(params=linear + spec.classes, flops=shape.elements + linear)


def stage_costs(spec: ArchSpec) -> list[tuple[str, Cost]]:
    """
    Разбивка по частям: stem, layer1..layer4, head
    """

    cost, shape = stem_cost(spec)
    parts = [("stem", cost)]
    sources = _block_sources(spec.stages[0].kind, spec.attention)
    for index, stage in enumerate(spec.stages, start=1):
        stage_total = Cost()
        for b in range(stage.blocks):
            stride = stage.stride if b == 0 else 1
            block, shape = _block_cost(stage.kind, shape, stage.width, stride, spec.attention, sources)
            stage_total += block
        parts.append((f"layer{index}", stage_total))
    parts.append(("head", head_cost(spec, shape)))
    return parts


def total_cost(spec: ArchSpec) -> Cost:
    total = Cost()
    for _, cost in stage_costs(spec):
        total += cost
    return total


def count_params(spec: ArchSpec) -> int:
    return total_cost(spec).params


def count_params_simplified(spec: ArchSpec) -> int:
    total = total_cost(spec)
    return total.params - total.attention_params + total.attention_params_simplified


def count_flops(spec: ArchSpec) -> int:
    return total_cost(spec).flops


# --- Отчет ---

class StageCost(BaseModel):
    name: str
    params: int
    flops: int
    attention_params: int


class AttentionOverhead(BaseModel):
    params: int
    params_simplified: int
    flops: int


class AuditReport(BaseModel):
    arch: str
    attention: str
    r: int
    dataset: str
    sources: Optional[list[str]] = None
    params_total: int
    params_total_simplified: int
    flops_total: int
    params_paper_ref: Optional[float] = None
    flops_paper_ref: Optional[float] = None
    delta_pct: Optional[float] = None
    flops_delta_pct: Optional[float] = None
    status: Literal["PASS", "FAIL", "NO_REF"]
    per_stage: list[StageCost]
    attention_overhead: AttentionOverhead

    @model_validator(mode="after")
    def _totals_are_additive(self) -> "AuditReport":
        if sum(s.params for s in self.per_stage) != self.params_total:
            raise ValueError("сумма параметров по этапам не равна итогу")
        if sum(s.flops for s in self.per_stage) != self.flops_total:
            raise ValueError("сумма FLOPs по этапам не равна итогу")
        if sum(s.attention_params for s in self.per_stage) != self.attention_overhead.params:
            raise ValueError("сумма параметров внимания по этапам не равна итогу")
        return self


class ReferenceCell(BaseModel):
    dataset: str
    backbone: str
    variant: str
    params_millions: float
    flops_g: Optional[float] = None


def load_reference_table(path: Path) -> dict[tuple[str, str, str], ReferenceCell]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise FormatError(f"не удалось прочитать таблицу эталонов {path}: {e}") from e
    table = {}
    for row in rows:
        cleaned = {key: (value if value != "" else None) for key, value in row.items()}
        cell = ReferenceCell.model_validate(cleaned)
        table[(cell.dataset, cell.backbone, cell.variant)] = cell
    return table


def reference_key(spec: ArchSpec) -> tuple[str, str, str]:
    if spec.attention is None:
        return spec.dataset, spec.backbone, "none"
    variant = spec.attention.variant
    if spec.attention.sources is not None:
        label = _sources_label(spec.attention.sources)
        variant = f"{variant}@{label}"
    return spec.dataset, spec.backbone, variant


def _sources_label(sources: Sequence[str]) -> str:
    taps = [tap for tap in sources if tap not in ("adjacent", "curr_conv3")]
    if taps == ["curr_conv1", "curr_conv2"]:
        return "curr_conv1&2"
    return "+".join(taps) if taps else "adjacent"


class AuditService:
    def __init__(self) -> None:
        # Допустимые отклонения от эталонной таблицы, %
        self.validation_thresholds: dict[str, float] = {
            "params": 0.5,
            "flops": 2.0,
        }
        self._table: Optional[dict[tuple[str, str, str], ReferenceCell]] = None

    def reference_table(self) -> dict[tuple[str, str, str], ReferenceCell]:
        if self._table is None:
            self._table = load_reference_table(config.reference_table)
        return self._table

    def audit_report(self, spec: ArchSpec) -> AuditReport:
        parts = stage_costs(spec)
        total = Cost()
        for _, cost in parts:
            total += cost

        cell = self.reference_table().get(reference_key(spec))
        delta = flops_delta = None
        status = "NO_REF"
        if cell is not None:
            delta = (total.params / 1e6 - cell.params_millions) / cell.params_millions * 100
            passed = abs(delta) <= self.validation_thresholds["params"]
            if cell.flops_g is not None:
                flops_delta = (total.flops / 1e9 - cell.flops_g) / cell.flops_g * 100
                passed = passed and abs(flops_delta) <= self.validation_thresholds["flops"]
            status = "PASS" if passed else "FAIL"

        attention = spec.attention
        report = AuditReport(
            arch=spec.backbone,
            attention=attention.variant if attention else "none",
            r=attention.reduction if attention else 16,
            dataset=spec.dataset,
            sources=list(attention.sources) if attention and attention.sources else None,
            params_total=total.params,
            params_total_simplified=total.params - total.attention_params + total.attention_params_simplified,
            flops_total=total.flops,
            params_paper_ref=cell.params_millions if cell else None,
            flops_paper_ref=cell.flops_g if cell else None,
            delta_pct=delta,
            flops_delta_pct=flops_delta,
            status=status,
            per_stage=[
                StageCost(name=name, params=c.params, flops=c.flops, attention_params=c.attention_params)
                for name, c in parts
            ],
            attention_overhead=AttentionOverhead(
                params=total.attention_params,
                params_simplified=total.attention_params_simplified,
                flops=total.attention_flops,
            ),
        )
        logger.info(f"Аудит {spec.name}: {report.params_total / 1e6:.2f}M, {report.flops_total / 1e9:.2f}G, {status}")
        return report

    def print_audit_report(self, report: AuditReport) -> str:
        """
        Текстовая сводка отчета для терминала
        """

        lines = [
            f"Архитектура: {report.arch} ({report.dataset}), внимание: {report.attention}, r={report.r}",
        ]
        if report.sources:
            lines.append(f"Источники моста: {', '.join(report.sources)}")
        lines.append(f"{'часть':<8}{'параметры':>14}{'MAC':>16}{'внимание':>12}")
        for stage in report.per_stage:
            lines.append(f"{stage.name:<8}{stage.params:>14,}{stage.flops:>16,}{stage.attention_params:>12,}")
        lines.append(f"Параметры: {report.params_total / 1e6:.2f}M (упрощенный учет BN: {report.params_total_simplified / 1e6:.2f}M)")
        lines.append(f"FLOPs (MAC): {report.flops_total / 1e9:.2f}G")
        overhead = report.attention_overhead
        lines.append(f"Вклад внимания: {overhead.params:,} параметров ({overhead.params_simplified:,} при упрощенном учете), {overhead.flops:,} MAC")
        if report.params_paper_ref is not None:
            lines.append(f"Эталон: {report.params_paper_ref:.2f}M, отклонение {report.delta_pct:+.2f}%")
        if report.flops_paper_ref is not None:
            lines.append(f"Эталон FLOPs: {report.flops_paper_ref:.2f}G, отклонение {report.flops_delta_pct:+.2f}%")
        mark = {"PASS": "✅", "FAIL": "❌", "NO_REF": "➖"}[report.status]
        lines.append(f"{mark} {report.status}")
        return "\n".join(lines)


# Глобальный экземпляр сервиса аудита
audit_service = AuditService()


def audit_report(spec: ArchSpec) -> AuditReport:
    return audit_service.audit_report(spec)
