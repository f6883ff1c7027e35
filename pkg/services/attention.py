import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.errors import ConfigError, ShapeError
from services.layers import BatchNorm, Module, Parameter, uniform_parameter
from services.tensor_core import (
    Tensor,
    concat,
    gap,
    linear,
    stack,
)

logger = logging.getLogger(__name__)

PoolKind = Literal["avg", "avg_max", "avg_std", "dct"]
Variant = Literal["se", "bav1", "bav2"]
# "paper" принимается как синоним "simplified"
Counting = Literal["simplified", "paper", "actual"]

DEFAULT_REDUCTION = 16
DEFAULT_DCT_COMPONENTS = 16


class PoolingStrategy(BaseModel):
    """
    Способ сжатия карты признаков в вектор канальных статистик
    """

    model_config = ConfigDict(frozen=True)

    kind: PoolKind = "avg"
    dct_components: int = Field(DEFAULT_DCT_COMPONENTS, ge=1)

    @property
    def statistics(self) -> int:
        # avg_max и avg_std дают две статистики на канал
        return 2 if self.kind in ("avg_max", "avg_std") else 1


class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: Variant = "bav2"
    reduction: int = Field(DEFAULT_REDUCTION, ge=1)
    pooling: PoolingStrategy = PoolingStrategy()
    sources: Optional[tuple[str, ...]] = None


# --- Пулинг ---

def zigzag_indices(h: int, w: int) -> list[tuple[int, int]]:
    """
    Частоты (u, v) двумерного DCT в зигзагообразном порядке от низких к высоким
    """

    pairs = [(u, v) for u in range(h) for v in range(w)]
    return sorted(pairs, key=lambda p: (p[0] + p[1], p[0] if (p[0] + p[1]) % 2 else p[1]))


def _dct_1d(length: int, freq: int) -> np.ndarray:
    positions = np.arange(length)
    basis = np.cos(np.pi * freq * (positions + 0.5) / length) / np.sqrt(length)
    return basis * np.sqrt(2.0) if freq else basis


def dct_basis(
    h: int,
    w: int,
    k: Optional[int] = None,
    indices: Optional[Sequence[tuple[int, int]]] = None
) -> np.ndarray:
    """
    Ортонормированные базисы DCT-II размера h×w, форма [k, h, w].

    Частоты задаются либо числом k (зигзаг от низких), либо явным
    списком пар (u, v).
    """

    if indices is None:
        if k is None or k < 1 or k > h * w:
            raise ShapeError(f"dct: число компонент {k} вне диапазона [1, {h * w}] для карты {h}×{w}")
        indices = zigzag_indices(h, w)[:k]
    for u, v in indices:
        if not (0 <= u < h and 0 <= v < w):
            raise ShapeError(f"dct: частота ({u}, {v}) вне карты {h}×{w}")
    return np.stack([np.outer(_dct_1d(h, u), _dct_1d(w, v)) for u, v in indices])


def dct_coefficients(x: Tensor, k: int) -> Tensor:
    """
    Проекции каждой карты [N,C,H,W] на k низкочастотных базисов: [N,C,k]
    """

    n, c, h, w = x.shape
    basis = dct_basis(h, w, k).reshape(-1, h * w).T.astype(x.dtype)
    return x.reshape(n, c, h * w) @ Tensor(basis)


def pool(x: Tensor, strategy: PoolingStrategy = PoolingStrategy()) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"pool ожидает [N,C,H,W], получено {x.shape}")
    avg = gap(x)
    if strategy.kind == "avg":
        return avg
    if strategy.kind == "avg_max":
        return concat([avg, x.max(axis=(2, 3))], axis=1)
    if strategy.kind == "avg_std":
        centered = x - avg.reshape(x.shape[0], x.shape[1], 1, 1)
        # стандартное отклонение генеральной совокупности, 0 при H·W = 1
        std = (centered * centered).mean(axis=(2, 3)).sqrt()
        return concat([avg, std], axis=1)
    return dct_coefficients(x, strategy.dct_components).sum(axis=2)


def tokens_as_maps(x: Tensor) -> Tensor:
    """
    [N,T,D] -> [N,D,T,1]: пулинг по токенам через тот же путь, что и по пространству
    """

    n, t, d = x.shape
    return x.transpose(0, 2, 1).reshape(n, d, t, 1)


def as_maps(x: Tensor) -> Tensor:
    if x.ndim == 3:
        return tokens_as_maps(x)
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1, 1)
    return x


# --- Функциональная форма ---

@dataclass
class SeParams:
    w1: Tensor
    w2: Tensor

    @property
    def reduction(self) -> int:
        return self.w2.shape[0] // self.w1.shape[0]


@dataclass
class BaParams:
    branch_proj: list[Tensor]
    w2: Tensor
    fusion: Optional[Tensor] = None
    branch_bn: list[BatchNorm] = field(default_factory=list)
    gen_bn: Optional[BatchNorm] = None

    @property
    def branches(self) -> int:
        return len(self.branch_proj)


def se_forward(x: Tensor, p: SeParams, strategy: PoolingStrategy = PoolingStrategy()) -> Tensor:
    """
    ω = σ(W2·ReLU(W1·pool(X)))
    """

    z = pool(x, strategy)
    if z.shape[1] != p.w1.shape[1]:
        raise ShapeError(f"se: статистик {z.shape[1]}, W1 ожидает {p.w1.shape[1]}")
    return linear(linear(z, p.w1).relu(), p.w2).sigmoid()


def squeeze_branches(
    x_list: Sequence[Tensor],
    p: BaParams,
    strategy: PoolingStrategy = PoolingStrategy()
) -> list[Tensor]:
    if len(x_list) != p.branches:
        raise ShapeError(f"ba: {len(x_list)} входов при {p.branches} ветвях")
    squeezed = []
    for i, (x, proj) in enumerate(zip(x_list, p.branch_proj)):
        z = pool(x, strategy)
        if z.shape[1] != proj.shape[1]:
            raise ShapeError(f"ba: ветвь {i} дает {z.shape[1]} статистик, проекция ожидает {proj.shape[1]}")
        squeezed.append(linear(z, proj))
    return squeezed


def fuse(squeezed: Sequence[Tensor], p: BaParams, variant: Variant) -> Tensor:
    """
    v2: S = Σ f_i·S_i; v1: S = Σ BN_i(S_i)
    """

    n = len(squeezed)
    if variant == "bav2":
        stacked = stack(squeezed, axis=1)
        return (stacked * p.fusion.reshape(1, n, 1)).sum(axis=1)
    if variant == "bav1":
        return stack([bn(s) for bn, s in zip(p.branch_bn, squeezed)], axis=1).sum(axis=1)
    raise ConfigError(f"слияние ветвей не определено для варианта {variant}")


def ba_integrate(
    x_list: Sequence[Tensor],
    p: BaParams,
    strategy: PoolingStrategy = PoolingStrategy(),
    variant: Variant = "bav2"
) -> Tensor:
    return fuse(squeeze_branches(x_list, p, strategy), p, variant)


def ba_generate(s: Tensor, p: BaParams, variant: Variant = "bav2") -> Tensor:
    if s.ndim != 2 or s.shape[1] != p.w2.shape[1]:
        raise ShapeError(f"ba: сжатый вектор {s.shape}, W2 ожидает ширину {p.w2.shape[1]}")
    hidden = p.gen_bn(s) if variant == "bav2" else s
    return linear(hidden.relu(), p.w2).sigmoid()


# --- Модули ---

class SEModule(Module):
    def __init__(
        self,
        channels: int,
        reduction: int = DEFAULT_REDUCTION,
        pooling: PoolingStrategy = PoolingStrategy(),
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ShapeError(f"r={reduction} не делит ширину {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        stats = pooling.statistics * channels
        self.pooling = pooling
        self.w1 = uniform_parameter(rng, (hidden, stats), stats)
        self.w2 = uniform_parameter(rng, (channels, hidden), hidden)

    @property
    def params(self) -> SeParams:
        return SeParams(self.w1, self.w2)

    def trace(self, features: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
        (x,) = features
        squeezed = linear(pool(as_maps(x), self.pooling), self.w1)
        omega = linear(squeezed.relu(), self.w2).sigmoid()
        return omega, [squeezed]

    def forward(self, x: Tensor) -> Tensor:
        return se_forward(as_maps(x), self.params, self.pooling)


class BridgeAttention(Module):
    """
    Мостовое внимание: интеграция сжатых признаков нескольких слоев
    и генерация весов для последнего из них.

    bav1 нормализует каждую ветвь своим BN и складывает; bav2 смешивает
    ветви n обучаемыми скалярами и нормализует сумму перед генерацией.
    """

    def __init__(
        self,
        in_widths: Sequence[int],
        out_width: int,
        reduction: int = DEFAULT_REDUCTION,
        variant: Variant = "bav2",
        pooling: PoolingStrategy = PoolingStrategy(),
        rng: Optional[np.random.Generator] = None
    ) -> None:
        super().__init__()
        if variant not in ("bav1", "bav2"):
            raise ConfigError(f"BridgeAttention не поддерживает вариант {variant}")
        if not in_widths:
            raise ConfigError("нужна хотя бы одна ветвь")
        if reduction < 1 or out_width % reduction:
            raise ShapeError(f"r={reduction} не делит ширину {out_width}")
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(in_widths)
        hidden = out_width // reduction
        self.variant = variant
        self.pooling = pooling
        self.in_widths = tuple(in_widths)
        self.branch_proj = [
            uniform_parameter(rng, (hidden, pooling.statistics * c), pooling.statistics * c)
            for c in in_widths
        ]
        self.fusion = Parameter(np.full(n, 1.0 / n)) if variant == "bav2" else None
        self.branch_bn = [BatchNorm(hidden) for _ in in_widths] if variant == "bav1" else []
        self.gen_bn = BatchNorm(hidden) if variant == "bav2" else None
        self.w2 = uniform_parameter(rng, (out_width, hidden), hidden)

    @property
    def params(self) -> BaParams:
        return BaParams(self.branch_proj, self.w2, self.fusion, self.branch_bn, self.gen_bn)

    def integrate(self, features: Sequence[Tensor]) -> Tensor:
        return ba_integrate([as_maps(f) for f in features], self.params, self.pooling, self.variant)

    def generate(self, s: Tensor) -> Tensor:
        return ba_generate(s, self.params, self.variant)

    def trace(self, features: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
        """
        Вернуть веса ω и сжатые признаки ветвей S_i (для анализа CKA)
        """

        p = self.params
        squeezed = squeeze_branches([as_maps(f) for f in features], p, self.pooling)
        omega = ba_generate(fuse(squeezed, p, self.variant), p, self.variant)
        return omega, squeezed

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        return self.trace(features)[0]


def build_attention(
    cfg: AttentionConfig,
    in_widths: Sequence[int],
    out_width: int,
    rng: Optional[np.random.Generator] = None
) -> Module:
    if cfg.variant == "se":
        return SEModule(out_width, cfg.reduction, cfg.pooling, rng)
    return BridgeAttention(in_widths, out_width, cfg.reduction, cfg.variant, cfg.pooling, rng)


# --- Арифметика параметров ---

def attention_param_count(
    n: int,
    c_n: int,
    r: int,
    variant: Variant,
    counting: Counting = "simplified",
    branch_widths: Optional[Sequence[int]] = None,
    statistics: int = 1
) -> int:
    """
    Число параметров модуля внимания.

    simplified: только добавки интеграции (v1: n·C_n/r за BN по одному на канал,
    v2: n + C_n/r); actual: все тензоры модуля, BN с gamma и beta.
    """

    if r < 1 or c_n % r:
        raise ShapeError(f"r={r} не делит ширину {c_n}")
    hidden = c_n // r
    if counting in ("simplified", "paper"):
        if variant == "se":
            return 0
        return n * hidden if variant == "bav1" else n + hidden

    widths = list(branch_widths) if branch_widths is not None else [c_n] * n
    if len(widths) != n:
        raise ShapeError(f"{len(widths)} ширин ветвей при n={n}")
    projections = sum(hidden * statistics * c for c in widths) + c_n * hidden
    if variant == "se":
        return projections
    if variant == "bav1":
        return projections + n * 2 * hidden
    return projections + n + 2 * hidden
