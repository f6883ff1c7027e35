import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from config import config
from services.attention import AttentionConfig, BridgeAttention, PoolingStrategy, SEModule, pool
from services.blocks import BasicBlock, Bottleneck, TransformerBlock, TransformerStage
from services.errors import ConfigError
from services.layers import BatchNorm, Module, MultiHeadSelfAttention
from services.tensor_core import (
    GradCheckResult,
    Tensor,
    batchnorm,
    channel_scale,
    conv2d,
    cross_entropy,
    gap,
    grad_check,
    layernorm,
    linear,
    softmax,
)

logger = logging.getLogger(__name__)

CONV_THRESHOLD = 1e-6
TRANSFORMER_THRESHOLD = 1e-5

LossBuilder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class GradCase:
    name: str
    build: LossBuilder
    threshold: float = CONV_THRESHOLD


@dataclass
class CaseOutcome:
    suite: str
    name: str
    threshold: float
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.passed(self.threshold)


def leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def weighted_loss(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """
    Скалярная функция потерь: сумма выхода со случайными весами
    """

    weights = Tensor(rng.standard_normal(fn().shape))
    return lambda: (fn() * weights).sum()


def randomize_batchnorm(module: Module, rng: np.random.Generator) -> None:
    # ненулевые статистики, чтобы режим оценки не был тождеством
    for m in module.modules():
        if isinstance(m, BatchNorm):
            c = m.gamma.size
            m.running_mean = 0.1 * rng.standard_normal(c)
            m.running_var = rng.uniform(0.5, 1.5, c)
            m.gamma.data = rng.uniform(0.5, 1.5, c)
            m.beta.data = 0.1 * rng.standard_normal(c)


def module_case(
    make: Callable[[np.random.Generator], Module],
    *shape: int,
    run: Callable[[Module, Tensor], Tensor] = lambda m, x: m(x)
) -> LossBuilder:
    def build(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
        module = make(rng)
        randomize_batchnorm(module, rng)
        module.eval()
        x = leaf(rng, *shape)
        return weighted_loss(lambda: run(module, x), rng), [x, *module.parameters()]
    return build


# --- Элементарные операции ---

def _gap(rng):
    x = leaf(rng, 2, 3, 5, 5)
    return weighted_loss(lambda: gap(x), rng), [x]


def _linear(rng):
    x, w, b = leaf(rng, 4, 8), leaf(rng, 3, 8), leaf(rng, 3)
    return weighted_loss(lambda: linear(x, w, b), rng), [x, w, b]


def _matmul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
    return weighted_loss(lambda: a @ b, rng), [a, b]


def _conv(stride: int, side: int) -> LossBuilder:
    def build(rng):
        x, k = leaf(rng, 2, 3, side, side), leaf(rng, 4, 3, 3, 3, scale=0.3)
        return weighted_loss(lambda: conv2d(x, k, stride=stride, padding=1), rng), [x, k]
    return build


def _batchnorm_train(*shape: int) -> LossBuilder:
    def build(rng):
        c = shape[1]
        x = leaf(rng, *shape)
        gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
        beta = leaf(rng, c)
        mean, var = np.zeros(c), np.ones(c)
        return weighted_loss(lambda: batchnorm(x, gamma, beta, mean, var, training=True), rng), [x, gamma, beta]
    return build


def _batchnorm_eval(rng):
    x = leaf(rng, 4, 3, 4, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = leaf(rng, 3)
    mean, var = 0.1 * rng.standard_normal(3), rng.uniform(0.5, 1.5, 3)
    return weighted_loss(lambda: batchnorm(x, gamma, beta, mean, var, training=False), rng), [x, gamma, beta]


def _unary(op: Callable[[Tensor], Tensor]) -> LossBuilder:
    def build(rng):
        x = leaf(rng, 4, 6)
        return weighted_loss(lambda: op(x), rng), [x]
    return build


def _channel_scale(rng):
    x, omega = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3)
    return weighted_loss(lambda: channel_scale(x, omega), rng), [x, omega]


def _cross_entropy(rng):
    logits = leaf(rng, 6, 4)
    labels = np.arange(6) % 4
    return (lambda: cross_entropy(logits, labels)), [logits]


def _layernorm(rng):
    x, gamma, beta = leaf(rng, 2, 4, 8), leaf(rng, 8), leaf(rng, 8)
    return weighted_loss(lambda: layernorm(x, gamma, beta), rng), [x, gamma, beta]


def _pool(kind: str) -> LossBuilder:
    def build(rng):
        x = leaf(rng, 2, 3, 4, 4)
        strategy = PoolingStrategy(kind=kind, dct_components=6)
        return weighted_loss(lambda: pool(x, strategy), rng), [x]
    return build


OPS_CASES = [
    GradCase("gap", _gap),
    GradCase("linear", _linear),
    GradCase("matmul", _matmul),
    GradCase("conv2d", _conv(1, 8)),
    GradCase("conv2d_stride2", _conv(2, 7)),
    GradCase("batchnorm_train_2d", _batchnorm_train(8, 16), TRANSFORMER_THRESHOLD),
    GradCase("batchnorm_train_4d", _batchnorm_train(4, 3, 4, 4), TRANSFORMER_THRESHOLD),
    GradCase("batchnorm_eval", _batchnorm_eval),
    GradCase("sigmoid", _unary(lambda x: x.sigmoid())),
    GradCase("relu", _unary(lambda x: x.relu())),
    GradCase("softmax", _unary(lambda x: softmax(x, axis=-1))),
    GradCase("channel_scale", _channel_scale),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("layernorm", _layernorm, TRANSFORMER_THRESHOLD),
    GradCase(
        "mhsa",
        module_case(lambda rng: MultiHeadSelfAttention(8, 2, rng=rng), 2, 4, 8),
        TRANSFORMER_THRESHOLD,
    ),
    GradCase("pool_avg_max", _pool("avg_max")),
    GradCase("pool_avg_std", _pool("avg_std")),
    GradCase("pool_dct", _pool("dct")),
]


# --- Модули внимания ---

def _bridge(variant: str, kind: str = "avg") -> LossBuilder:
    def build(rng):
        module = BridgeAttention([4, 6, 8], 8, 2, variant, PoolingStrategy(kind=kind, dct_components=4), rng)
        randomize_batchnorm(module, rng)
        if module.fusion is not None:
            module.fusion.data = rng.uniform(0.2, 1.0, 3)
        module.eval()
        xs = [leaf(rng, 2, 4, 5, 5), leaf(rng, 2, 6, 4, 4), leaf(rng, 2, 8, 4, 4)]
        loss = weighted_loss(lambda: channel_scale(xs[2], module(xs)), rng)
        return loss, [*xs, *module.parameters()]
    return build


ATTENTION_CASES = [
    GradCase("se", module_case(lambda rng: SEModule(8, 2, rng=rng), 2, 8, 4, 4,
                               run=lambda m, x: channel_scale(x, m(x)))),
    GradCase("bav1", _bridge("bav1")),
    GradCase("bav2", _bridge("bav2")),
    GradCase("bav2_avg_max", _bridge("bav2", "avg_max")),
    GradCase("bav2_avg_std", _bridge("bav2", "avg_std")),
    GradCase("bav2_dct", _bridge("bav2", "dct")),
]


# --- Блоки ---

def _attention(variant: str, reduction: int) -> AttentionConfig | None:
    return None if variant == "none" else AttentionConfig(variant=variant, reduction=reduction)


def _basic(variant: str, in_channels: int = 8, stride: int = 1) -> LossBuilder:
    return module_case(
        lambda rng: BasicBlock(in_channels, 8, stride, _attention(variant, 2), rng), 2, in_channels, 6, 6
    )


def _bottleneck(variant: str, in_channels: int = 32, stride: int = 1) -> LossBuilder:
    return module_case(
        lambda rng: Bottleneck(in_channels, 8, stride, _attention(variant, 4), rng), 2, in_channels, 6, 6
    )


def _transformer(integration: str) -> LossBuilder:
    cfg = AttentionConfig(reduction=4)
    if integration == "ba_stage":
        return module_case(lambda rng: TransformerStage(16, 2, 2, "ba_stage", cfg, rng), 2, 4, 16)
    return module_case(lambda rng: TransformerBlock(16, 2, integration, cfg, rng=rng), 2, 4, 16)


BLOCK_CASES = [
    *(GradCase(f"basic_{v}", _basic(v)) for v in ("none", "se", "bav1", "bav2")),
    GradCase("basic_bav2_stride2", _basic("bav2", in_channels=4, stride=2)),
    *(GradCase(f"bottleneck_{v}", _bottleneck(v)) for v in ("none", "se", "bav1", "bav2")),
    GradCase("bottleneck_bav2_stride2", _bottleneck("bav2", in_channels=16, stride=2)),
    *(
        GradCase(f"transformer_{i}", _transformer(i), TRANSFORMER_THRESHOLD)
        for i in ("none", "ba_mlp", "ba_block", "se_mlp", "ba_stage")
    ),
]

SUITES: dict[str, list[GradCase]] = {
    "ops": OPS_CASES,
    "attention": ATTENTION_CASES,
    "blocks": BLOCK_CASES,
}


def run_case(suite: str, case: GradCase, seed: int = 0) -> CaseOutcome:
    rng = np.random.default_rng(seed)
    loss_fn, params = case.build(rng)
    result = grad_check(
        loss_fn, params,
        eps=config.gradcheck_eps, coords=config.gradcheck_coords, seed=seed
    )
    outcome = CaseOutcome(suite, case.name, case.threshold, result)
    status = "OK" if outcome.passed else "FAIL"
    logger.info(
        f"{suite}/{case.name}: {result.max_relative_error:.2e} "
        f"(порог {case.threshold:.0e}, {result.checked} коорд., пропущено {result.skipped}) {status}"
    )
    if not outcome.passed:
        logger.error(f"{suite}/{case.name}: худшая координата {result.worst}")
    return outcome


def run_suite(name: str, seed: int = 0) -> list[CaseOutcome]:
    """
    Запустить набор проверок градиентов ("ops", "attention", "blocks" или "all")
    """

    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise ConfigError(f"неизвестный набор проверок: {name}")
    return [run_case(suite, case, seed) for suite in names for case in SUITES[suite]]
