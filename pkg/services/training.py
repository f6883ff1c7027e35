import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import config
from services.attention import AttentionConfig, PoolingStrategy, PoolKind
from services.blocks import Integration
from services.datasets import Dataset, load_cifar10, synth_dataset
from services.errors import ConfigError, DivergenceError, NonFiniteError
from services.layers import Module, Parameter
from services.models import ModelName, build_model
from services.tensor_core import Tensor, cross_entropy, no_grad

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainConfig(BaseModel):
    """
    Плоский конфиг обучения; имена полей совпадают с ключами JSON-файла
    """

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: ModelName = "toy3"
    block: Literal["basic", "bottleneck"] = "bottleneck"
    attention: Literal["none", "se", "bav1", "bav2"] = "bav2"
    reduction: int = Field(4, ge=1)
    pooling: PoolKind = "avg"
    dct_components: int = Field(16, ge=1)
    sources: Optional[list[str]] = None
    integration: Integration = "ba_mlp"
    bypass_attention: bool = False
    optimizer: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=2)
    shuffle: bool = True
    seed: int = 0
    dataset: Literal["synthetic", "cifar10"] = "synthetic"
    data_path: Optional[Path] = None
    samples: int = Field(256, ge=2)
    eval_samples: int = Field(128, ge=1)
    classes: int = Field(4, ge=2)
    image_size: int = Field(8, ge=1)
    width: int = Field(16, ge=1)

    @classmethod
    def from_json(cls, path: Path) -> "TrainConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def attention_config(self) -> Optional[AttentionConfig]:
        if self.attention == "none":
            return None
        return AttentionConfig(
            variant=self.attention,
            reduction=self.reduction,
            pooling=PoolingStrategy(kind=self.pooling, dct_components=self.dct_components),
            sources=tuple(self.sources) if self.sources else None,
        )


class Sgd:
    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.9) -> None:
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: list[Parameter], lr: float) -> None:
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        beta1, beta2 = ADAM_BETAS
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= beta1
            m += (1 - beta1) * p.grad
            v *= beta2
            v += (1 - beta2) * p.grad * p.grad
            m_hat = m / (1 - beta1 ** self.t)
            v_hat = v / (1 - beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    acc: float

    def to_line(self) -> str:
        return f"{self.epoch},{self.loss:.6f},{self.acc:.6f}"


@dataclass
class TrainResult:
    model: Module
    history: list[EpochMetrics] = field(default_factory=list)
    train_accuracy: float = 0.0
    eval_accuracy: float = 0.0


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """
    Обучающий и отложенный наборы по конфигу
    """

    if cfg.dataset == "synthetic":
        train_set = synth_dataset(cfg.seed, cfg.samples, cfg.classes, cfg.image_size)
        eval_set = synth_dataset(cfg.seed + 1, cfg.eval_samples, cfg.classes, cfg.image_size)
        return train_set, eval_set
    if cfg.data_path is None:
        raise ConfigError("для cifar10 нужен data_path")
    train_set = load_cifar10(cfg.data_path, "train")
    eval_set = load_cifar10(cfg.data_path, "test") if Path(cfg.data_path).is_dir() else train_set
    return train_set, eval_set


def make_model(cfg: TrainConfig, classes: int) -> Module:
    return build_model(
        cfg.model, cfg.attention_config(), cfg.block, cfg.width, classes, cfg.integration, cfg.seed
    )


def train(cfg: TrainConfig, dtype: Optional[str] = None) -> TrainResult:
    """
    Обучение с перекрестной энтропией; весь случайный выбор задан cfg.seed.

    Потеря эпохи считается по батчам в режиме обучения, поэтому при
    shuffle=True она зависит от состава батчей (статистики BN) даже при lr=0.
    Постоянная потеря при lr=0 гарантируется только с shuffle=False.
    """

    dtype = np.dtype(dtype or config.train_precision)
    train_set, eval_set = load_datasets(cfg)
    train_set, eval_set = train_set.astype(dtype), eval_set.astype(dtype)
    model = make_model(cfg, train_set.classes).to(dtype)
    params = model.parameters()
    optimizer = Sgd(params, cfg.lr, cfg.momentum) if cfg.optimizer == "sgd" else Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    logger.info(f"Обучение {cfg.model} ({cfg.attention}), {len(train_set)} образцов, {dtype}")

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            index = order[start:start + cfg.batch_size]
            if len(index) < 2:
                # BN в режиме обучения не определен на батче из одного образца
                logger.debug(f"Эпоха {epoch}: последний батч из {len(index)} образца пропущен")
                continue
            labels = train_set.labels[index]
            try:
                logits, _ = model.run(Tensor(train_set.images[index]), bypass=cfg.bypass_attention)
                loss = cross_entropy(logits, labels)
                model.zero_grad()
                loss.backward()
            except NonFiniteError as e:
                raise DivergenceError(f"эпоха {epoch}: обучение разошлось ({e})") from e
            optimizer.step()
            total_loss += loss.item() * len(index)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(index)
        if not np.isfinite(total_loss):
            raise DivergenceError(f"эпоха {epoch}: функция потерь не конечна")
        metrics = EpochMetrics(epoch, total_loss / seen, correct / seen)
        result.history.append(metrics)
        logger.info(f"Эпоха {metrics.to_line()}")

    result.train_accuracy = evaluate(model, train_set)
    result.eval_accuracy = evaluate(model, eval_set)
    logger.info(f"Точность: обучение {result.train_accuracy:.4f}, проверка {result.eval_accuracy:.4f}")
    return result


def evaluate(model: Any, dataset: Dataset, batch_size: int = 64) -> float:
    """
    Доля верных argmax-предсказаний; при равенстве логитов побеждает
    класс с меньшим индексом
    """

    if len(dataset.labels) == 0:
        raise ConfigError("пустой набор данных")
    if hasattr(model, "eval"):
        model.eval()
    correct = 0
    with no_grad():
        for start in range(0, len(dataset.labels), batch_size):
            images = dataset.images[start:start + batch_size]
            logits = model(Tensor(images))
            logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start:start + batch_size]))
    return correct / len(dataset.labels)
