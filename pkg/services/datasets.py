import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from config import VERIFICATION_DTYPE
from services.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
SYNTH_NOISE = 0.1


@dataclass
class Dataset:
    """
    Изображения [N,3,H,W] в [0,1] и целые метки в [0, classes)
    """

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise FormatError("пустой набор данных")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} изображений и {len(self.labels)} меток")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise FormatError(f"метки вне диапазона [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def astype(self, dtype: type) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.classes)


def _parse_cifar_bytes(raw: bytes, source: Path) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{source}: длина {len(raw)} не кратна {CIFAR_RECORD} байтам")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise FormatError(f"{source}: метка {labels.max()} ≥ {CIFAR_CLASSES}")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(VERIFICATION_DTYPE) / 255.0
    return images, labels


def load_cifar10(path: Path, split: Literal["train", "test"] = "train") -> Dataset:
    """
    Прочитать бинарные пакеты CIFAR-10: записи по 3073 байта,
    первый байт: метка, далее плоскости R, G, B по 32×32
    """

    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern))
        if not files:
            raise FormatError(f"в {path} нет файлов {pattern}")
    elif path.is_file():
        files = [path]
    else:
        raise FormatError(f"путь не найден: {path}")

    images, labels = [], []
    for file in files:
        part_images, part_labels = _parse_cifar_bytes(file.read_bytes(), file)
        images.append(part_images)
        labels.append(part_labels)
        logger.debug(f"{file.name}: {len(part_labels)} записей")
    dataset = Dataset(np.concatenate(images), np.concatenate(labels), CIFAR_CLASSES)
    logger.info(f"CIFAR-10 загружен: {len(dataset)} изображений из {len(files)} файлов")
    return dataset


def class_means(classes: int, channels: int = 3) -> np.ndarray:
    """
    Средние по каналам для каждого класса: вершины куба {0.25, 0.75}³,
    если классов не больше 8, иначе случайные точки
    """

    if classes <= 2 ** channels:
        bits = (np.arange(classes)[:, None] >> np.arange(channels)[None, :]) & 1
        return 0.25 + 0.5 * bits
    return np.random.default_rng(classes).uniform(0.2, 0.8, size=(classes, channels))


def synth_dataset(seed: int, n: int = 256, classes: int = 4, size: int = 8) -> Dataset:
    if classes < 2:
        raise ConfigError("нужно хотя бы 2 класса")
    if n < classes:
        raise ConfigError(f"образцов {n} меньше, чем классов {classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    means = class_means(classes)[labels][:, :, None, None]
    images = np.clip(means + SYNTH_NOISE * rng.standard_normal((n, 3, size, size)), 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes)
