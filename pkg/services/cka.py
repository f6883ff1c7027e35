import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from config import VERIFICATION_DTYPE
from services.datasets import Dataset
from services.errors import ConfigError, DegenerateFeatureError, FormatError, NonFiniteError, ShapeError
from services.tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

# Порог вырожденности HSIC(K,K) относительно ‖K‖²
DEGENERATE_RATIO = 1e-12


def gram(x: np.ndarray) -> np.ndarray:
    """
    K = X·Xᵀ для выборки из m строк
    """

    x = np.asarray(x, dtype=VERIFICATION_DTYPE)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"gram ожидает матрицу [m, d], получено {x.shape}")
    if x.shape[0] < 2:
        raise DegenerateFeatureError(f"gram требует не меньше 2 строк, получено {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("gram: в признаках есть NaN/Inf")
    return x @ x.T


def centering_matrix(m: int) -> np.ndarray:
    return np.eye(m) - np.ones((m, m)) / m


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """
    Смещенная оценка HSIC с линейными ядрами: tr(K·H·L·H) / (m−1)²
    """

    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape != l.shape:
        raise ShapeError(f"hsic: матрицы {k.shape} и {l.shape}")
    m = k.shape[0]
    h = centering_matrix(m)
    return float(np.trace(k @ h @ l @ h)) / (m - 1) ** 2


def _degenerate(self_hsic: float, k: np.ndarray) -> bool:
    m = k.shape[0]
    scale = float(np.sum(k * k)) / (m - 1) ** 2
    return self_hsic <= DEGENERATE_RATIO * max(scale, np.finfo(VERIFICATION_DTYPE).tiny)


def cka(k: np.ndarray, l: np.ndarray) -> float:
    hkk = hsic(k, k)
    hll = hsic(l, l)
    if _degenerate(hkk, k) or _degenerate(hll, l):
        raise DegenerateFeatureError("cka: признаки постоянны, HSIC(K,K) = 0")
    value = hsic(k, l) / np.sqrt(hkk * hll)
    return float(np.clip(value, 0.0, 1.0))


@dataclass
class CkaMatrix:
    """
    Сетка оценок CKA(S_i, ω): блоки по строкам, ветви по столбцам
    """

    blocks: list[str]
    branches: list[str]
    # NaN там, где у блока меньше ветвей
    scores: np.ndarray

    def rows(self) -> list["CkaRow"]:
        return [
            CkaRow(block=block, scores=[None if np.isnan(v) else float(v) for v in row])
            for block, row in zip(self.blocks, self.scores)
        ]

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["block", *self.branches])
            for row in self.rows():
                writer.writerow([row.block, *("" if v is None else repr(v) for v in row.scores)])
        logger.info(f"Матрица CKA {len(self.blocks)}×{len(self.branches)} записана в {path}")


class CkaRow(BaseModel):
    block: str = Field(pattern=r"^B\d+$")
    scores: list[Optional[float]]

    @field_validator("scores")
    @classmethod
    def _in_unit_interval(cls, value: list[Optional[float]]) -> list[Optional[float]]:
        for score in value:
            if score is not None and not 0.0 <= score <= 1.0:
                raise ValueError(f"оценка CKA {score} вне [0, 1]")
        return value


def read_cka_csv(path: Path) -> list[CkaRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "block" or any(
            name != f"S{i}" for i, name in enumerate(header[1:], start=1)
        ):
            raise FormatError(f"неверный заголовок CSV: {header}")
        return [
            CkaRow(block=row[0], scores=[float(v) if v else None for v in row[1:]])
            for row in reader
        ]


def importance_matrix(
    model: Any,
    dataset: Dataset,
    m: int,
    seed: int = 0,
    batch_size: int = 64
) -> CkaMatrix:
    """
    Для каждого блока с вниманием: CKA между сжатыми признаками ветвей S_i
    и весами ω на m образцах (режим оценки, порядок задан seed)
    """

    if m < 2 or m > len(dataset):
        raise ConfigError(f"число образцов {m} вне диапазона [2, {len(dataset)}]")
    order = np.random.default_rng(seed).permutation(len(dataset))[:m]
    model.eval()

    squeezed: dict[int, list[list[np.ndarray]]] = {}
    omegas: dict[int, list[np.ndarray]] = {}
    with no_grad():
        for start in range(0, m, batch_size):
            index = order[start:start + batch_size]
            _, traces = model.run(Tensor(dataset.images[index]))
            for b, trace in enumerate(traces):
                if trace.omega is None:
                    continue
                omegas.setdefault(b, []).append(trace.omega.data)
                parts = squeezed.setdefault(b, [[] for _ in trace.squeezed])
                for i, s in enumerate(trace.squeezed):
                    parts[i].append(s.data)
    if not omegas:
        raise ConfigError("у модели нет блоков с вниманием")

    block_ids = sorted(omegas)
    width = max(len(squeezed[b]) for b in block_ids)
    scores = np.full((len(block_ids), width), np.nan)
    for row, b in enumerate(block_ids):
        l = gram(np.concatenate(omegas[b]))
        for i, parts in enumerate(squeezed[b]):
            scores[row, i] = cka(gram(np.concatenate(parts)), l)
            logger.debug(f"B{b + 1} S{i + 1}: CKA = {scores[row, i]:.4f}")
    return CkaMatrix(
        blocks=[f"B{b + 1}" for b in block_ids],
        branches=[f"S{i + 1}" for i in range(width)],
        scores=scores,
    )
